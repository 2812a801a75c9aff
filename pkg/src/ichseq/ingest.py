"""Load CT studies from disk, convert to Hounsfield units, and build manifests.

Two on-disk layouts are supported:

- portable raw: ``<slice_id>.hu16`` (row-major int16 little-endian HU matrix)
  plus a ``<slice_id>.json`` sidecar with study_id, z_position,
  instance_number and shape. This format needs no medical-imaging
  dependencies and is what the synthetic generator emits.
- native DICOM series: one directory per study; decoded via pydicom, which is
  an optional extra (``pip install ichseq[dicom]``).

Slices are grouped into scans by study_id and ordered along the patient axis
by z_position (ties broken by instance_number). When any slice of a study has
no z_position the whole study falls back to instance_number order; its
manifest rows keep an empty z cell, which is the quality flag for that
fallback.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .metrics import CLASS_NAMES

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("study_id", "slice_id", "raw_path", "z_position", "instance_number", *CLASS_NAMES)


@dataclass(frozen=True)
class RescaleParams:
    """Stored-value -> HU affine transform: hu = slope * raw + intercept."""

    slope: float = 1.0
    intercept: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.slope) or not np.isfinite(self.intercept):
            raise ConfigError(f"rescale params must be finite, got {self}")
        if self.slope == 0:
            raise ConfigError("rescale slope must be non-zero")


IDENTITY_RESCALE = RescaleParams(1.0, 0.0)


@dataclass(frozen=True)
class SliceRecord:
    study_id: str
    slice_id: str
    raw_path: str
    z_position: float | None
    instance_number: int
    labels: tuple[int, ...] | None = None  # 6 values in {0,1}, CLASS_NAMES order

    def __post_init__(self):
        if self.z_position is not None and not np.isfinite(self.z_position):
            raise DataError(f"slice {self.slice_id}: z_position must be finite, got {self.z_position}")
        if self.labels is not None:
            if len(self.labels) != len(CLASS_NAMES):
                raise DataError(f"slice {self.slice_id}: expected {len(CLASS_NAMES)} labels")
            if any(v not in (0, 1) for v in self.labels):
                raise DataError(f"slice {self.slice_id}: labels must be 0/1, got {self.labels}")
            object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))


@dataclass
class HUVolume:
    """One study's ordered slice stack in HU, with per-slice z positions."""

    study_id: str
    slices: np.ndarray  # (S, H, W) int16
    z_positions: list[float | None]

    def __post_init__(self):
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise DataError(f"study {self.study_id}: expected a non-empty (S, H, W) stack")
        if len(self.z_positions) != self.slices.shape[0]:
            raise DataError(f"study {self.study_id}: z_positions length mismatch")


def to_hounsfield(raw: np.ndarray, params: RescaleParams) -> np.ndarray:
    """Apply the stored-value -> HU affine map; exact in float64 arithmetic."""
    raw = np.asarray(raw)
    if not np.issubdtype(raw.dtype, np.integer):
        raise DataError(f"raw slice must be integral, got dtype {raw.dtype}")
    return raw.astype(np.float64) * params.slope + params.intercept


# ---------------------------------------------------------------------------
# portable raw format


def write_portable_slice(
    directory: Path,
    slice_id: str,
    hu: np.ndarray,
    study_id: str,
    z_position: float | None,
    instance_number: int,
) -> Path:
    """Write one slice as <slice_id>.hu16 + <slice_id>.json sidecar; returns the .hu16 path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hu = np.asarray(hu)
    if hu.ndim != 2:
        raise DataError(f"slice {slice_id}: expected a 2D matrix, got shape {hu.shape}")
    hu16 = directory / f"{slice_id}.hu16"
    hu.astype("<i2").tofile(hu16)
    sidecar = {
        "study_id": study_id,
        "slice_id": slice_id,
        "z_position": z_position,
        "instance_number": int(instance_number),
        "shape": [int(hu.shape[0]), int(hu.shape[1])],
    }
    with open(directory / f"{slice_id}.json", "w") as f:
        json.dump(sidecar, f, sort_keys=True)
        f.write("\n")
    return hu16


def read_portable_sidecar(hu16_path: Path) -> dict:
    sidecar_path = Path(hu16_path).with_suffix(".json")
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar for {hu16_path}")
    with open(sidecar_path) as f:
        meta = json.load(f)
    for key in ("study_id", "z_position", "instance_number", "shape"):
        if key not in meta:
            raise DataError(f"sidecar {sidecar_path} missing field {key!r}")
    return meta


def read_raw_slice(path: str | Path) -> tuple[np.ndarray, RescaleParams]:
    """Read one slice's stored values plus its rescale params, dispatching on format."""
    path = Path(path)
    if path.suffix == ".hu16":
        meta = read_portable_sidecar(path)
        h, w = meta["shape"]
        data = np.fromfile(path, dtype="<i2")
        if data.size != h * w:
            raise DataError(f"{path}: expected {h * w} int16 values, found {data.size}")
        return data.reshape(h, w).astype(np.int16), IDENTITY_RESCALE
    if path.suffix.lower() in (".dcm", ".dicom", ""):
        return _read_dicom_slice(path)
    raise DataError(f"unsupported slice format: {path}")


def _read_dicom_slice(path: Path) -> tuple[np.ndarray, RescaleParams]:
    try:
        import pydicom
    except ImportError as exc:
        raise ConfigError(
            "reading native CT series requires pydicom; install with `pip install ichseq[dicom]`"
        ) from exc
    ds = pydicom.dcmread(str(path))
    slope = float(getattr(ds, "RescaleSlope", 1.0))
    intercept = float(getattr(ds, "RescaleIntercept", 0.0))
    return np.asarray(ds.pixel_array), RescaleParams(slope, intercept)


# ---------------------------------------------------------------------------
# study assembly


def sort_records(records: list[SliceRecord]) -> list[SliceRecord]:
    """Anatomical slice order: ascending z, ties by instance_number.

    Falls back to pure instance_number order when any slice lacks z.
    """
    if any(r.z_position is None for r in records):
        return sorted(records, key=lambda r: (r.instance_number, r.slice_id))
    return sorted(records, key=lambda r: (r.z_position, r.instance_number, r.slice_id))


def assemble_study(records: list[SliceRecord], rescale: RescaleParams | None = None) -> HUVolume:
    """Read, rescale to HU, and order one study's slices into an HUVolume.

    ``rescale`` overrides the per-file rescale params when given (portable raw
    files already store HU, so their params are the identity). Fractional HU
    from non-integer slopes are rounded to the nearest integer.
    """
    if not records:
        raise DataError("assemble_study needs at least one record")
    study_ids = {r.study_id for r in records}
    if len(study_ids) != 1:
        raise DataError(f"records span multiple studies: {sorted(study_ids)}")
    study_id = records[0].study_id

    ordered = sort_records(records)
    slices = []
    shape = None
    for rec in ordered:
        try:
            raw, file_params = read_raw_slice(rec.raw_path)
        except OSError as exc:
            raise DataError(f"unreadable slice file {rec.raw_path}: {exc}") from exc
        hu = to_hounsfield(raw, rescale if rescale is not None else file_params)
        if shape is None:
            shape = hu.shape
        elif hu.shape != shape:
            raise DataError(
                f"study {study_id}: slice {rec.slice_id} has shape {hu.shape}, expected {shape}"
            )
        slices.append(np.rint(hu).astype(np.int16))
    return HUVolume(
        study_id=study_id,
        slices=np.stack(slices, axis=0),
        z_positions=[r.z_position for r in ordered],
    )


# ---------------------------------------------------------------------------
# manifests


def _discover_portable(root: Path) -> tuple[list[SliceRecord], list[dict]]:
    records, exclusions = [], []
    for hu16 in sorted(root.rglob("*.hu16")):
        try:
            meta = read_portable_sidecar(hu16)
            h, w = meta["shape"]
            if hu16.stat().st_size != 2 * h * w:
                raise DataError(
                    f"{hu16}: file size {hu16.stat().st_size} does not match shape {h}x{w}"
                )
            records.append(
                SliceRecord(
                    study_id=str(meta["study_id"]),
                    slice_id=str(meta.get("slice_id", hu16.stem)),
                    raw_path=str(hu16.relative_to(root)),
                    z_position=None if meta["z_position"] is None else float(meta["z_position"]),
                    instance_number=int(meta["instance_number"]),
                )
            )
        except (DataError, json.JSONDecodeError, ValueError, TypeError) as exc:
            exclusions.append({"kind": "slice", "item": str(hu16), "reason": str(exc)})
    return records, exclusions


def _discover_dicom(root: Path) -> tuple[list[SliceRecord], list[dict]]:
    try:
        import pydicom
    except ImportError as exc:
        raise ConfigError(
            "no .hu16 slices under root and native CT decoding requires pydicom; "
            "install with `pip install ichseq[dicom]`"
        ) from exc
    records, exclusions = [], []
    study_dirs = sorted(p for p in root.iterdir() if p.is_dir()) or [root]
    for study_dir in study_dirs:
        for path in sorted(p for p in study_dir.rglob("*") if p.is_file()):
            try:
                ds = pydicom.dcmread(str(path), stop_before_pixels=True)
            except Exception as exc:
                exclusions.append({"kind": "slice", "item": str(path), "reason": f"not DICOM: {exc}"})
                continue
            ipp = getattr(ds, "ImagePositionPatient", None)
            if ipp is not None and len(ipp) == 3:
                z = float(ipp[2])
            else:
                sl = getattr(ds, "SliceLocation", None)
                z = float(sl) if sl is not None else None
            records.append(
                SliceRecord(
                    study_id=str(getattr(ds, "StudyInstanceUID", study_dir.name)),
                    slice_id=str(getattr(ds, "SOPInstanceUID", path.stem)),
                    raw_path=str(path.relative_to(root)),
                    z_position=z,
                    instance_number=int(getattr(ds, "InstanceNumber", 0) or 0),
                )
            )
    return records, exclusions


def load_label_csv(path: str | Path) -> dict[str, tuple[int, ...]]:
    """Wide label CSV keyed by slice_id with the 6 class columns."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"label CSV not found: {path}")
    labels = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in ("slice_id", *CLASS_NAMES) if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"label CSV {path} missing columns: {missing}")
        for row in reader:
            labels[row["slice_id"]] = tuple(int(row[c]) for c in CLASS_NAMES)
    return labels


def build_manifest(
    root: str | Path,
    labels_csv: str | Path | None = None,
    exclude_studies: set[str] | None = None,
) -> tuple[list[SliceRecord], list[dict]]:
    """Scan a dataset root into manifest rows plus an exclusion report.

    Rows come back in deterministic (study_id, z, instance_number) order.
    Label rows naming unknown slices and studies with zero readable slices
    are reported, not fatal. ``exclude_studies`` drops whole studies by id
    (e.g. a hand-maintained outlier list).
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    exclude_studies = exclude_studies or set()

    records, exclusions = _discover_portable(root)
    if not records and not exclusions:
        records, exclusions = _discover_dicom(root)

    by_study: dict[str, list[SliceRecord]] = {}
    for rec in records:
        by_study.setdefault(rec.study_id, []).append(rec)

    kept: list[SliceRecord] = []
    for study_id in sorted(by_study):
        if study_id in exclude_studies:
            exclusions.append({"kind": "study", "item": study_id, "reason": "in exclusion list"})
            continue
        study_records = by_study[study_id]
        if not study_records:
            exclusions.append({"kind": "study", "item": study_id, "reason": "no readable slices"})
            continue
        kept.extend(sort_records(study_records))

    if labels_csv is not None:
        label_map = load_label_csv(labels_csv)
        known = {r.slice_id for r in kept}
        for slice_id in sorted(set(label_map) - known):
            log.warning("label row references unknown slice %s", slice_id)
            exclusions.append({"kind": "label", "item": slice_id, "reason": "unknown slice"})
        kept = [replace(r, labels=label_map.get(r.slice_id)) for r in kept]

    return kept, exclusions


def save_manifest(path: str | Path, records: list[SliceRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            labels = r.labels if r.labels is not None else ("",) * len(CLASS_NAMES)
            writer.writerow(
                [
                    r.study_id,
                    r.slice_id,
                    r.raw_path,
                    "" if r.z_position is None else repr(r.z_position),
                    r.instance_number,
                    *labels,
                ]
            )


def load_manifest(path: str | Path) -> list[SliceRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: unexpected manifest header {reader.fieldnames}")
        for row in reader:
            label_cells = [row[c] for c in CLASS_NAMES]
            if all(c == "" for c in label_cells):
                labels = None
            elif any(c == "" for c in label_cells):
                raise DataError(f"{path}: slice {row['slice_id']} has partial labels")
            else:
                labels = tuple(int(c) for c in label_cells)
            records.append(
                SliceRecord(
                    study_id=row["study_id"],
                    slice_id=row["slice_id"],
                    raw_path=row["raw_path"],
                    z_position=float(row["z_position"]) if row["z_position"] else None,
                    instance_number=int(row["instance_number"]),
                    labels=labels,
                )
            )
    return records


def resolve_raw_paths(records: list[SliceRecord], manifest_path: str | Path) -> list[SliceRecord]:
    """Make relative raw_paths absolute against the manifest's directory."""
    base = Path(manifest_path).resolve().parent
    out = []
    for r in records:
        p = Path(r.raw_path)
        out.append(r if p.is_absolute() else replace(r, raw_path=str(base / p)))
    return out


def save_exclusions(path: str | Path, exclusions: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["kind", "item", "reason"])
        writer.writeheader()
        writer.writerows(exclusions)


def group_by_study(records: list[SliceRecord]) -> dict[str, list[SliceRecord]]:
    """Manifest rows -> ordered per-study record lists, keyed by study_id (sorted)."""
    by_study: dict[str, list[SliceRecord]] = {}
    for rec in records:
        by_study.setdefault(rec.study_id, []).append(rec)
    return {sid: sort_records(recs) for sid, recs in sorted(by_study.items())}
