"""Synthetic CT-like volumes for smoke tests and desk-scale training runs.

Each study is a small stack of soft-tissue-range noise slices (0-40 HU).
Half the studies carry a bright ellipsoid "lesion" (60-90 HU) spanning at
least two adjacent slices; slices intersecting the lesion are labeled with
one subtype plus the any-lesion flag. The brain window maps background to
<= 0.5 and lesions to >= 0.75, so the task is learnable at tiny resolution.

Everything is a pure function of (seed, study index): regenerating with the
same arguments produces byte-identical raw files and manifests.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .ingest import SliceRecord, save_manifest, write_portable_slice

SLICE_SPACING_MM = 5.0

# every synthetic lesion is labeled as this subtype column
# (intraparenchymal, the most common subtype in real data)
LESION_SUBTYPE = 1


def generate_study(
    rng: np.random.Generator,
    n_slices: int,
    height: int,
    width: int,
    with_lesion: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic volume -> (hu (S,H,W) int16, labels (S,6) float).

    Labels on lesion slices set the lesion subtype column plus the any
    column; presence is the whole signal, which keeps all six outputs
    fittable within a few desk-scale epochs.
    """
    hu = rng.uniform(0.0, 40.0, size=(n_slices, height, width))
    labels = np.zeros((n_slices, 6), dtype=np.float64)
    if with_lesion:
        z_extent = int(rng.integers(2, min(5, n_slices) + 1))
        z0 = int(rng.integers(0, n_slices - z_extent + 1))
        cy = rng.uniform(0.3 * height, 0.7 * height)
        cx = rng.uniform(0.3 * width, 0.7 * width)
        ry = rng.uniform(0.12, 0.22) * height
        rx = rng.uniform(0.12, 0.22) * width
        yy, xx = np.mgrid[0:height, 0:width]
        for z in range(z0, z0 + z_extent):
            # mild taper toward the span ends keeps every labeled slice visible
            depth = 1.0 - abs(z - (z0 + (z_extent - 1) / 2.0)) / z_extent
            sy, sx = ry * (0.9 + 0.2 * depth), rx * (0.9 + 0.2 * depth)
            mask = ((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2 <= 1.0
            if not mask.any():
                continue
            hu[z][mask] = rng.uniform(60.0, 90.0, size=int(mask.sum()))
            labels[z, LESION_SUBTYPE] = 1.0
            labels[z, 5] = 1.0
    return np.rint(hu).astype(np.int16), labels


def generate_dataset(
    root: str | Path,
    n_studies: int = 20,
    n_slices: int = 8,
    height: int = 64,
    width: int = 64,
    seed: int = 0,
) -> Path:
    """Write portable raw slices plus a labeled manifest; returns the manifest path.

    Studies alternate lesion/no-lesion so any contiguous split of two or more
    studies contains both classes.
    """
    root = Path(root)
    raw_dir = root / "raw"
    records = []
    for i in range(n_studies):
        study_id = f"synth{i:03d}"
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        hu, labels = generate_study(rng, n_slices, height, width, with_lesion=(i % 2 == 0))
        study_dir = raw_dir / study_id
        for z in range(n_slices):
            slice_id = f"{study_id}_{z:03d}"
            path = write_portable_slice(
                study_dir,
                slice_id,
                hu[z],
                study_id=study_id,
                z_position=z * SLICE_SPACING_MM,
                instance_number=z + 1,
            )
            records.append(
                SliceRecord(
                    study_id=study_id,
                    slice_id=slice_id,
                    raw_path=path.relative_to(root).as_posix(),
                    z_position=z * SLICE_SPACING_MM,
                    instance_number=z + 1,
                    labels=tuple(labels[z]),
                )
            )
    manifest_path = root / "manifest.csv"
    save_manifest(manifest_path, records)
    return manifest_path


def write_split_manifests(manifest_records: list[SliceRecord], root: str | Path, n_val: int) -> tuple[Path, Path]:
    """Study-level split: the last n_val studies (by first appearance) become validation."""
    root = Path(root)
    study_order = list(dict.fromkeys(r.study_id for r in manifest_records))
    if not 0 < n_val < len(study_order):
        raise ValueError(f"n_val must be in (0, {len(study_order)}), got {n_val}")
    val_studies = set(study_order[-n_val:])
    train_path, val_path = root / "train.csv", root / "val.csv"
    save_manifest(train_path, [r for r in manifest_records if r.study_id not in val_studies])
    save_manifest(val_path, [r for r in manifest_records if r.study_id in val_studies])
    return train_path, val_path
