import json
from dataclasses import replace

import numpy as np
import pytest

from ichseq.errors import DataError
from ichseq.ingest import (
    IDENTITY_RESCALE,
    MANIFEST_FIELDS,
    RescaleParams,
    SliceRecord,
    assemble_study,
    build_manifest,
    group_by_study,
    load_label_csv,
    load_manifest,
    read_portable_sidecar,
    read_raw_slice,
    resolve_raw_paths,
    save_exclusions,
    save_manifest,
    sort_records,
    write_portable_slice,
)
from ichseq.metrics import CLASS_NAMES


def make_slice(directory, slice_id, study_id="study_a", z=0.0, instance=1, value=40, shape=(4, 5)):
    hu = np.full(shape, value, dtype=np.int16)
    path = write_portable_slice(directory, slice_id, hu, study_id, z, instance)
    return path, hu


def test_portable_round_trip(tmp_path):
    hu = np.arange(-6, 6, dtype=np.int16).reshape(3, 4)
    path = write_portable_slice(tmp_path, "sl_000", hu, "study_a", 2.5, 3)
    assert path.name == "sl_000.hu16"
    back, rescale = read_raw_slice(path)
    assert np.array_equal(back, hu)
    assert back.dtype == np.int16
    assert rescale == IDENTITY_RESCALE
    meta = read_portable_sidecar(path)
    assert meta["study_id"] == "study_a"
    assert meta["z_position"] == 2.5
    assert meta["instance_number"] == 3
    assert meta["shape"] == [3, 4]


def test_read_raw_slice_validates_size_and_sidecar(tmp_path):
    path, _ = make_slice(tmp_path, "sl_trunc")
    path.write_bytes(path.read_bytes()[:-2])  # drop one int16
    with pytest.raises(DataError):
        read_raw_slice(path)
    orphan = tmp_path / "orphan.hu16"
    orphan.write_bytes(b"\x00\x00")
    with pytest.raises(DataError):
        read_raw_slice(orphan)
    with pytest.raises(DataError):
        read_raw_slice(tmp_path / "weird.xyz")


def test_to_hounsfield_affine_and_dtype():
    from ichseq.ingest import to_hounsfield

    raw = np.array([[100, -24]], dtype=np.int16)
    hu = to_hounsfield(raw, RescaleParams(1.5, -1000.0))
    assert hu.dtype == np.float64
    assert hu.tolist() == [[-850.0, -1036.0]]
    with pytest.raises(DataError):
        to_hounsfield(raw.astype(np.float32), IDENTITY_RESCALE)


def test_sort_records_orders_by_z_then_instance():
    recs = [
        SliceRecord("s", "c", "c.hu16", z_position=5.0, instance_number=1),
        SliceRecord("s", "a", "a.hu16", z_position=-5.0, instance_number=9),
        SliceRecord("s", "b", "b.hu16", z_position=5.0, instance_number=0),
    ]
    assert [r.slice_id for r in sort_records(recs)] == ["a", "b", "c"]


def test_sort_records_falls_back_to_instance_when_z_missing():
    recs = [
        SliceRecord("s", "late", "x.hu16", z_position=None, instance_number=7),
        SliceRecord("s", "early", "y.hu16", z_position=100.0, instance_number=2),
    ]
    assert [r.slice_id for r in sort_records(recs)] == ["early", "late"]


def test_slice_record_label_validation():
    with pytest.raises(DataError):
        SliceRecord("s", "x", "x.hu16", 0.0, 1, labels=(0, 1, 2, 0, 0, 1))
    with pytest.raises(DataError):
        SliceRecord("s", "x", "x.hu16", 0.0, 1, labels=(0, 1))
    rec = SliceRecord("s", "x", "x.hu16", 0.0, 1, labels=(0.0, 1.0, 0.0, 0.0, 0.0, 1.0))
    assert rec.labels == (0, 1, 0, 0, 0, 1)
    assert all(isinstance(v, int) for v in rec.labels)


def test_assemble_study_orders_and_stacks(tmp_path):
    paths = {}
    for slice_id, z, value in [("mid", 5.0, 20), ("top", 10.0, 30), ("bot", 0.0, 10)]:
        paths[slice_id], _ = make_slice(tmp_path, slice_id, z=z, value=value)
    recs = [
        SliceRecord("study_a", sid, str(paths[sid]), z_position=z, instance_number=i)
        for i, (sid, z) in enumerate([("top", 10.0), ("bot", 0.0), ("mid", 5.0)])
    ]
    vol = assemble_study(recs)
    assert vol.study_id == "study_a"
    assert vol.slices.shape == (3, 4, 5)
    assert vol.slices.dtype == np.int16
    assert [int(s[0, 0]) for s in vol.slices] == [10, 20, 30]
    assert vol.z_positions == [0.0, 5.0, 10.0]


def test_assemble_study_rescale_override(tmp_path):
    path, _ = make_slice(tmp_path, "sl", value=100)
    rec = SliceRecord("study_a", "sl", str(path), z_position=0.0, instance_number=1)
    vol = assemble_study([rec], rescale=RescaleParams(2.0, -50.0))
    assert int(vol.slices[0, 0, 0]) == 150


def test_assemble_study_rejects_bad_input(tmp_path):
    p1, _ = make_slice(tmp_path, "a", shape=(4, 5))
    p2, _ = make_slice(tmp_path, "b", shape=(5, 4))
    recs = [
        SliceRecord("study_a", "a", str(p1), z_position=0.0, instance_number=1),
        SliceRecord("study_a", "b", str(p2), z_position=1.0, instance_number=2),
    ]
    with pytest.raises(DataError):
        assemble_study(recs)
    with pytest.raises(DataError):
        assemble_study([])
    mixed = [
        SliceRecord("study_a", "a", str(p1), z_position=0.0, instance_number=1),
        SliceRecord("study_b", "b", str(p2), z_position=1.0, instance_number=2),
    ]
    with pytest.raises(DataError):
        assemble_study(mixed)


def _build_tree(root, n_studies=3, n_slices=4):
    for s in range(n_studies):
        study = f"study_{s:02d}"
        for z in range(n_slices):
            make_slice(root / study, f"{study}_sl{z}", study_id=study, z=float(z), instance=z + 1)


def test_build_manifest_discovers_deterministically(tmp_path):
    _build_tree(tmp_path)
    records, exclusions = build_manifest(tmp_path)
    assert exclusions == []
    assert len(records) == 12
    assert [r.study_id for r in records] == sorted(r.study_id for r in records)
    # stable across reruns
    again, _ = build_manifest(tmp_path)
    assert records == again
    # raw paths are relative to the root
    assert all(not str(r.raw_path).startswith("/") for r in records)


def test_build_manifest_reports_corrupt_slices(tmp_path):
    _build_tree(tmp_path, n_studies=1, n_slices=3)
    bad = tmp_path / "study_00" / "study_00_sl1.hu16"
    bad.write_bytes(bad.read_bytes()[:-4])  # truncate
    (tmp_path / "study_00" / "study_00_sl2.json").write_text("{not json")
    records, exclusions = build_manifest(tmp_path)
    assert len(records) == 1
    kinds = {(e["kind"], e["item"].rsplit("/", 1)[-1]) for e in exclusions}
    assert ("slice", "study_00_sl1.hu16") in kinds
    assert ("slice", "study_00_sl2.hu16") in kinds
    assert all(e["reason"] for e in exclusions)


def test_build_manifest_exclude_studies(tmp_path):
    _build_tree(tmp_path, n_studies=2, n_slices=2)
    records, exclusions = build_manifest(tmp_path, exclude_studies={"study_00"})
    assert {r.study_id for r in records} == {"study_01"}
    assert {"kind": "study", "item": "study_00", "reason": "in exclusion list"} in exclusions


def test_build_manifest_attaches_labels(tmp_path):
    _build_tree(tmp_path, n_studies=1, n_slices=2)
    labels_csv = tmp_path / "labels.csv"
    rows = ["slice_id," + ",".join(CLASS_NAMES)]
    rows.append("study_00_sl0,0,1,0,0,0,1")
    rows.append("ghost_slice,0,0,0,0,0,0")
    labels_csv.write_text("\n".join(rows) + "\n")
    records, exclusions = build_manifest(tmp_path, labels_csv=labels_csv)
    by_id = {r.slice_id: r for r in records}
    assert by_id["study_00_sl0"].labels == (0, 1, 0, 0, 0, 1)
    assert by_id["study_00_sl1"].labels is None
    assert {"kind": "label", "item": "ghost_slice", "reason": "unknown slice"} in exclusions


def test_load_label_csv_validation(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("slice_id,epidural\nx,1\n")
    with pytest.raises(DataError):
        load_label_csv(path)
    with pytest.raises(DataError):
        load_label_csv(tmp_path / "nope.csv")


def test_manifest_round_trip_is_byte_exact(tmp_path):
    _build_tree(tmp_path, n_studies=2, n_slices=3)
    records, _ = build_manifest(tmp_path)
    records = [
        r if i % 2 == 0 else replace(r, labels=(0, 0, 0, 0, 0, 0))
        for i, r in enumerate(records)
    ]
    m1 = tmp_path / "m1.csv"
    m2 = tmp_path / "m2.csv"
    save_manifest(m1, records)
    loaded = load_manifest(m1)
    assert loaded == records
    save_manifest(m2, loaded)
    assert m1.read_bytes() == m2.read_bytes()
    header = m1.read_text().splitlines()[0]
    assert header == ",".join(MANIFEST_FIELDS)


def test_manifest_missing_z_round_trips_as_empty_cell(tmp_path):
    rec = SliceRecord("s", "x", "x.hu16", z_position=None, instance_number=4)
    path = tmp_path / "m.csv"
    save_manifest(path, [rec])
    row = path.read_text().splitlines()[1]
    assert row.split(",")[3] == ""
    assert load_manifest(path)[0].z_position is None


def test_load_manifest_rejects_bad_files(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("study_id,slice_id\n")
    with pytest.raises(DataError):
        load_manifest(path)
    save_manifest(path, [SliceRecord("s", "x", "x.hu16", 0.0, 1, labels=(0,) * 6)])
    text = path.read_text().replace("x.hu16,0.0,1,0,0", "x.hu16,0.0,1,,0")
    path.write_text(text)
    with pytest.raises(DataError):
        load_manifest(path)
    with pytest.raises(DataError):
        load_manifest(tmp_path / "missing.csv")


def test_resolve_raw_paths(tmp_path):
    recs = [
        SliceRecord("s", "rel", "raw/rel.hu16", 0.0, 1),
        SliceRecord("s", "abs", "/elsewhere/abs.hu16", 1.0, 2),
    ]
    out = resolve_raw_paths(recs, tmp_path / "manifest.csv")
    assert out[0].raw_path == str(tmp_path / "raw/rel.hu16")
    assert out[1].raw_path == "/elsewhere/abs.hu16"


def test_save_exclusions(tmp_path):
    path = tmp_path / "excl.csv"
    save_exclusions(path, [{"kind": "slice", "item": "a.hu16", "reason": "truncated"}])
    lines = path.read_text().splitlines()
    assert lines[0] == "kind,item,reason"
    assert lines[1] == "slice,a.hu16,truncated"


def test_group_by_study_sorts_groups_and_slices():
    recs = [
        SliceRecord("b_study", "b2", "b2.hu16", 2.0, 2),
        SliceRecord("a_study", "a1", "a1.hu16", 0.0, 1),
        SliceRecord("b_study", "b1", "b1.hu16", 1.0, 1),
    ]
    groups = group_by_study(recs)
    assert list(groups) == ["a_study", "b_study"]
    assert [r.slice_id for r in groups["b_study"]] == ["b1", "b2"]


def test_sidecar_missing_fields_rejected(tmp_path):
    path, _ = make_slice(tmp_path, "sl")
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    del meta["shape"]
    sidecar.write_text(json.dumps(meta))
    with pytest.raises(DataError):
        read_portable_sidecar(path)
