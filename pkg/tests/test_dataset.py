import json

import numpy as np
import pytest

from radseg.dataset import DatasetManifest, iterate_split, load_frame, save_frame
from radseg.errors import FormatError, RadsegError, ValidationError


@pytest.fixture()
def stored_frame(tmp_path, small_frame):
    cube, labels = small_frame
    save_frame("train/w0_f000", cube, labels, str(tmp_path))
    return tmp_path, cube, labels


def test_frame_round_trip(stored_frame):
    root, cube, labels = stored_frame
    cube2, labels2 = load_frame("train/w0_f000", str(root))
    assert np.array_equal(cube2.values, cube.values)
    assert labels2.to_dict() == labels.to_dict()


def test_save_is_byte_deterministic(tmp_path, small_frame):
    cube, labels = small_frame
    save_frame("a/f0", cube, labels, str(tmp_path))
    save_frame("b/f0", cube, labels, str(tmp_path))
    for name in ("cube.bin", "labels.json", "geometry.json"):
        assert (tmp_path / "a/f0" / name).read_bytes() == (
            tmp_path / "b/f0" / name
        ).read_bytes()


def test_no_tmp_files_left(stored_frame):
    root, _, _ = stored_frame
    leftovers = [p for p in (root / "train/w0_f000").iterdir() if p.name.endswith(".tmp")]
    assert not leftovers


def test_truncated_cube_detected(stored_frame):
    root, _, _ = stored_frame
    cube_path = root / "train/w0_f000/cube.bin"
    cube_path.write_bytes(cube_path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="expected"):
        load_frame("train/w0_f000", str(root))


def test_corrupt_labels_detected(stored_frame):
    root, _, _ = stored_frame
    (root / "train/w0_f000/labels.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_frame("train/w0_f000", str(root))


def test_overlapping_cells_rejected_on_load(stored_frame):
    root, _, labels = stored_frame
    d = labels.to_dict()
    d["objects"][1]["cells"] = d["objects"][0]["cells"]
    (root / "train/w0_f000/labels.json").write_text(json.dumps(d))
    with pytest.raises(ValidationError):
        load_frame("train/w0_f000", str(root))


def test_geometry_fingerprint_checked(stored_frame):
    root, _, _ = stored_frame
    with pytest.raises(ValidationError, match="fingerprint"):
        load_frame("train/w0_f000", str(root), expected_sha="0" * 64)


def test_manifest_round_trip(tmp_path, small_geometry):
    m = DatasetManifest(
        str(tmp_path),
        small_geometry.fingerprint(),
        {"train": ["train/a", "train/b"], "val": ["val/c"]},
        seeds={"base": 3},
    )
    m.save()
    m2 = DatasetManifest.load(str(tmp_path))
    assert m2.splits == m.splits
    assert m2.seeds == {"base": 3}
    assert m2.geometry_sha == m.geometry_sha


def test_manifest_duplicate_ids_rejected(tmp_path):
    with pytest.raises(ValidationError):
        DatasetManifest(str(tmp_path), "x", {"train": ["a"], "val": ["a"]})


def test_manifest_unknown_split(tmp_path):
    m = DatasetManifest(str(tmp_path), "x", {"train": ["a"]})
    with pytest.raises(RadsegError, match="train"):
        iterate_split(m, "validation")


def test_iterate_split_orderings(tmp_path):
    ids = [f"train/{i}" for i in range(20)]
    m = DatasetManifest(str(tmp_path), "x", {"train": ids})
    assert iterate_split(m, "train") == ids
    shuffled = iterate_split(m, "train", shuffle_seed=1)
    assert shuffled != ids  # astronomically unlikely to be identity
    assert sorted(shuffled) == sorted(ids)
    assert iterate_split(m, "train", shuffle_seed=1) == shuffled
    assert iterate_split(m, "train", shuffle_seed=2) != shuffled
