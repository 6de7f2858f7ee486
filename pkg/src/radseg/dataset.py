"""Frame persistence and dataset manifests.

Layout under a dataset root:

    <frame_id>/cube.bin       interleaved (re, im) float64 little-endian,
                              range-major, then angle, then doppler
    <frame_id>/labels.json
    <frame_id>/geometry.json
    manifest.json             {version, geometry_sha, seeds, splits}

Frame ids carry their split as a path prefix (e.g. ``train/w0_f003``). All
writes are write-temp-then-rename so readers never observe torn frames.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import FormatError, RadsegError, ValidationError
from .geometry import RadarGeometry
from .simulate import ComplexRadCube, FrameLabels, validate_labels

MANIFEST_VERSION = 1


def _atomic_write(path, payload: bytes):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise RadsegError(f"failed writing {path}: {exc}") from exc


def save_frame(frame_id, cube, labels, root):
    frame_dir = os.path.join(root, frame_id)
    os.makedirs(frame_dir, exist_ok=True)
    geom = cube.geometry
    raw = np.empty(geom.shape + (2,), dtype="<f8")
    raw[..., 0] = cube.values.real
    raw[..., 1] = cube.values.imag
    _atomic_write(os.path.join(frame_dir, "cube.bin"), raw.tobytes())
    _atomic_write(
        os.path.join(frame_dir, "labels.json"),
        json.dumps(labels.to_dict(), sort_keys=True).encode("utf-8"),
    )
    _atomic_write(
        os.path.join(frame_dir, "geometry.json"),
        json.dumps(geom.to_dict(), sort_keys=True).encode("utf-8"),
    )


def load_frame(frame_id, root, expected_sha=None):
    frame_dir = os.path.join(root, frame_id)
    geom_path = os.path.join(frame_dir, "geometry.json")
    try:
        with open(geom_path, "r", encoding="utf-8") as fh:
            geom = RadarGeometry.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"unreadable geometry at {geom_path}: {exc}") from exc
    if expected_sha is not None and geom.fingerprint() != expected_sha:
        raise ValidationError(f"{frame_id}: geometry fingerprint mismatch")
    cube_path = os.path.join(frame_dir, "cube.bin")
    try:
        raw = np.fromfile(cube_path, dtype="<f8")
    except OSError as exc:
        raise FormatError(f"unreadable cube at {cube_path}: {exc}") from exc
    expected = 2 * int(np.prod(geom.shape))
    if raw.size != expected:
        raise FormatError(
            f"{cube_path}: payload holds {raw.size} floats, expected {expected}"
        )
    raw = raw.reshape(geom.shape + (2,))
    values = raw[..., 0] + 1j * raw[..., 1]
    labels_path = os.path.join(frame_dir, "labels.json")
    try:
        with open(labels_path, "r", encoding="utf-8") as fh:
            labels = FrameLabels.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"unreadable labels at {labels_path}: {exc}") from exc
    validate_labels(labels, geom)
    return ComplexRadCube(geom, values), labels


class DatasetManifest:
    def __init__(self, root, geometry_sha, splits, seeds=None):
        self.root = root
        self.geometry_sha = geometry_sha
        self.splits = {k: list(v) for k, v in splits.items()}
        self.seeds = dict(seeds or {})
        all_ids = [fid for ids in self.splits.values() for fid in ids]
        if len(all_ids) != len(set(all_ids)):
            raise ValidationError("frame ids must be unique across splits")

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "geometry_sha": self.geometry_sha,
            "seeds": self.seeds,
            "splits": self.splits,
        }

    def save(self):
        _atomic_write(
            os.path.join(self.root, "manifest.json"),
            json.dumps(self.to_dict(), sort_keys=True, indent=1).encode("utf-8"),
        )

    @classmethod
    def load(cls, root):
        path = os.path.join(root, "manifest.json")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable manifest at {path}: {exc}") from exc
        if d.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version {d.get('version')}")
        return cls(root, d["geometry_sha"], d["splits"], d.get("seeds"))

    def load_frame(self, frame_id):
        return load_frame(frame_id, self.root, expected_sha=self.geometry_sha)


def iterate_split(manifest, split, shuffle_seed=None):
    """Deterministic frame order: Fisher-Yates from the seed, or manifest order."""
    if split not in manifest.splits:
        raise RadsegError(
            f"unknown split {split!r}; available: {sorted(manifest.splits)}"
        )
    ids = list(manifest.splits[split])
    if shuffle_seed is None:
        return ids
    rng = np.random.default_rng(shuffle_seed)
    for i in range(len(ids) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        ids[i], ids[j] = ids[j], ids[i]
    return ids
