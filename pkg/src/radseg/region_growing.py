"""Seeded region growing over the 3-d RAD grid.

Breadth-first expansion from each seed over 6-connected neighbors, admitting a
cell when its BFS distance stays within the search budget and its log
intensity clears the seed's threshold (a fraction of the seed intensity by
default). Cells reachable from several seeds go to the seed with the shorter
graph distance, ties to the higher-scoring seed.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import bin_to_cartesian, cartesian_to_bin

_NEIGHBORS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass
class GrowConfig:
    d_thresh: int = 6
    intensity_fraction: float = 0.5  # threshold = fraction * seed intensity
    absolute_threshold: float = None  # overrides the fraction mode when set

    def __post_init__(self):
        if self.d_thresh < 0:
            raise ContractViolation("d_thresh must be >= 0")
        if self.absolute_threshold is None and not (0.0 < self.intensity_fraction <= 1.0):
            raise ContractViolation("intensity_fraction must lie in (0, 1]")

    def threshold_for(self, seed_intensity):
        if self.absolute_threshold is not None:
            return self.absolute_threshold
        return self.intensity_fraction * seed_intensity


@dataclass
class Seed:
    cell: tuple  # (r, a, d)
    score: float = 1.0


@dataclass
class SparsePointSet:
    coords: np.ndarray  # (N, 3) int64, unique
    intensity: np.ndarray  # (N,) log intensities at the cells
    seed_index: np.ndarray  # (N,) index of the owning seed
    distance: np.ndarray  # (N,) BFS distance from the owning seed
    features: np.ndarray = None  # (N, 4) normalized (x, y, d, i)
    labels: np.ndarray = None  # (N,) class ids, 0 = background
    visited_count: int = 0

    def __len__(self):
        return len(self.coords)

    def cell_set(self):
        return {tuple(c) for c in self.coords.tolist()}


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def seed_cells(detections, geometry):
    """Snap detections to their nearest RAD cells, clipped to the cube."""
    seeds = []
    for det in detections:
        rb, ab = cartesian_to_bin(det.x, det.y, geometry)
        r = min(max(_round_half_up(rb), 0), geometry.range_bins - 1)
        a = min(max(_round_half_up(ab), 0), geometry.angle_bins - 1)
        d = min(max(_round_half_up(det.doppler), 0), geometry.doppler_bins - 1)
        seeds.append(Seed(cell=(r, a, d), score=det.score))
    return seeds


def grow(log_cube, seeds, config):
    """BFS region growing; returns the merged sparse point set."""
    cube = np.asarray(log_cube, dtype=np.float64)
    rmax, amax, dmax = cube.shape
    best = {}  # cell -> (distance, -score, seed_idx)
    visited = set()
    for s_idx, seed in enumerate(seeds):
        r0, a0, d0 = seed.cell
        if not (0 <= r0 < rmax and 0 <= a0 < amax and 0 <= d0 < dmax):
            raise ContractViolation(f"seed cell {seed.cell} outside the cube")
        thresh = config.threshold_for(cube[r0, a0, d0])
        dist = {seed.cell: 0}
        queue = deque([seed.cell])
        visited.add(seed.cell)
        while queue:
            cell = queue.popleft()
            d = dist[cell]
            if d >= config.d_thresh:
                continue
            for off in _NEIGHBORS:
                nb = (cell[0] + off[0], cell[1] + off[1], cell[2] + off[2])
                if nb in dist:
                    continue
                if not (0 <= nb[0] < rmax and 0 <= nb[1] < amax and 0 <= nb[2] < dmax):
                    continue
                visited.add(nb)
                if cube[nb] < thresh:
                    continue
                dist[nb] = d + 1
                queue.append(nb)
        for cell, d in dist.items():
            key = (d, -seed.score, s_idx)
            if cell not in best or key < best[cell]:
                best[cell] = key
    cells = sorted(best)
    coords = np.array(cells, dtype=np.int64).reshape(len(cells), 3)
    return SparsePointSet(
        coords=coords,
        intensity=cube[coords[:, 0], coords[:, 1], coords[:, 2]] if len(cells) else np.zeros(0),
        seed_index=np.array([best[c][2] for c in cells], dtype=np.int64),
        distance=np.array([best[c][0] for c in cells], dtype=np.int64),
        visited_count=len(visited),
    )


def to_point_cloud(sparse_set, geometry, cube_max_intensity):
    """Populate normalized per-point features (x, y, d, i)."""
    n = len(sparse_set)
    feats = np.zeros((n, 4))
    if n:
        xs, ys = bin_to_cartesian(sparse_set.coords[:, 0], sparse_set.coords[:, 1], geometry)
        feats[:, 0] = xs / geometry.max_range
        feats[:, 1] = ys / geometry.max_range
        half = geometry.doppler_bins / 2.0
        feats[:, 2] = (sparse_set.coords[:, 2] - half) / half
        feats[:, 3] = sparse_set.intensity / max(cube_max_intensity, 1e-12)
    sparse_set.features = feats
    return sparse_set


def label_points(sparse_set, labels):
    """Per-point class from the frame annotation; background where unlabeled."""
    cell_class = {}
    for obj in labels.objects:
        for cell in obj.cells:
            cell_class[tuple(cell)] = obj.class_id
    sparse_set.labels = np.array(
        [cell_class.get(tuple(c), 0) for c in sparse_set.coords.tolist()], dtype=np.int64
    )
    return sparse_set


def roi_recall(sparse_set, labels):
    annotated = {tuple(c) for obj in labels.objects for c in obj.cells}
    if not annotated:
        return 1.0
    grown = sparse_set.cell_set()
    return len(annotated & grown) / len(annotated)


def seeds_from_labels(labels, geometry):
    """Ground-truth seeds (teacher forcing) from annotated object centers."""
    from .detector import Detection

    dets = [
        Detection(x=obj.center_xy[0], y=obj.center_xy[1], score=1.0, doppler=obj.mean_doppler)
        for obj in labels.objects
    ]
    return seed_cells(dets, geometry)
