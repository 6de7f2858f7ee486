import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radseg.detector import log_transform
from radseg.errors import ContractViolation
from radseg.region_growing import (
    GrowConfig,
    Seed,
    grow,
    label_points,
    roi_recall,
    seed_cells,
    seeds_from_labels,
    to_point_cloud,
)


def naive_flood_fill(cube, seed, d_thresh, threshold):
    """Reference region grower: per-cell BFS distances by exhaustive search."""
    from collections import deque

    shape = cube.shape
    dist = {seed: 0}
    q = deque([seed])
    while q:
        cell = q.popleft()
        if dist[cell] >= d_thresh:
            continue
        r, a, d = cell
        for nb in (
            (r + 1, a, d), (r - 1, a, d), (r, a + 1, d),
            (r, a - 1, d), (r, a, d + 1), (r, a, d - 1),
        ):
            if nb in dist:
                continue
            if not all(0 <= nb[i] < shape[i] for i in range(3)):
                continue
            if cube[nb] < threshold:
                continue
            dist[nb] = dist[cell] + 1
            q.append(nb)
    return dist


def test_config_contracts():
    with pytest.raises(ContractViolation):
        GrowConfig(d_thresh=-1)
    with pytest.raises(ContractViolation):
        GrowConfig(intensity_fraction=0.0)
    with pytest.raises(ContractViolation):
        GrowConfig(intensity_fraction=1.5)
    cfg = GrowConfig(absolute_threshold=2.0, intensity_fraction=99.0)
    assert cfg.threshold_for(100.0) == 2.0


def test_zero_budget_returns_seed_only():
    cube = np.ones((4, 4, 4))
    out = grow(cube, [Seed((1, 1, 1))], GrowConfig(d_thresh=0))
    assert out.cell_set() == {(1, 1, 1)}
    assert out.distance.tolist() == [0]


def test_uniform_cube_seven_cell_cross():
    """D_thresh=1 on a uniform cube grows the 6-neighborhood plus the seed."""
    cube = np.ones((5, 5, 5))
    out = grow(cube, [Seed((2, 2, 2))], GrowConfig(d_thresh=1))
    assert len(out) == 7
    assert out.cell_set() == {
        (2, 2, 2), (1, 2, 2), (3, 2, 2), (2, 1, 2), (2, 3, 2), (2, 2, 1), (2, 2, 3)
    }


def test_seed_below_threshold_still_included():
    cube = np.zeros((3, 3, 3))
    cube[1, 1, 1] = -5.0  # absolute threshold above the seed's own intensity
    out = grow(cube, [Seed((1, 1, 1))], GrowConfig(absolute_threshold=1.0))
    assert out.cell_set() == {(1, 1, 1)}


@pytest.mark.parametrize("trial", range(200))
def test_grow_matches_naive_flood_fill(trial):
    rng = np.random.default_rng(trial)
    shape = tuple(rng.integers(3, 8, size=3))
    cube = rng.uniform(0.0, 10.0, size=shape)
    seed = tuple(int(rng.integers(0, s)) for s in shape)
    d_thresh = int(rng.integers(0, 5))
    cfg = GrowConfig(d_thresh=d_thresh, intensity_fraction=float(rng.uniform(0.2, 1.0)))
    out = grow(cube, [Seed(seed)], cfg)
    want = naive_flood_fill(cube, seed, d_thresh, cfg.threshold_for(cube[seed]))
    assert out.cell_set() == set(want)
    got_dist = {tuple(c): int(d) for c, d in zip(out.coords.tolist(), out.distance)}
    assert got_dist == want


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_in_budget_and_threshold(seed_val):
    rng = np.random.default_rng(seed_val)
    cube = rng.uniform(0.0, 10.0, size=(6, 6, 6))
    seed = Seed(tuple(int(rng.integers(0, 6)) for _ in range(3)))
    prev = set()
    for dt in range(0, 6):
        cur = grow(cube, [seed], GrowConfig(d_thresh=dt)).cell_set()
        assert prev <= cur
        prev = cur
    prev = None
    for frac in (1.0, 0.8, 0.6, 0.4, 0.2):
        cur = grow(cube, [seed], GrowConfig(d_thresh=3, intensity_fraction=frac)).cell_set()
        if prev is not None:
            assert prev <= cur
        prev = cur


def test_multi_seed_ownership_shorter_distance_wins():
    cube = np.ones((1, 7, 1))
    seeds = [Seed((0, 0, 0), score=0.5), Seed((0, 6, 0), score=0.9)]
    out = grow(cube, seeds, GrowConfig(d_thresh=6))
    owners = {tuple(c): int(s) for c, s in zip(out.coords.tolist(), out.seed_index)}
    assert owners[(0, 1, 0)] == 0 and owners[(0, 5, 0)] == 1
    # the middle cell is equidistant: the higher-scoring seed takes it
    assert owners[(0, 3, 0)] == 1


def test_visited_counts_distinct_probes():
    cube = np.ones((3, 3, 3))
    out = grow(cube, [Seed((1, 1, 1))], GrowConfig(d_thresh=1))
    # all cells adjacent to the grown cross were probed at least once
    assert out.visited_count >= len(out)


def test_seed_cells_snap_and_clip(small_geometry):
    from radseg.detector import Detection
    from radseg.geometry import bin_to_cartesian

    x, y = bin_to_cartesian(10, 20, small_geometry)
    dets = [
        Detection(x=x, y=y, score=0.9, doppler=7.4),
        Detection(x=0.0, y=1e6, score=0.5, doppler=-3.0),  # far outside: clipped
    ]
    seeds = seed_cells(dets, small_geometry)
    assert seeds[0].cell == (10, 20, 7)
    r, a, d = seeds[1].cell
    assert r == small_geometry.range_bins - 1 and d == 0


def test_point_features_and_labels(small_geometry, small_frame):
    cube, labels = small_frame
    lc = log_transform(cube)
    pts = grow(lc, seeds_from_labels(labels, small_geometry), GrowConfig())
    to_point_cloud(pts, small_geometry, float(lc.max()))
    label_points(pts, labels)
    assert pts.features.shape == (len(pts), 4)
    assert np.abs(pts.features[:, :3]).max() <= 1.0
    assert pts.features[:, 3].max() <= 1.0
    grown = pts.cell_set()
    for obj in labels.objects:
        want = len(set(obj.cells) & grown)
        assert int((pts.labels == obj.class_id).sum()) == want


def test_roi_recall_bounds(small_geometry, small_frame):
    cube, labels = small_frame
    lc = log_transform(cube)
    pts = grow(lc, seeds_from_labels(labels, small_geometry), GrowConfig())
    rec = roi_recall(pts, labels)
    assert 0.0 < rec <= 1.0
    from radseg.simulate import FrameLabels

    assert roi_recall(pts, FrameLabels(objects=[])) == 1.0
