import numpy as np
import pytest

from radseg.pipeline import pool_region_classes
from radseg.region_growing import SparsePointSet


def make_points(coords, seed_index):
    coords = np.asarray(coords, dtype=np.int64)
    n = len(coords)
    return SparsePointSet(
        coords=coords,
        intensity=np.ones(n),
        seed_index=np.asarray(seed_index, dtype=np.int64),
        distance=np.zeros(n, dtype=np.int64),
    )


def logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_pool_empty_is_identity():
    pts = make_points(np.zeros((0, 3)), [])
    logits = np.zeros((0, 5))
    assert pool_region_classes(pts, logits) is logits


def test_pool_mixed_region_takes_summed_majority():
    pts = make_points([[0, 0, 0], [0, 0, 1], [0, 0, 2]], [0, 0, 0])
    logits = logits_for([
        [0.01, 0.01, 0.96, 0.01, 0.01],
        [0.01, 0.01, 0.01, 0.96, 0.01],
        [0.01, 0.01, 0.01, 0.96, 0.01],
    ])
    pooled = softmax(pool_region_classes(pts, logits))
    assert list(pooled.argmax(axis=1)) == [3, 3, 3]


def test_pool_keeps_background_cells_background():
    pts = make_points([[0, 0, 0], [0, 0, 1]], [0, 0])
    logits = logits_for([
        [0.96, 0.01, 0.01, 0.01, 0.01],  # background stays background
        [0.01, 0.01, 0.96, 0.01, 0.01],
    ])
    pooled = softmax(pool_region_classes(pts, logits))
    assert pooled.argmax(axis=1)[0] == 0
    assert pooled.argmax(axis=1)[1] == 2


def test_pool_regions_are_independent():
    pts = make_points([[0, 0, 0], [5, 5, 5]], [0, 1])
    logits = logits_for([
        [0.01, 0.96, 0.01, 0.01, 0.01],
        [0.01, 0.01, 0.01, 0.01, 0.96],
    ])
    pooled = softmax(pool_region_classes(pts, logits))
    assert list(pooled.argmax(axis=1)) == [1, 4]


def test_pool_all_background_region_untouched():
    pts = make_points([[0, 0, 0], [0, 0, 1]], [0, 0])
    logits = logits_for([
        [0.96, 0.01, 0.01, 0.01, 0.01],
        [0.90, 0.04, 0.02, 0.02, 0.02],
    ])
    pooled = pool_region_classes(pts, logits)
    np.testing.assert_allclose(pooled, logits)


def test_pool_tie_breaks_toward_lower_class_id():
    pts = make_points([[0, 0, 0], [0, 0, 1]], [0, 0])
    logits = logits_for([
        [0.01, 0.01, 0.01, 0.96, 0.01],
        [0.01, 0.01, 0.96, 0.01, 0.01],
    ])
    pooled = softmax(pool_region_classes(pts, logits))
    assert list(pooled.argmax(axis=1)) == [2, 2]


def test_pool_weighs_probability_mass_not_votes():
    # one very confident cell outweighs two lukewarm ones
    pts = make_points([[0, 0, 0], [0, 0, 1], [0, 0, 2]], [0, 0, 0])
    logits = logits_for([
        [0.004, 0.004, 0.984, 0.004, 0.004],
        [0.30, 0.05, 0.05, 0.35, 0.25],
        [0.30, 0.05, 0.05, 0.35, 0.25],
    ])
    pooled = softmax(pool_region_classes(pts, logits))
    assert list(pooled.argmax(axis=1)) == [2, 2, 2]
