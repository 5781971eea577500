import numpy as np
import pytest
import torch

from helpers import random_probs
from hardseg.errors import ConfigError
from hardseg.grids import ProbGrid
from hardseg.mining import (HardMask, UncertaintyMap, apply_mask_torch,
                            binarize, entropy_torch, hard_mask_torch,
                            mask_probs, uncertainty_map)
from hardseg.oracles import entropy_reference


def test_entropy_matches_reference():
    rng = np.random.default_rng(0)
    for c in (2, 3, 5, 8):
        probs = random_probs(rng, c, 7, 7)
        u = uncertainty_map(ProbGrid(probs))
        np.testing.assert_allclose(u.values, entropy_reference(probs),
                                   atol=1e-12)


def test_entropy_endpoints():
    # uniform over a power-of-two category count -> exactly 1
    u = uncertainty_map(ProbGrid(np.full((4, 3, 3), 0.25)))
    np.testing.assert_array_equal(u.values, np.ones((3, 3)))
    one_hot = np.zeros((4, 2, 2))
    one_hot[2] = 1.0
    u = uncertainty_map(ProbGrid(one_hot))
    np.testing.assert_array_equal(u.values, np.zeros((2, 2)))


def test_uncertainty_map_validates_range():
    with pytest.raises(ConfigError):
        UncertaintyMap(np.array([[1.5]]))
    with pytest.raises(ConfigError):
        UncertaintyMap(np.array([[-0.1]]))


def test_binarize_is_strict():
    u = UncertaintyMap(np.array([[0.1, 0.5], [0.5001, 0.9]]))
    hard = binarize(u, 0.5)
    np.testing.assert_array_equal(hard.mask, [[0, 0], [1, 1]])
    assert hard.threshold_used == 0.5
    assert hard.count == 2
    assert binarize(u, 1.0).count == 0  # u <= 1 everywhere, strict >


def test_mask_probs_zeroes_holes_and_counts_them():
    rng = np.random.default_rng(1)
    probs = random_probs(rng, 3, 4, 4)
    u = uncertainty_map(ProbGrid(probs))
    hard = binarize(u, float(np.median(u.values)))
    masked, holes = mask_probs(ProbGrid(probs), hard)
    assert holes == 16 - hard.count
    keep = hard.mask.astype(bool)
    np.testing.assert_array_equal(masked[:, keep], probs[:, keep])
    np.testing.assert_array_equal(masked[:, ~keep], 0.0)


def test_hard_mask_shape_mismatch():
    u = UncertaintyMap(np.zeros((3, 3)))
    hard = binarize(u, 0.5)
    with pytest.raises(ConfigError):
        mask_probs(ProbGrid(np.full((2, 4, 4), 0.5)), hard)


def test_monotone_in_threshold():
    rng = np.random.default_rng(2)
    u = uncertainty_map(ProbGrid(random_probs(rng, 5, 16, 16)))
    counts = [binarize(u, t).count
              for t in (0.1, 0.05, 0.01, 0.001, 0.0001)]
    assert counts == sorted(counts)  # thresholds descend, counts ascend


def test_torch_path_matches_numpy_path():
    rng = np.random.default_rng(3)
    probs = random_probs(rng, 4, 6, 6)
    u_np = uncertainty_map(ProbGrid(probs))
    u_t = entropy_torch(torch.from_numpy(probs[None]))
    np.testing.assert_allclose(u_t.numpy()[0], u_np.values, atol=1e-12)

    hard_t = hard_mask_torch(u_t, 0.9)
    hard_np = binarize(u_np, 0.9)
    np.testing.assert_array_equal(hard_t.numpy()[0].astype(np.uint8),
                                  hard_np.mask)

    masked_t = apply_mask_torch(torch.from_numpy(probs[None]), hard_t)
    masked_np, _ = mask_probs(ProbGrid(probs), hard_np)
    np.testing.assert_allclose(masked_t.numpy()[0], masked_np, atol=0)


def test_hard_mask_detached_from_graph():
    logits = torch.randn(1, 3, 4, 4, requires_grad=True)
    u = entropy_torch(torch.softmax(logits, dim=1))
    hard = hard_mask_torch(u, 0.5)
    assert not hard.requires_grad
    masked = apply_mask_torch(torch.softmax(logits, dim=1), hard)
    masked.sum().backward()  # gradient flows through probs, not the mask
    assert logits.grad is not None
