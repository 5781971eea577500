import numpy as np
import pytest
import torch
import torch.nn.functional as F

from helpers import randomize_module
from hardseg.deform_branch import (DeformBranch, DeformBranchConfig,
                                   DeformConv2d, bilinear_sample,
                                   bilinear_sample_point, deform_apply)
from hardseg.errors import ConfigError
from hardseg.oracles import (bilinear_sample_reference, conv2d_reference,
                             deform_conv_reference)
from hardseg.unet import init_parameters


def test_bilinear_point_matches_reference():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(3, 5, 6))
    tgrid = torch.from_numpy(grid)
    for _ in range(50):
        # positions inside, near the border, and outside
        y = rng.uniform(-2.0, 7.0)
        x = rng.uniform(-2.0, 8.0)
        got = bilinear_sample_point(tgrid, (y, x)).numpy()
        np.testing.assert_allclose(got, bilinear_sample_reference(grid, y, x),
                                   atol=1e-12)


def test_bilinear_integer_positions_hit_pixels_exactly():
    grid = torch.arange(12, dtype=torch.float64).reshape(1, 3, 4)
    for i in range(3):
        for j in range(4):
            v = bilinear_sample_point(grid, (float(i), float(j)))
            assert v.item() == float(i * 4 + j)


def test_bilinear_outside_is_zero():
    grid = torch.ones(2, 4, 4, dtype=torch.float64)
    assert bilinear_sample_point(grid, (-1.5, 2.0)).abs().sum().item() == 0.0
    assert bilinear_sample_point(grid, (2.0, 5.5)).abs().sum().item() == 0.0
    # half in, half out: only the inside corners contribute
    v = bilinear_sample_point(grid, (-0.5, 1.0))
    assert v[0].item() == pytest.approx(0.5)


def test_bilinear_batched_positions_shape():
    grid = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    sy = torch.rand(2, 4, 5, dtype=torch.float64) * 5
    sx = torch.rand(2, 4, 5, dtype=torch.float64) * 5
    out = bilinear_sample(grid, sy, sx)
    assert out.shape == (2, 3, 4, 5)


def test_zero_offsets_reduce_to_standard_conv():
    rng = np.random.default_rng(1)
    inp = torch.from_numpy(rng.normal(size=(2, 3, 8, 8)))
    weight = torch.from_numpy(rng.normal(size=(5, 3, 3, 3)))
    bias = torch.from_numpy(rng.normal(size=(5,)))
    offsets = torch.zeros(2, 18, 8, 8, dtype=torch.float64)
    got = deform_apply(inp, offsets, weight, bias)
    want = F.conv2d(inp, weight, bias, padding=1)
    assert torch.equal(got, want) or (got - want).abs().max() < 1e-12


def test_deform_matches_reference_with_random_offsets():
    rng = np.random.default_rng(2)
    for _ in range(5):
        inp = rng.normal(size=(2, 5, 5))
        weight = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=(3,))
        offsets = rng.normal(scale=1.3, size=(18, 5, 5))
        got = deform_apply(torch.from_numpy(inp[None]),
                           torch.from_numpy(offsets[None]),
                           torch.from_numpy(weight),
                           torch.from_numpy(bias))[0].numpy()
        want = deform_conv_reference(inp, weight, bias, offsets=offsets)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_layer_with_predicted_offsets_matches_reference():
    rng = np.random.default_rng(3)
    layer = DeformConv2d(2, 4, 3).double()
    randomize_module(layer, rng, scale=0.4)  # offsets no longer zero
    inp = rng.normal(size=(2, 6, 6))
    with torch.no_grad():
        got = layer(torch.from_numpy(inp[None]))[0].numpy()
    sd = {k: v.detach().numpy().astype(np.float64)
          for k, v in layer.state_dict().items()}
    want = deform_conv_reference(
        inp, sd["main.weight"], sd["main.bias"],
        offset_weight=sd["offset.weight"], offset_bias=sd["offset.bias"])
    np.testing.assert_allclose(got, want, atol=1e-11)


def test_offset_predictor_zero_initialized():
    layer = DeformConv2d(3, 4)
    init_parameters(layer, 99)
    assert torch.equal(layer.offset.weight,
                       torch.zeros_like(layer.offset.weight))
    assert torch.equal(layer.offset.bias, torch.zeros_like(layer.offset.bias))
    # main conv is NOT zero
    assert layer.main.weight.abs().sum() > 0


def test_offset_channel_count_guard():
    inp = torch.zeros(1, 2, 4, 4)
    weight = torch.zeros(3, 2, 3, 3)
    with pytest.raises(ConfigError, match="offset field"):
        deform_apply(inp, torch.zeros(1, 10, 4, 4), weight, None)


def test_gradcheck_small_instance():
    torch.manual_seed(0)
    inp = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    offsets = torch.randn(1, 8, 4, 4, dtype=torch.float64,
                          requires_grad=True) * 0.3
    weight = torch.randn(2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda i, o, w: deform_apply(i, o, w, None), (inp, offsets, weight),
        eps=1e-6, atol=1e-8)


def test_branch_shapes_and_resolution_independence():
    cfg = DeformBranchConfig(width=6, num_layers=2)
    branch = DeformBranch(cfg, num_categories=3)
    assert branch(torch.rand(2, 3, 8, 8)).shape == (2, 3, 8, 8)
    assert branch(torch.rand(1, 3, 16, 16)).shape == (1, 3, 16, 16)


def test_branch_config_validation():
    with pytest.raises(ConfigError):
        DeformBranchConfig(width=0)
    with pytest.raises(ConfigError, match="odd"):
        DeformBranchConfig(kernel_size=4)


def test_constant_input_invariance_under_interior_offsets():
    """On a constant map, interior samples are the same constant, so small
    offsets must not change interior outputs."""
    inp = torch.full((1, 1, 9, 9), 2.0, dtype=torch.float64)
    weight = torch.ones(1, 1, 3, 3, dtype=torch.float64)
    zero = deform_apply(inp, torch.zeros(1, 18, 9, 9, dtype=torch.float64),
                        weight, None)
    small = deform_apply(inp, torch.full((1, 18, 9, 9), 0.25,
                                         dtype=torch.float64), weight, None)
    center = (slice(None), slice(None), slice(2, -2), slice(2, -2))
    np.testing.assert_allclose(small[center].numpy(), zero[center].numpy(),
                               atol=1e-12)
