"""Shared builders for the test suite."""

import numpy as np
import torch


def random_probs(rng, c, h, w):
    """Random simplex map [C,H,W] (softmax of a normal draw), float64."""
    logits = rng.normal(size=(c, h, w))
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def random_labels(rng, c, h, w):
    return rng.integers(0, c, size=(h, w))


def randomize_module(module, rng, scale=0.5):
    """Overwrite every parameter with a random draw.

    Parity tests use this so that zero-initialized parameters (offset
    predictors, positional tables) do not mask layout bugs.
    """
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(
                rng.normal(0.0, scale, size=tuple(p.shape))
            ).to(p.dtype))


def scan_oracle_params(scan):
    """SelectiveScan parameters in the reference implementation's layout."""
    sd = {k: v.detach().numpy().astype(np.float64)
          for k, v in scan.state_dict().items()}
    return {
        "w_delta": sd["proj_delta.weight"], "b_delta": sd["proj_delta.bias"],
        "w_b": sd["proj_b.weight"], "b_b": sd["proj_b.bias"],
        "w_c": sd["proj_c.weight"], "b_c": sd["proj_c.bias"],
        "a_log": sd["a_log"], "d_skip": sd["d_skip"],
    }


def block_oracle_params(block):
    sd = {k: v.detach().numpy().astype(np.float64)
          for k, v in block.state_dict().items()}
    return {
        "ln_in_gamma": sd["norm_in.weight"], "ln_in_beta": sd["norm_in.bias"],
        "w_x": sd["proj_x.weight"], "b_x": sd["proj_x.bias"],
        "w_z": sd["proj_z.weight"], "b_z": sd["proj_z.bias"],
        "scan": scan_oracle_params(block.scan),
        "ln_out_gamma": sd["norm_out.weight"],
        "ln_out_beta": sd["norm_out.bias"],
    }


def two_pixel_masks(n):
    """All C(n*n, 2) two-pixel object masks on an n x n grid."""
    cells = [(i, j) for i in range(n) for j in range(n)]
    masks = []
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            m = np.zeros((n, n), dtype=np.uint8)
            m[cells[a]] = 1
            m[cells[b]] = 1
            masks.append(m)
    return masks
