"""Brute-force reference implementations used by the test suite.

Everything here is written as literal loops over scalars in double precision,
independently of the optimized torch paths, so that each numeric kernel can be
verified against a second implementation that shares no code with it.  These
functions are shipped (not hidden in tests/) so users can audit the parity
claims themselves.  Performance is explicitly a non-goal.
"""

from __future__ import annotations

import math

import numpy as np

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# uncertainty mining


def entropy_reference(probs: np.ndarray) -> np.ndarray:
    """Per-pixel normalized entropy of a [C,H,W] probability map.

    U(h,w) = -sum_c p * ln(p) / ln(C), with 0*ln(0) = 0, clamped into [0,1]
    (the upper bound can be crossed by one ulp for non-power-of-two C).
    """
    p = np.asarray(probs, dtype=np.float64)
    c, h, w = p.shape
    if c < 2:
        raise ValueError("entropy needs at least 2 categories")
    out = np.zeros((h, w), dtype=np.float64)
    log_c = math.log(c)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k in range(c):
                v = p[k, i, j]
                if v > 0.0:
                    acc -= v * math.log(v)
            u = acc / log_c
            out[i, j] = min(1.0, max(0.0, u))
    return out


# ---------------------------------------------------------------------------
# selective scan


def _softplus(v: float) -> float:
    # log(1 + e^v), stable for large |v|
    if v > 30.0:
        return v
    return math.log1p(math.exp(v))


def _silu(v: float) -> float:
    return v / (1.0 + math.exp(-v))


def scan_reference(x: np.ndarray, params: dict, direction: str) -> np.ndarray:
    """Literal per-step selective-scan recurrence.

    x: [L,E].  params: w_delta [E,E], b_delta [E], w_b [N,E], b_b [N],
    w_c [N,E], b_c [N], a_log [E,N], d_skip [E].  Per token t:

        delta_t[e] = softplus((w_delta @ x_t + b_delta)[e])
        B_t = w_b @ x_t + b_b ;  C_t = w_c @ x_t + b_c
        h_t[e,n] = exp(delta_t[e] * -exp(a_log[e,n])) * h_{t-1}[e,n]
                   + delta_t[e] * B_t[n] * x_t[e]          (h_0 = 0)
        y_t[e] = sum_n C_t[n] * h_t[e,n] + d_skip[e] * x_t[e]

    direction="backward" runs the same recurrence on the reversed sequence
    and reverses the output.
    """
    x = np.asarray(x, dtype=np.float64)
    if direction == "backward":
        return scan_reference(x[::-1], params, "forward")[::-1]
    if direction != "forward":
        raise ValueError(f"unknown direction {direction!r}")
    length, e_dim = x.shape
    w_delta = np.asarray(params["w_delta"], dtype=np.float64)
    b_delta = np.asarray(params["b_delta"], dtype=np.float64)
    w_b = np.asarray(params["w_b"], dtype=np.float64)
    b_b = np.asarray(params["b_b"], dtype=np.float64)
    w_c = np.asarray(params["w_c"], dtype=np.float64)
    b_c = np.asarray(params["b_c"], dtype=np.float64)
    a_log = np.asarray(params["a_log"], dtype=np.float64)
    d_skip = np.asarray(params["d_skip"], dtype=np.float64)
    n_dim = a_log.shape[1]

    h = np.zeros((e_dim, n_dim), dtype=np.float64)
    y = np.zeros((length, e_dim), dtype=np.float64)
    for t in range(length):
        delta = np.empty(e_dim)
        for e in range(e_dim):
            acc = b_delta[e]
            for k in range(e_dim):
                acc += w_delta[e, k] * x[t, k]
            delta[e] = _softplus(acc)
        b_t = np.empty(n_dim)
        c_t = np.empty(n_dim)
        for n in range(n_dim):
            acc_b = b_b[n]
            acc_c = b_c[n]
            for k in range(e_dim):
                acc_b += w_b[n, k] * x[t, k]
                acc_c += w_c[n, k] * x[t, k]
            b_t[n] = acc_b
            c_t[n] = acc_c
        for e in range(e_dim):
            for n in range(n_dim):
                a_bar = math.exp(delta[e] * -math.exp(a_log[e, n]))
                h[e, n] = a_bar * h[e, n] + delta[e] * b_t[n] * x[t, e]
            acc = d_skip[e] * x[t, e]
            for n in range(n_dim):
                acc += c_t[n] * h[e, n]
            y[t, e] = acc
    return y


def layer_norm_reference(v: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         eps: float = LN_EPS) -> np.ndarray:
    """Per-row layer norm of [L,E] over the E axis (biased variance)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    for t in range(v.shape[0]):
        mean = 0.0
        for e in range(v.shape[1]):
            mean += v[t, e]
        mean /= v.shape[1]
        var = 0.0
        for e in range(v.shape[1]):
            var += (v[t, e] - mean) ** 2
        var /= v.shape[1]
        denom = math.sqrt(var + eps)
        for e in range(v.shape[1]):
            out[t, e] = (v[t, e] - mean) / denom * gamma[e] + beta[e]
    return out


def vim_block_reference(s: np.ndarray, params: dict) -> np.ndarray:
    """One bidirectional gated sequence block, applied literally.

    s_norm = LN_in(s); x = s_norm @ w_x.T + b_x; z = s_norm @ w_z.T + b_z;
    y_f/y_b = forward/backward scans of x (shared scan params);
    out = s + LN_out(silu(z) * y_f + silu(z) * y_b).
    """
    s = np.asarray(s, dtype=np.float64)
    length, e_dim = s.shape
    s_norm = layer_norm_reference(s, params["ln_in_gamma"], params["ln_in_beta"])
    w_x = np.asarray(params["w_x"], dtype=np.float64)
    b_x = np.asarray(params["b_x"], dtype=np.float64)
    w_z = np.asarray(params["w_z"], dtype=np.float64)
    b_z = np.asarray(params["b_z"], dtype=np.float64)
    x = np.empty_like(s_norm)
    z = np.empty_like(s_norm)
    for t in range(length):
        for e in range(e_dim):
            ax = b_x[e]
            az = b_z[e]
            for k in range(e_dim):
                ax += w_x[e, k] * s_norm[t, k]
                az += w_z[e, k] * s_norm[t, k]
            x[t, e] = ax
            z[t, e] = az
    y_f = scan_reference(x, params["scan"], "forward")
    y_b = scan_reference(x, params["scan"], "backward")
    gated = np.empty_like(s)
    for t in range(length):
        for e in range(e_dim):
            g = _silu(z[t, e])
            gated[t, e] = g * y_f[t, e] + g * y_b[t, e]
    fused = layer_norm_reference(gated, params["ln_out_gamma"], params["ln_out_beta"])
    return s + fused


# ---------------------------------------------------------------------------
# convolutions


def conv2d_reference(inp: np.ndarray, weight: np.ndarray,
                     bias: np.ndarray | None = None) -> np.ndarray:
    """Plain same-size 2D convolution (cross-correlation), zero padding k//2.

    inp [K,H,W], weight [K',K,k,k], bias [K'] -> [K',H,W].
    """
    inp = np.asarray(inp, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    k_out, k_in, kh, kw = weight.shape
    _, h, w = inp.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((k_out, h, w), dtype=np.float64)
    for co in range(k_out):
        b = float(bias[co]) if bias is not None else 0.0
        for i in range(h):
            for j in range(w):
                acc = b
                for ci in range(k_in):
                    for di in range(kh):
                        for dj in range(kw):
                            ii = i + di - ph
                            jj = j + dj - pw
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += weight[co, ci, di, dj] * inp[ci, ii, jj]
                out[co, i, j] = acc
    return out


def bilinear_sample_reference(grid: np.ndarray, y: float, x: float) -> np.ndarray:
    """4-corner bilinear interpolation of [K,H,W] at real point (y, x).

    Corners outside [0,H-1]x[0,W-1] read zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    k, h, w = grid.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    wy1 = y - y0
    wx1 = x - x0
    out = np.zeros(k, dtype=np.float64)
    for (yy, wy) in ((y0, 1.0 - wy1), (y0 + 1, wy1)):
        for (xx, wx) in ((x0, 1.0 - wx1), (x0 + 1, wx1)):
            coeff = wy * wx
            if coeff == 0.0 or not (0 <= yy < h and 0 <= xx < w):
                continue
            for c in range(k):
                out[c] += coeff * grid[c, yy, xx]
    return out


def deform_conv_reference(inp: np.ndarray, weight: np.ndarray,
                          bias: np.ndarray | None,
                          offsets: np.ndarray | None = None,
                          offset_weight: np.ndarray | None = None,
                          offset_bias: np.ndarray | None = None) -> np.ndarray:
    """Explicit-loop deformable convolution.

    Either pass a precomputed offsets field [2*k*k, H, W] or the offset
    predictor's conv weights, in which case offsets are computed here with
    conv2d_reference.  Tap order is row-major over the k x k window; per tap
    the two offset channels are (dy, dx).

    output(co, p0) = bias + sum_{ci, tap n} w[co,ci,n] *
                     bilinear(inp[ci], p0 + p_n + offset_n(p0))
    """
    inp = np.asarray(inp, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    k_out, k_in, kh, kw = weight.shape
    _, h, w = inp.shape
    if offsets is None:
        offsets = conv2d_reference(inp, offset_weight, offset_bias)
    offsets = np.asarray(offsets, dtype=np.float64)
    ph, pw = kh // 2, kw // 2
    out = np.zeros((k_out, h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            # gather the k*k deformed samples once per location
            samples = np.zeros((k_in, kh * kw), dtype=np.float64)
            for di in range(kh):
                for dj in range(kw):
                    tap = di * kw + dj
                    dy = offsets[2 * tap, i, j]
                    dx = offsets[2 * tap + 1, i, j]
                    sy = i + di - ph + dy
                    sx = j + dj - pw + dx
                    samples[:, tap] = bilinear_sample_reference(inp, sy, sx)
            for co in range(k_out):
                acc = float(bias[co]) if bias is not None else 0.0
                for ci in range(k_in):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += weight[co, ci, di, dj] * samples[ci, di * kw + dj]
                out[co, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# distillation


def pixel_ce_reference(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-pixel cross entropy -log(P[label]) with probability floor 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    lab = np.asarray(labels)
    _, h, w = p.shape
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out[i, j] = -math.log(max(p[lab[i, j], i, j], PROB_FLOOR))
    return out


def kl_map_reference(p_m: np.ndarray, p_d: np.ndarray) -> np.ndarray:
    """Per-pixel KL(P_M || P_D) with both probabilities floored at 1e-12."""
    p_m = np.asarray(p_m, dtype=np.float64)
    p_d = np.asarray(p_d, dtype=np.float64)
    c, h, w = p_m.shape
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k in range(c):
                a = max(p_m[k, i, j], PROB_FLOOR)
                b = max(p_d[k, i, j], PROB_FLOOR)
                acc += p_m[k, i, j] * math.log(a / b)
            out[i, j] = acc
    return out


def hfd_reference(p_m: np.ndarray, p_d: np.ndarray, labels: np.ndarray,
                  hard: np.ndarray):
    """Direction matrix and the two direction-masked distillation means.

    Returns (m, l_student_m, l_student_d) where

        m(i,j) = 1 on hard pixels where ce_M < ce_D (strict; ties -> 0)
        l_student_m = mean over hard pixels with m=0 of KL(P_M || P_D)
        l_student_d = mean over pixels with m=1 of KL(P_M || P_D)

    and a zero-sized mean is 0.  (Gradient routing -- which side is detached
    -- is a property of the optimized path, not of these scalar values.)
    """
    p_m = np.asarray(p_m, dtype=np.float64)
    p_d = np.asarray(p_d, dtype=np.float64)
    hard = np.asarray(hard)
    h, w = hard.shape
    ce_m = pixel_ce_reference(p_m, labels)
    ce_d = pixel_ce_reference(p_d, labels)
    kl = kl_map_reference(p_m, p_d)
    m = np.zeros((h, w), dtype=np.int64)
    sum_keep = 0.0
    n_keep = 0
    sum_dir = 0.0
    n_dir = 0
    for i in range(h):
        for j in range(w):
            if not hard[i, j]:
                continue
            if ce_m[i, j] < ce_d[i, j]:
                m[i, j] = 1
                sum_dir += kl[i, j]
                n_dir += 1
            else:
                sum_keep += kl[i, j]
                n_keep += 1
    l_student_m = sum_keep / n_keep if n_keep else 0.0
    l_student_d = sum_dir / n_dir if n_dir else 0.0
    return m, l_student_m, l_student_d


# ---------------------------------------------------------------------------
# segmentation loss


def seg_loss_reference(probs: np.ndarray, labels: np.ndarray,
                       include: np.ndarray | None = None) -> float:
    """0.5 * masked cross-entropy + 0.5 * masked soft Dice, loop form.

    CE is the mean of -log(P[label]) over included pixels; Dice is averaged
    over foreground categories 1..C-1 with smoothing 1e-5 in numerator and
    denominator, sums restricted to included pixels.  Empty include -> 0.
    """
    p = np.asarray(probs, dtype=np.float64)
    lab = np.asarray(labels)
    c, h, w = p.shape
    if include is None:
        include = np.ones((h, w), dtype=bool)
    include = np.asarray(include).astype(bool)
    n_inc = 0
    ce = 0.0
    for i in range(h):
        for j in range(w):
            if include[i, j]:
                n_inc += 1
                ce += -math.log(max(p[lab[i, j], i, j], PROB_FLOOR))
    if n_inc == 0:
        return 0.0
    ce /= n_inc
    dice_sum = 0.0
    for k in range(1, c):
        inter = 0.0
        p_sum = 0.0
        g_sum = 0.0
        for i in range(h):
            for j in range(w):
                if not include[i, j]:
                    continue
                g = 1.0 if lab[i, j] == k else 0.0
                inter += p[k, i, j] * g
                p_sum += p[k, i, j]
                g_sum += g
        dice_sum += (2.0 * inter + DICE_SMOOTH) / (p_sum + g_sum + DICE_SMOOTH)
    dice_loss = 1.0 - dice_sum / (c - 1)
    return 0.5 * ce + 0.5 * dice_loss


# ---------------------------------------------------------------------------
# evaluation metrics


def dsc_reference(pred: np.ndarray, gt: np.ndarray, category: int):
    """Dice coefficient by pixel counting.  Returns (value, both_empty)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    n_pred = 0
    n_gt = 0
    n_both = 0
    for idx in np.ndindex(pred.shape):
        a = pred[idx] == category
        b = gt[idx] == category
        n_pred += a
        n_gt += b
        n_both += a and b
    if n_pred + n_gt == 0:
        return 1.0, True
    return 2.0 * n_both / (n_pred + n_gt), False


def boundary_pixels_reference(mask: np.ndarray) -> list:
    """In-object pixels with a 4-neighbor outside; the grid edge is outside."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if not (0 <= ii < h and 0 <= jj < w) or not mask[ii, jj]:
                    out.append((i, j))
                    break
    return out


def assd_reference(pred: np.ndarray, gt: np.ndarray, category: int,
                   spacing=(1.0, 1.0)):
    """Average symmetric surface distance via exact all-pairs distances.

    Mean of the two directed average boundary distances, with pixel steps
    scaled by (row spacing, column spacing) in mm.  Returns None when either
    boundary is empty.
    """
    sy, sx = float(spacing[0]), float(spacing[1])
    a = boundary_pixels_reference(np.asarray(pred) == category)
    b = boundary_pixels_reference(np.asarray(gt) == category)
    if not a or not b:
        return None

    def directed(src, dst):
        total = 0.0
        for (i, j) in src:
            best = math.inf
            for (k, l) in dst:
                d = math.hypot((i - k) * sy, (j - l) * sx)
                if d < best:
                    best = d
            total += best
        return total / len(src)

    return 0.5 * (directed(a, b) + directed(b, a))


# ---------------------------------------------------------------------------
# backbone building blocks (for recomposing the U-Net forward in tests)


def instance_norm_reference(inp: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                            eps: float = 1e-5) -> np.ndarray:
    """Per-channel normalization over the spatial axes (biased variance)."""
    inp = np.asarray(inp, dtype=np.float64)
    k, h, w = inp.shape
    out = np.empty_like(inp)
    for c in range(k):
        mean = 0.0
        for i in range(h):
            for j in range(w):
                mean += inp[c, i, j]
        mean /= h * w
        var = 0.0
        for i in range(h):
            for j in range(w):
                var += (inp[c, i, j] - mean) ** 2
        var /= h * w
        denom = math.sqrt(var + eps)
        for i in range(h):
            for j in range(w):
                out[c, i, j] = (inp[c, i, j] - mean) / denom * gamma[c] + beta[c]
    return out


def leaky_relu_reference(inp: np.ndarray, slope: float = 0.01) -> np.ndarray:
    inp = np.asarray(inp, dtype=np.float64)
    out = np.empty_like(inp)
    for idx in np.ndindex(inp.shape):
        v = inp[idx]
        out[idx] = v if v >= 0 else slope * v
    return out


def maxpool2x2_reference(inp: np.ndarray) -> np.ndarray:
    inp = np.asarray(inp, dtype=np.float64)
    k, h, w = inp.shape
    out = np.empty((k, h // 2, w // 2), dtype=np.float64)
    for c in range(k):
        for i in range(h // 2):
            for j in range(w // 2):
                out[c, i, j] = max(inp[c, 2 * i, 2 * j], inp[c, 2 * i + 1, 2 * j],
                                   inp[c, 2 * i, 2 * j + 1],
                                   inp[c, 2 * i + 1, 2 * j + 1])
    return out


def upsample_nearest2x_reference(inp: np.ndarray) -> np.ndarray:
    inp = np.asarray(inp, dtype=np.float64)
    k, h, w = inp.shape
    out = np.empty((k, 2 * h, 2 * w), dtype=np.float64)
    for c in range(k):
        for i in range(2 * h):
            for j in range(2 * w):
                out[c, i, j] = inp[c, i // 2, j // 2]
    return out


def softmax_reference(logits: np.ndarray) -> np.ndarray:
    """Channel-axis softmax of [C,H,W] (max-shifted; exact in exact arithmetic)."""
    z = np.asarray(logits, dtype=np.float64)
    c, h, w = z.shape
    out = np.empty_like(z)
    for i in range(h):
        for j in range(w):
            m = z[0, i, j]
            for k in range(1, c):
                m = max(m, z[k, i, j])
            total = 0.0
            for k in range(c):
                out[k, i, j] = math.exp(z[k, i, j] - m)
                total += out[k, i, j]
            for k in range(c):
                out[k, i, j] /= total
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one element at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(x)
        xf[i] = orig - eps
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad
