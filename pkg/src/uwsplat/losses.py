"""Training losses, their analytic gradients, and image quality metrics.

The image term mixes L1 with structural dissimilarity; the pruning term
keeps the base and enhanced renders close while encouraging sparsity; the
medium term anchors the attenuation fields to a water prior weighted by
where uncertain gaussians live; the depth term ties blended depth to the
gaussians' own distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda_papsl: float = 0.1
    lambda_beta: float = 0.05
    lambda_z: float = 0.05
    lambda_ssim: float = 0.2
    lambda_sparsity: float = 0.01
    lambda_mlp: float = 0.001
    lambda_component: float = 0.001


def _gaussian_taps(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    g = _gaussian_taps(size, sigma)
    return np.outer(g, g)


_WINDOW = gaussian_window()
_WINDOW_1D = _gaussian_taps()
_MARGIN = (SSIM_WINDOW - 1) // 2


def _filter_valid(img):
    # the window is separable and symmetric, so two 1d correlations plus a
    # crop reproduce a valid-mode 2d convolution
    t = correlate1d(img, _WINDOW_1D, axis=0, mode="constant")
    t = correlate1d(t, _WINDOW_1D, axis=1, mode="constant")
    return t[_MARGIN:-_MARGIN, _MARGIN:-_MARGIN]


def _filter_full(img):
    t = np.pad(img, _MARGIN)
    t = correlate1d(t, _WINDOW_1D, axis=0, mode="constant")
    t = correlate1d(t, _WINDOW_1D, axis=1, mode="constant")
    return t


def _channels(img):
    a = np.asarray(img.data if hasattr(img, "data") else img, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    return a


def _ssim_channel(a, b):
    """Per-window SSIM map of one channel plus the intermediates the
    adjoint needs."""
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    p = _filter_valid(a * a)
    q = _filter_valid(b * b)
    r = _filter_valid(a * b)
    top1 = 2.0 * mu_a * mu_b + SSIM_C1
    top2 = 2.0 * (r - mu_a * mu_b) + SSIM_C2
    bot1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    bot2 = (p - mu_a * mu_a) + (q - mu_b * mu_b) + SSIM_C2
    s = top1 * top2 / (bot1 * bot2)
    return s, (mu_a, mu_b, top1, top2, bot1, bot2)


def ssim(a, b) -> float:
    """Mean structural similarity, channels averaged, 11x11 gaussian
    window with valid-region windows only."""
    ca, cb = _channels(a), _channels(b)
    total = 0.0
    for c in range(ca.shape[2]):
        s, _ = _ssim_channel(ca[:, :, c], cb[:, :, c])
        total += s.mean()
    return total / ca.shape[2]


def ssim_with_grad(a, b):
    """SSIM plus its gradient with respect to the first image."""
    ca, cb = _channels(a), _channels(b)
    n_ch = ca.shape[2]
    grad = np.zeros_like(ca)
    total = 0.0
    for c in range(n_ch):
        x, y = ca[:, :, c], cb[:, :, c]
        s, (mu_a, mu_b, top1, top2, bot1, bot2) = _ssim_channel(x, y)
        total += s.mean()
        g = np.full(s.shape, 1.0 / (s.size * n_ch))
        inv = 1.0 / (bot1 * bot2)
        d_top1 = g * top2 * inv
        d_top2 = g * top1 * inv
        d_bot1 = -g * s / bot1
        d_bot2 = -g * s / bot2
        # window-level partials wrt mu_a, conv(a*a) and conv(a*b)
        d_mu_a = (2.0 * mu_b * (d_top1 - d_top2)
                  + 2.0 * mu_a * (d_bot1 - d_bot2))
        d_p = d_bot2
        d_r = 2.0 * d_top2
        grad[:, :, c] = (_filter_full(d_mu_a)
                         + _filter_full(d_p) * 2.0 * x
                         + _filter_full(d_r) * y)
    value = total / n_ch
    if np.asarray(a.data if hasattr(a, "data") else a).ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def loss_img(uw, gt, weights: LossWeights = LossWeights()) -> float:
    """Weighted L1 plus structural dissimilarity between render and target."""
    ca, cb = _channels(uw), _channels(gt)
    l1 = np.abs(ca - cb).mean()
    dssim = (1.0 - ssim(uw, gt)) / 2.0
    lam = weights.lambda_ssim
    return (1.0 - lam) * l1 + lam * dssim


def loss_img_with_grad(uw, gt, weights: LossWeights = LossWeights()):
    ca, cb = _channels(uw), _channels(gt)
    diff = ca - cb
    l1 = np.abs(diff).mean()
    s, d_s = ssim_with_grad(ca, cb)
    lam = weights.lambda_ssim
    value = (1.0 - lam) * l1 + lam * (1.0 - s) / 2.0
    grad = (1.0 - lam) * np.sign(diff) / diff.size - lam * 0.5 * d_s
    return value, grad


def loss_papsl(uri, uri_enh, prune_probs, mlp,
               weights: LossWeights = LossWeights()) -> float:
    """Keeps the pruned render close to the base one, pushes prune
    probabilities up (sparsity), and decays the MLP."""
    ca, cb = _channels(uri), _channels(uri_enh)
    consistency = np.abs(ca - cb).mean()
    sparsity = weights.lambda_sparsity * np.sum(1.0 - prune_probs)
    decay = weights.lambda_mlp * mlp.squared_norm()
    return consistency + sparsity + decay


def loss_papsl_with_grad(uri, uri_enh, prune_probs, mlp,
                         weights: LossWeights = LossWeights()):
    """Returns (value, d_uri, d_uri_enh, d_prune_probs, d_mlp_params)."""
    ca, cb = _channels(uri), _channels(uri_enh)
    diff = ca - cb
    value = (np.abs(diff).mean()
             + weights.lambda_sparsity * np.sum(1.0 - prune_probs)
             + weights.lambda_mlp * mlp.squared_norm())
    g = np.sign(diff) / diff.size
    d_m = np.full(len(prune_probs), -weights.lambda_sparsity)
    d_params = [2.0 * weights.lambda_mlp * p for p in mlp.parameters()]
    return value, g, -g, d_m, d_params


def splat_score_field(means, scores, bbox_min, bbox_max, resolution):
    """Distribute per-gaussian scores onto grid nodes with trilinear
    weights, normalized per node; nodes no gaussian touches get 1."""
    g = resolution
    acc = np.zeros(g * g * g)
    wsum = np.zeros(g * g * g)
    if len(means):
        span = np.maximum(np.asarray(bbox_max, dtype=np.float64)
                          - np.asarray(bbox_min, dtype=np.float64), 1e-12)
        p = (np.asarray(means, dtype=np.float64) - bbox_min) / span * (g - 1)
        p = np.clip(p, 0.0, g - 1)
        i0 = np.minimum(np.floor(p).astype(np.int64), g - 2)
        f = p - i0
        s = np.asarray(scores, dtype=np.float64)
        for ox in (0, 1):
            wx = f[:, 0] if ox else 1.0 - f[:, 0]
            for oy in (0, 1):
                wy = f[:, 1] if oy else 1.0 - f[:, 1]
                for oz in (0, 1):
                    wz = f[:, 2] if oz else 1.0 - f[:, 2]
                    wt = wx * wy * wz
                    lin = ((i0[:, 0] + ox) * g + (i0[:, 1] + oy)) * g \
                        + (i0[:, 2] + oz)
                    np.add.at(acc, lin, wt * s)
                    np.add.at(wsum, lin, wt)
    field = np.where(wsum > 0.0, acc / np.where(wsum > 0.0, wsum, 1.0), 1.0)
    return field.reshape(g, g, g)


def loss_beta(grid_d, grid_b, score_field, beta_prior, values_d=None,
              values_b=None, weights: LossWeights = LossWeights()) -> float:
    """Score-weighted deviation of both attenuation fields from the water
    prior plus a norm penalty on the factor components (bias excluded)."""
    from .medium import vm_values_dense
    if values_d is None:
        values_d = vm_values_dense(grid_d)
    if values_b is None:
        values_b = vm_values_dense(grid_b)
    prior = np.asarray(beta_prior, dtype=np.float64).reshape(3, 1, 1, 1)
    data = 0.0
    for vals in (values_d, values_b):
        data += float(np.sum(score_field[None] * (vals - prior) ** 2))
    reg = weights.lambda_component * (grid_d.component_squared_norm()
                                      + grid_b.component_squared_norm())
    return data + reg


def loss_beta_with_grad(grid_d, grid_b, score_field, beta_prior,
                        values_d=None, values_b=None,
                        weights: LossWeights = LossWeights()):
    """Returns (value, d_values_d, d_values_b, reg_grads_d, reg_grads_b);
    reg grads are per component array, the bias stays untouched."""
    from .medium import vm_values_dense
    if values_d is None:
        values_d = vm_values_dense(grid_d)
    if values_b is None:
        values_b = vm_values_dense(grid_b)
    prior = np.asarray(beta_prior, dtype=np.float64).reshape(3, 1, 1, 1)
    value = loss_beta(grid_d, grid_b, score_field, beta_prior,
                      values_d, values_b, weights)
    d_d = 2.0 * score_field[None] * (values_d - prior)
    d_b = 2.0 * score_field[None] * (values_b - prior)
    lam = weights.lambda_component
    reg_d = {k: (2.0 * lam * v if k != "bias" else np.zeros_like(v))
             for k, v in grid_d.component_arrays().items()}
    reg_b = {k: (2.0 * lam * v if k != "bias" else np.zeros_like(v))
             for k, v in grid_b.component_arrays().items()}
    return value, d_d, d_b, reg_d, reg_b


def _splat_arrays(splats):
    """Accepts a ProjectedSplats or a list of Splat2D."""
    if hasattr(splats, "mean2d"):
        return (splats.mean2d, splats.depth,
                np.asarray(splats.cloud_index, dtype=np.int64))
    mean2d = np.array([s.mean2d for s in splats], dtype=np.float64)
    dist = np.array([s.depth_center for s in splats], dtype=np.float64)
    gidx = np.array([s.gaussian_index for s in splats], dtype=np.int64)
    return mean2d.reshape(-1, 2), dist, gidx


def loss_z(depth_map, splats, u_norm, valid=None) -> float:
    """Certainty weighted disagreement between the blended depth at each
    gaussian's center pixel and its own camera distance.  Pixels without
    accumulated depth (0 by convention) are skipped."""
    value, _, _ = loss_z_with_grad(depth_map, splats, u_norm, valid)
    return value


def loss_z_with_grad(depth_map, splats, u_norm, valid=None):
    """Returns (value, d_depth_map, d_distance_per_splat)."""
    d = np.asarray(depth_map.data if hasattr(depth_map, "data")
                   else depth_map, dtype=np.float64)
    if d.ndim == 3:
        d = d[:, :, 0]
    h, w = d.shape
    if valid is None:
        valid = d > 0.0
    mean2d, dist, gidx = _splat_arrays(splats)
    d_map = np.zeros_like(d)
    d_dist = np.zeros(dist.shape[0])
    if dist.size == 0:
        return 0.0, d_map, d_dist
    px = np.rint(mean2d[:, 0]).astype(np.int64)
    py = np.rint(mean2d[:, 1]).astype(np.int64)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    pxc, pyc = np.clip(px, 0, w - 1), np.clip(py, 0, h - 1)
    ok = inside & valid[pyc, pxc]
    cert = 1.0 - np.clip(np.asarray(u_norm, dtype=np.float64)[gidx], 0.0, 1.0)
    resid = d[pyc, pxc] - dist
    value = float(np.sum(cert[ok] * np.abs(resid[ok])))
    sgn = np.sign(resid) * cert * ok
    np.add.at(d_map, (pyc, pxc), sgn)
    d_dist = -sgn
    return value, d_map, d_dist


def loss_total(l_img, l_papsl, l_beta, l_z,
               weights: LossWeights = LossWeights()) -> float:
    return (l_img + weights.lambda_papsl * l_papsl
            + weights.lambda_beta * l_beta + weights.lambda_z * l_z)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0,1] images, capped at 100 dB."""
    ca, cb = _channels(a), _channels(b)
    mse = float(((ca - cb) ** 2).mean())
    if mse == 0.0:
        return 100.0
    return float(min(10.0 * np.log10(1.0 / mse), 100.0))
