"""Per-gaussian consistency scoring and quantile-thresholded soft pruning.

Each gaussian gets an uncertainty score (cross-view variance of its
effective opacity and view-dependent color) and a physics score (agreement
between its distance and the rendered depth, plus how much attenuation it
should have suffered).  A learnable combination feeds a tiny MLP that
predicts a prune probability; the top 5 percent are dropped through a
straight-through Gumbel relaxation so the decision stays differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CameraView, GaussianCloud, sh_basis, sigmoid
from .errors import FewerThanKViews
from .raster import RasterSession, RenderBundle

W_ALPHA = 0.4
W_COLOR = 0.6
K_VIEWS = 5
QUANTILE = 95.0
FALLBACK_FRACTION = 0.05


@dataclass
class PruneWeights:
    """Learnable mixing weights for the combined score, clamped to >= 0."""

    w_u: float = 0.5
    w_p: float = 0.5

    def clamp(self):
        self.w_u = max(self.w_u, 0.0)
        self.w_p = max(self.w_p, 0.0)


@dataclass
class ScoreRecord:
    """Scores of a single gaussian."""

    u_component: float
    p_component: float
    score: float
    prune_prob: float
    keep: bool


def effective_opacity(bundle: RenderBundle) -> np.ndarray:
    """Per-gaussian opacity scaled by transmittance at its strongest pixel.

    Culled gaussians and gaussians whose every pixel fell below the
    transmittance floor get 0.
    """
    if bundle.result is None:
        raise ValueError("bundle carries no blend result")
    return _effective_opacity(bundle.session, bundle.result)


def _effective_opacity(session: RasterSession, result) -> np.ndarray:
    out = np.zeros(len(session.cloud))
    proj = session.proj
    out[proj.cloud_index] = proj.alpha * result.best_transmittance
    return out


def view_color(cloud: GaussianCloud, cam: CameraView) -> np.ndarray:
    """Raw SH color of every gaussian toward a camera, (N, 3)."""
    diff = cloud.means - cam.camera_center
    norm = np.linalg.norm(diff, axis=1)
    norm = np.where(norm > 0.0, norm, 1.0)
    basis = sh_basis(diff / norm[:, None])
    return np.einsum('nck,nk->nc', cloud.sh, basis)


def select_neighbor_views(views, current_index, k=K_VIEWS):
    """Indices of the k views whose centers are nearest the current view's.

    The current view is its own nearest neighbor and is always included.
    """
    if len(views) < 2:
        raise FewerThanKViews(
            f"need at least 2 views for cross-view statistics, got {len(views)}")
    centers = np.stack([v.camera_center for v in views])
    dist = np.linalg.norm(centers - centers[current_index], axis=1)
    order = np.argsort(dist, kind="stable")
    return order[:min(k, len(views))]


def view_statistics(cloud: GaussianCloud, views, current_index,
                    k=K_VIEWS):
    """Population variances of effective opacity and color across the k
    nearest views (current view included).  Returns (var_alpha, var_color);
    var_color is the squared deviation summed over channels."""
    chosen = select_neighbor_views(views, current_index, k)
    n = len(cloud)
    alphas = np.zeros((len(chosen), n))
    colors = np.zeros((len(chosen), n, 3))
    for row, vi in enumerate(chosen):
        cam = views[vi]
        session = RasterSession(cloud, cam)
        if len(session.proj) > 0:
            result = session.blend(record_pairs=False)
            alphas[row] = _effective_opacity(session, result)
        colors[row] = view_color(cloud, cam)
    var_alpha = alphas.var(axis=0)
    var_color = ((colors - colors.mean(axis=0)) ** 2).sum(axis=2).mean(axis=0)
    return var_alpha, var_color


def uncertainty_component(var_alpha, var_color):
    """Weighted variance mix; also returns a max-normalized copy in [0, 1]
    used to downweight unstable gaussians in depth blending."""
    u = W_ALPHA * var_alpha + W_COLOR * var_color
    peak = u.max() if u.size else 0.0
    if peak > 0.0:
        u_norm = np.clip(u / peak, 0.0, 1.0)
    else:
        u_norm = np.zeros_like(u)
    return u, u_norm


def center_depth_lookup(bundle: RenderBundle):
    """Rendered depth at each gaussian's rounded center pixel.

    Returns cloud sized (depth, valid); gaussians that were culled, project
    outside the image, or land on a zero-weight pixel are invalid.
    """
    return center_depth_from_arrays(bundle.splats, bundle.depth.data[:, :, 0],
                                    bundle.valid,
                                    len(bundle.session.cloud))


def center_depth_from_arrays(proj, depth_map, valid_map, cloud_n):
    depth = np.zeros(cloud_n)
    valid = np.zeros(cloud_n, dtype=bool)
    if len(proj) == 0:
        return depth, valid
    px = np.rint(proj.mean2d[:, 0]).astype(np.int64)
    py = np.rint(proj.mean2d[:, 1]).astype(np.int64)
    h, w = depth_map.shape
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    pxc = np.clip(px, 0, w - 1)
    pyc = np.clip(py, 0, h - 1)
    d = depth_map[pyc, pxc]
    ok = inside & valid_map[pyc, pxc]
    depth[proj.cloud_index] = np.where(ok, d, 0.0)
    valid[proj.cloud_index] = ok
    return depth, valid


def physics_component(rendered_depth, depth_valid, cam_distance, alpha,
                      beta_mean):
    """Depth disagreement plus expected-attenuation magnitude.

    rendered_depth/depth_valid come from center_depth_lookup, cam_distance
    is the euclidean camera-to-mean distance, beta_mean the channel mean of
    the attenuation field at the gaussian mean.  When the rendered depth is
    invalid only the attenuation term contributes, evaluated at the
    gaussian's own distance.
    """
    z = np.where(depth_valid, rendered_depth, cam_distance)
    atten = np.abs(alpha * (1.0 - np.exp(-beta_mean * z)))
    return np.where(depth_valid,
                    np.abs(rendered_depth - cam_distance) + atten,
                    atten)


def combined_score(u_component, p_component, weights: PruneWeights):
    return weights.w_u * u_component + weights.w_p * p_component


@dataclass
class PruneDecision:
    """Outcome of one pruning round."""

    keep_weight: np.ndarray        # forwarded multiplier per gaussian
    hard_keep: np.ndarray          # noise-free threshold survivors
    soft: Optional[np.ndarray]     # relaxed keep probability (training only)
    tau: float
    temperature: float
    n_pruned: int
    n_ties: int
    fallback: bool

    def keep_weight_backward(self, d_keep_weight):
        """Gradient wrt prune probability through the straight-through
        relaxation; zero at eval where the decision is a hard constant."""
        if self.soft is None:
            return np.zeros_like(d_keep_weight)
        return d_keep_weight * self.soft * (1.0 - self.soft) * (
            -2.0 / self.temperature)


def fallback_keep_mask(prune_prob):
    """Lowest 5 percent of prune probabilities, at least one, ties by index."""
    n = prune_prob.shape[0]
    count = max(1, math.ceil(FALLBACK_FRACTION * n))
    order = np.argsort(prune_prob, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:count]] = True
    return mask


def prune(prune_prob, training=False, temperature=1.0,
          rng: Optional[np.random.Generator] = None,
          gumbel_noise=None, tau_override=None,
          soft_forward=False) -> PruneDecision:
    """Threshold prune probabilities at their 95th percentile.

    Survivors satisfy m < tau strictly.  During training the forwarded
    keep-weight is a straight-through Gumbel relaxation: hard 0/1 in the
    forward pass, sigmoid((2(tau - m) + g1 - g2) / T) in the backward.
    If everything would be dropped the lowest-m 5 percent survive.
    tau_override and soft_forward support gradient checking, where the
    threshold is frozen and the relaxed weight itself is forwarded.
    """
    m = np.asarray(prune_prob, dtype=np.float64)
    if tau_override is None:
        tau = float(np.percentile(m, QUANTILE))
    else:
        tau = float(tau_override)
    hard_keep = m < tau
    n_ties = int(np.count_nonzero(m == tau))
    fallback = False
    if not hard_keep.any():
        hard_keep = fallback_keep_mask(m)
        fallback = True

    soft = None
    if training:
        if gumbel_noise is None:
            if rng is None:
                raise ValueError("training prune needs an rng or fixed noise")
            u = rng.uniform(low=np.finfo(np.float64).tiny, high=1.0,
                            size=(2, m.shape[0]))
            gumbel_noise = -np.log(-np.log(u))
        g1, g2 = gumbel_noise
        soft = sigmoid((2.0 * (tau - m) + g1 - g2) / temperature)
        if soft_forward:
            keep_weight = soft.copy()
        else:
            keep_weight = (soft > 0.5).astype(np.float64)
            if not keep_weight.any():
                keep_weight = fallback_keep_mask(m).astype(np.float64)
                fallback = True
    else:
        keep_weight = hard_keep.astype(np.float64)

    n_pruned = int(m.shape[0] - np.count_nonzero(hard_keep))
    return PruneDecision(keep_weight, hard_keep, soft, tau, temperature,
                         n_pruned, n_ties, fallback)


def score_records(u_component, p_component, score, prune_prob, keep):
    return [ScoreRecord(float(u_component[i]), float(p_component[i]),
                        float(score[i]), float(prune_prob[i]), bool(keep[i]))
            for i in range(len(score))]
