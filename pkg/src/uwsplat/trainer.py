"""End-to-end training: Adam per parameter group, densification and
opacity-reset schedules, soft pruning activation, divergence handling and
a deterministic metrics log."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .autodiff import ForwardOptions, backward_pipeline, forward_pipeline
from .core import GaussianCloud, Image, inverse_sigmoid, quat_to_rotation, sigmoid
from .errors import DivergenceDetected
from .medium import BETA_PRIOR, MediumParams, forward_simulate, make_medium
from .mlp import DenseNet
from .pruning import (PruneWeights, prune, uncertainty_component,
                      view_statistics)
from .raster import rasterize
from .synthetic import floater_ratio


@dataclass
class TrainConfig:
    iterations: int = 40000
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    lr_medium: float = 0.001
    lr_mean: float = 1.6e-4
    lr_mean_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_prune: float = 0.001          # MLP and the score mixing weights
    densify_start: int = 500
    densify_interval: int = 100
    densify_rate: float = 0.01
    opacity_reset_interval: int = 3000
    paup_start: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 1.0
    grid_resolution: int = 64
    grid_rank: int = 16
    seed: int = 0
    checkpoint_interval: int = 0     # 0 writes only the final checkpoint
    stats_refresh: int = 5           # visits between uncertainty recomputes
    floater_metric_interval: int = 25

    def __post_init__(self):
        lrs = (self.lr_opacity, self.lr_scale, self.lr_rotation,
               self.lr_medium, self.lr_mean, self.lr_sh, self.lr_prune)
        if any(lr <= 0 for lr in lrs):
            raise ValueError("learning rates must be positive")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        base = dict(iterations=3000, densify_start=300, densify_interval=100,
                    opacity_reset_interval=1000, paup_start=1200,
                    grid_resolution=16, grid_rank=4)
        base.update(overrides)
        return cls(**base)

    def lr_mean_at(self, iteration) -> float:
        if self.iterations <= 0:
            return self.lr_mean
        frac = iteration / self.iterations
        return self.lr_mean * (self.lr_mean_final / self.lr_mean) ** frac

    def to_dict(self):
        return asdict(self)


class _Adam:
    """Per-array Adam state."""

    def __init__(self, shape, cfg: TrainConfig):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.cfg = cfg

    def step(self, param, grad, lr):
        cfg = self.cfg
        self.t += 1
        self.m = cfg.adam_beta1 * self.m + (1 - cfg.adam_beta1) * grad
        self.v = cfg.adam_beta2 * self.v + (1 - cfg.adam_beta2) * grad * grad
        m_hat = self.m / (1 - cfg.adam_beta1 ** self.t)
        v_hat = self.v / (1 - cfg.adam_beta2 ** self.t)
        param -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    def remap(self, kept_index, n_new):
        """Carry moments through a densify: survivors keep theirs, new
        entries start cold."""
        pad = (n_new,) + self.m.shape[1:]
        self.m = np.concatenate([self.m[kept_index], np.zeros(pad)])
        self.v = np.concatenate([self.v[kept_index], np.zeros(pad)])


@dataclass
class TrainedModel:
    cloud: GaussianCloud
    medium: MediumParams
    mlp: DenseNet
    prune_weights: PruneWeights
    final_keep: np.ndarray
    config: TrainConfig
    metrics: list = field(default_factory=list)

    def surviving_cloud(self) -> GaussianCloud:
        return self.cloud.subset(self.final_keep)


def render_eval(model: TrainedModel, cam):
    """Render the pruned model into one view: clean color, depth (zero
    uncertainty) and the underwater composition."""
    sub = model.surviving_cloud()
    bundle = rasterize(sub, cam, record_pairs=False)
    uw = forward_simulate(bundle.uri.data, bundle.depth.data[:, :, 0],
                          bundle.valid,
                          model.medium, cam)
    return {"uri": bundle.uri, "depth": bundle.depth, "uw": Image(uw),
            "valid": bundle.valid}


def _densify(cloud, accum_norm, accum_vec, rng, cfg: TrainConfig):
    """Clone small / split large gaussians with top accumulated positional
    gradients.  Returns (new_cloud, kept_index, n_new) or None."""
    n = len(cloud)
    if n == 0 or not np.any(accum_norm > 0.0):
        return None
    threshold = np.percentile(accum_norm, 99.0)
    cap = max(1, math.ceil(cfg.densify_rate * n))
    order = np.argsort(-accum_norm, kind="stable")
    chosen = [int(i) for i in order[:cap] if accum_norm[i] > threshold]
    if not chosen:
        return None

    bmin, bmax = cloud.bounding_box()
    extent = float(np.linalg.norm(bmax - bmin))
    small_limit = 0.01 * extent

    removed = np.zeros(n, dtype=bool)
    new_parts = []
    for i in chosen:
        scales = np.exp(cloud.log_scales[i])
        g = cloud.subset(np.array([i]))
        if scales.max() < small_limit:
            # clone, nudged against the accumulated gradient
            direction = accum_vec[i]
            norm = np.linalg.norm(direction)
            if norm > 0.0:
                direction = direction / norm
            child = g.copy()
            child.means[0] = cloud.means[i] - direction * 0.5 * scales.mean()
            new_parts.append(child)
        else:
            # split into two samples of the parent's own distribution
            removed[i] = True
            rot = quat_to_rotation(cloud.rotations[i][None])[0]
            for _ in range(2):
                child = g.copy()
                local = rng.normal(size=3) * scales
                child.means[0] = cloud.means[i] + rot @ local
                child.log_scales[0] = cloud.log_scales[i] - np.log(1.6)
                new_parts.append(child)

    kept_index = np.flatnonzero(~removed)
    out = cloud.subset(kept_index)
    for part in new_parts:
        out = out.append(part)
    return out, kept_index, sum(len(p) for p in new_parts)


def _write_checkpoint(path, cloud, medium, mlp, pw, keep, cfg, iteration):
    from .io import save_checkpoint
    save_checkpoint(path, cloud, medium, mlp, pw, keep, cfg.to_dict(),
                    iteration=iteration)


def estimate_veiling_logit(views, cloud: GaussianCloud, percentile=2.0):
    """Data-driven initial veiling color, in logit space.

    The darkest training pixels are water-dominated: their value is about
    B * (1 - exp(-beta * z)).  Dividing each view's dark quantile by that
    saturation factor, evaluated with the documented attenuation prior at
    the view's distance to the scene, undoes the finite-column bias.  The
    gradient only has to polish the estimate instead of traversing logit
    space at the slow medium learning rate.
    """
    center = 0.5 * (cloud.means.min(axis=0) + cloud.means.max(axis=0))
    estimates = []
    for v in views:
        if v.gt_image is None:
            continue
        dark = np.percentile(v.gt_image.data.reshape(-1, 3), percentile,
                             axis=0)
        dist = np.linalg.norm(v.camera_center - center)
        sat = 1.0 - np.exp(-BETA_PRIOR * dist)
        estimates.append(dark / np.maximum(sat, 1e-6))
    if not estimates:
        return np.zeros(3)
    b = np.clip(np.median(estimates, axis=0), 0.02, 0.98)
    return inverse_sigmoid(b)


def train(views, init_cloud: GaussianCloud, config: TrainConfig,
          medium: Optional[MediumParams] = None,
          mlp: Optional[DenseNet] = None,
          prune_weights: Optional[PruneWeights] = None,
          scene=None, metrics_path=None,
          checkpoint_dir=None) -> TrainedModel:
    """Optimize everything end to end on the given views.

    scene (optional, synthetic) enables the floater-ratio metric; metrics
    are appended per iteration as JSON lines when metrics_path is set.
    """
    if len(views) < 2:
        raise ValueError("training needs at least 2 views")
    rng = np.random.default_rng(config.seed)
    cloud = init_cloud.copy()
    if medium is None:
        bmin, bmax = cloud.bounding_box(margin=0.1)
        medium = make_medium(bmin, bmax, BETA_PRIOR, rng,
                             resolution=config.grid_resolution,
                             rank=config.grid_rank,
                             b_logit=estimate_veiling_logit(views, cloud))
    else:
        medium = medium.copy()
    mlp = mlp if mlp is not None else DenseNet(hidden=32, rng=rng)
    pw = prune_weights if prune_weights is not None else PruneWeights()

    cloud_groups = ("means", "rotations", "log_scales", "opacity_logits",
                    "sh")
    opt = {name: _Adam(getattr(cloud, name).shape, config)
           for name in cloud_groups}
    opt["b_logit"] = _Adam(medium.b_logit.shape, config)
    for tag, grid in (("grid_d", medium.grid_d), ("grid_b", medium.grid_b)):
        for comp in ("u", "m", "v", "w", "bias"):
            opt[f"{tag}.{comp}"] = _Adam(getattr(grid, comp).shape, config)
    for pi, p in enumerate(mlp.parameters()):
        opt[f"mlp.{pi}"] = _Adam(p.shape, config)
    opt["w_u"] = _Adam((), config)
    opt["w_p"] = _Adam((), config)

    accum_norm = np.zeros(len(cloud))
    accum_vec = np.zeros((len(cloud), 3))
    metrics = []
    sink = open(metrics_path, "w") if metrics_path else None
    n_views = len(views)
    schedule = []
    # per-view cache of (visits_left, u_raw, u_norm); the scores are
    # detached in the backward, so refreshing them every stats_refresh
    # visits changes only how fresh the pruning signal is
    stats_cache = {}

    def uncertainty_for(vi):
        entry = stats_cache.get(vi)
        if entry is not None and entry[0] > 0:
            entry[0] -= 1
            return entry[1], entry[2]
        var_alpha, var_color = view_statistics(cloud, views, vi)
        u_raw, u_norm = uncertainty_component(var_alpha, var_color)
        stats_cache[vi] = [max(config.stats_refresh - 1, 0), u_raw, u_norm]
        return u_raw, u_norm

    def emit(row):
        metrics.append(row)
        if sink is not None:
            sink.write(json.dumps(row, sort_keys=True) + "\n")

    try:
        for it in range(1, config.iterations + 1):
            if not schedule:
                schedule = list(rng.permutation(n_views))
            vi = int(schedule.pop(0))
            active = it >= config.paup_start
            opts = ForwardOptions(training=True, prune_active=active,
                                  temperature=config.temperature,
                                  uncertainty=uncertainty_for(vi))
            state = forward_pipeline(cloud, medium, mlp, pw, views, vi,
                                     opts, rng=rng)
            if not math.isfinite(state.losses["total"]):
                ck = None
                if checkpoint_dir:
                    ck = os.path.join(checkpoint_dir, "diverged.ckpt")
                    _write_checkpoint(ck, cloud, medium, mlp, pw,
                                      np.ones(len(cloud), dtype=bool),
                                      config, it)
                raise DivergenceDetected(
                    f"loss is not finite at iteration {it}",
                    checkpoint_path=ck)
            bundle = backward_pipeline(state)

            accum_norm += np.linalg.norm(bundle.d_means, axis=1)
            accum_vec += bundle.d_means

            opt["means"].step(cloud.means, bundle.d_means,
                              config.lr_mean_at(it))
            opt["rotations"].step(cloud.rotations, bundle.d_rotations,
                                  config.lr_rotation)
            opt["log_scales"].step(cloud.log_scales, bundle.d_log_scales,
                                   config.lr_scale)
            opt["opacity_logits"].step(cloud.opacity_logits,
                                       bundle.d_opacity_logits,
                                       config.lr_opacity)
            opt["sh"].step(cloud.sh, bundle.d_sh, config.lr_sh)
            opt["b_logit"].step(medium.b_logit, bundle.d_b_logit,
                                config.lr_medium)
            for tag, grid, grads in (("grid_d", medium.grid_d,
                                      bundle.d_grid_d),
                                     ("grid_b", medium.grid_b,
                                      bundle.d_grid_b)):
                for comp in ("u", "m", "v", "w", "bias"):
                    opt[f"{tag}.{comp}"].step(getattr(grid, comp),
                                              grads[comp], config.lr_medium)
            if bundle.d_mlp is not None:
                params = mlp.parameters()
                for pi, p in enumerate(params):
                    opt[f"mlp.{pi}"].step(p, bundle.d_mlp[pi],
                                          config.lr_prune)
                w_u = np.array(pw.w_u)
                w_p = np.array(pw.w_p)
                opt["w_u"].step(w_u, np.array(bundle.d_w_u), config.lr_prune)
                opt["w_p"].step(w_p, np.array(bundle.d_w_p), config.lr_prune)
                pw.w_u, pw.w_p = float(w_u), float(w_p)
                pw.clamp()

            norms = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
            cloud.rotations /= np.maximum(norms, 1e-12)

            track_floaters = scene is not None and (
                it == 1 or it == config.iterations
                or it % config.floater_metric_interval == 0)
            row = {
                "iteration": it,
                "loss_total": state.losses["total"],
                "loss_img": state.losses["img"],
                "loss_papsl": state.losses["papsl"],
                "loss_beta": state.losses["beta"],
                "loss_z": state.losses["z"],
                "tau": state.decision.tau if state.decision else None,
                "n_pruned": state.decision.n_pruned if state.decision else 0,
                "n_ties": state.decision.n_ties if state.decision else 0,
                "n_gaussians": len(cloud),
                "floater_ratio": (floater_ratio(cloud, scene)
                                  if track_floaters else None),
            }
            emit(row)

            if (config.densify_start <= it <= config.iterations // 2
                    and it % config.densify_interval == 0):
                grown = _densify(cloud, accum_norm, accum_vec, rng, config)
                if grown is not None:
                    cloud, kept, n_new = grown
                    for name in cloud_groups:
                        opt[name].remap(kept, n_new)
                    accum_norm = np.zeros(len(cloud))
                    accum_vec = np.zeros((len(cloud), 3))
                    stats_cache.clear()

            if (it % config.opacity_reset_interval == 0
                    and 0 < it < config.iterations):
                alpha = sigmoid(cloud.opacity_logits)
                cloud.opacity_logits[:] = inverse_sigmoid(
                    np.minimum(alpha, 0.01))
                opt["opacity_logits"].m[:] = 0.0
                opt["opacity_logits"].v[:] = 0.0
                stats_cache.clear()

            if (config.checkpoint_interval > 0 and checkpoint_dir
                    and it % config.checkpoint_interval == 0):
                _write_checkpoint(
                    os.path.join(checkpoint_dir, f"iter_{it:06d}.ckpt"),
                    cloud, medium, mlp, pw,
                    np.ones(len(cloud), dtype=bool), config, it)
    finally:
        if sink is not None:
            sink.close()

    final_keep = np.ones(len(cloud), dtype=bool)
    if config.iterations >= config.paup_start and config.iterations > 0:
        probs = np.zeros(len(cloud))
        eval_opts = ForwardOptions(training=False, prune_active=True)
        for vi in range(n_views):
            state = forward_pipeline(cloud, medium, mlp, pw, views, vi,
                                     eval_opts)
            probs += state.prune_prob
        probs /= n_views
        final_keep = prune(probs, training=False).hard_keep

    model = TrainedModel(cloud, medium, mlp, pw, final_keep, config, metrics)
    if checkpoint_dir:
        _write_checkpoint(os.path.join(checkpoint_dir, "final.ckpt"),
                          cloud, medium, mlp, pw, final_keep, config,
                          config.iterations)
    return model
