"""Single-view training pipeline: forward, analytic backward, FD harness.

The forward pass renders the clean image and depth, scores every gaussian,
prunes softly, re-renders, pushes the result through the water model and
evaluates all losses.  The backward pass chains the hand-derived adjoints
of each stage.  Per-gaussian scores, the prune threshold and the voxel
score field are treated as constants in the backward pass (their gradient
paths are the straight-through relaxation and the MLP only); the
finite-difference harness freezes exactly those quantities so numeric and
analytic derivatives agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import CameraView, GaussianCloud, Image, inverse_sigmoid, sigmoid
from .errors import NonDeterministicForward, TapeMissing
from .losses import (LossWeights, loss_beta_with_grad, loss_img,
                     loss_img_with_grad, loss_papsl, loss_papsl_with_grad,
                     loss_total, loss_z_with_grad, splat_score_field)
from .medium import (BETA_PRIOR, MediumParams, compose_backward,
                     compose_underwater, grid_query, make_medium,
                     vm_components_backward, vm_raw_dense)
from .mlp import DenseNet
from .pruning import (PruneDecision, PruneWeights, center_depth_from_arrays,
                      combined_score, physics_component, prune,
                      uncertainty_component, view_statistics)
from .raster import RasterSession


@dataclass
class FrozenScores:
    """Quantities held constant for a deterministic, FD-compatible forward."""

    u_raw: np.ndarray
    u_norm: np.ndarray
    p_raw: np.ndarray
    tau: float
    gumbel_noise: np.ndarray        # (2, N)
    score_field: np.ndarray         # (G, G, G)


@dataclass
class ForwardOptions:
    training: bool = True
    prune_active: bool = True
    temperature: float = 1.0
    soft_keep: bool = False
    frozen: Optional[FrozenScores] = None
    record_tape: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    beta_prior: np.ndarray = field(default_factory=lambda: BETA_PRIOR.copy())
    # precomputed (u_raw, u_norm); scores are detached constants in the
    # backward, so a caller may refresh them on a cadence instead of
    # re-rendering the neighbor views every iteration
    uncertainty: Optional[tuple] = None


@dataclass
class PipelineState:
    """Everything one forward pass produced, enough to run backward."""

    cloud: GaussianCloud
    medium: MediumParams
    mlp: DenseNet
    prune_weights: PruneWeights
    view_index: int
    session: RasterSession
    result_base: object
    result_enh: Optional[object]
    base_color: np.ndarray
    base_depth: np.ndarray
    valid: np.ndarray
    enh_color: np.ndarray
    uw: np.ndarray
    compose_tape: object
    u_raw: np.ndarray
    u_norm: np.ndarray
    p_raw: np.ndarray
    score: Optional[np.ndarray]
    prune_prob: Optional[np.ndarray]
    mlp_tape: Optional[tuple]
    decision: Optional[PruneDecision]
    score_field: np.ndarray
    values_d: np.ndarray
    values_b: np.ndarray
    gt: np.ndarray
    losses: dict
    options: ForwardOptions


@dataclass
class GradientBundle:
    """Full-parameter gradients of the total loss for one view."""

    d_means: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_sh: np.ndarray
    d_b_logit: np.ndarray
    d_grid_d: dict
    d_grid_b: dict
    d_mlp: Optional[list]
    d_w_u: float
    d_w_p: float

    def all_finite(self) -> bool:
        arrays = [self.d_means, self.d_rotations, self.d_log_scales,
                  self.d_opacity_logits, self.d_sh, self.d_b_logit,
                  np.array([self.d_w_u, self.d_w_p])]
        arrays += list(self.d_grid_d.values()) + list(self.d_grid_b.values())
        if self.d_mlp is not None:
            arrays += self.d_mlp
        return all(np.isfinite(a).all() for a in arrays)


def forward_pipeline(cloud: GaussianCloud, medium: MediumParams,
                     mlp: DenseNet, prune_weights: PruneWeights,
                     views, view_index, options: ForwardOptions,
                     rng: Optional[np.random.Generator] = None,
                     gt_image=None) -> PipelineState:
    """Run the full two-branch forward for one training view."""
    from .medium import vm_values_dense

    cam = views[view_index]
    gt = gt_image if gt_image is not None else cam.gt_image
    if gt is None:
        raise ValueError("view carries no ground-truth image")
    gt = np.asarray(gt.data if hasattr(gt, "data") else gt, dtype=np.float64)

    session = RasterSession(cloud, cam)
    if len(session.proj) == 0:
        raise ValueError("no gaussian is visible from the requested view")
    proj = session.proj
    frozen = options.frozen

    if frozen is not None:
        u_raw, u_norm = frozen.u_raw, frozen.u_norm
    elif options.uncertainty is not None:
        u_raw, u_norm = options.uncertainty
    else:
        var_alpha, var_color = view_statistics(cloud, views, view_index)
        u_raw, u_norm = uncertainty_component(var_alpha, var_color)

    aux = proj.depth * (1.0 - u_norm[proj.cloud_index])
    result_base = session.blend(weights=None, aux=aux, record_pairs=False)
    base_color = result_base.color
    base_depth = result_base.aux
    valid = result_base.weight_sum > 0.0

    values_d = vm_values_dense(medium.grid_d)
    values_b = vm_values_dense(medium.grid_b)

    score = prune_prob = mlp_tape = decision = None
    result_enh = None
    enh_color = base_color
    if options.prune_active:
        if frozen is not None:
            p_raw = frozen.p_raw
        else:
            center_depth, center_ok = center_depth_from_arrays(
                proj, base_depth, valid, len(cloud))
            beta_at_mean, _ = grid_query(medium.grid_d, cloud.means,
                                         values=values_d)
            cam_dist = np.zeros(len(cloud))
            cam_dist[proj.cloud_index] = proj.depth
            off_view = cam_dist == 0.0
            if off_view.any():
                cam_dist[off_view] = np.linalg.norm(
                    cloud.means[off_view] - cam.camera_center, axis=1)
            p_raw = physics_component(center_depth, center_ok, cam_dist,
                                      sigmoid(cloud.opacity_logits),
                                      beta_at_mean.mean(axis=1))
        score = combined_score(u_raw, p_raw, prune_weights)
        raw_m, mlp_tape = mlp.forward(score)
        prune_prob = sigmoid(raw_m)
        decision = prune(
            prune_prob,
            training=options.training,
            temperature=options.temperature,
            rng=rng,
            gumbel_noise=None if frozen is None else frozen.gumbel_noise,
            tau_override=None if frozen is None else frozen.tau,
            soft_forward=options.soft_keep,
        )
        result_enh = session.blend(weights=decision.keep_weight,
                                   record_pairs=False)
        enh_color = result_enh.color
    else:
        p_raw = np.zeros(len(cloud))

    uw, compose_tape = compose_underwater(
        enh_color, base_depth, valid, medium, cam,
        values_d=values_d, values_b=values_b,
        with_tape=options.record_tape)

    if frozen is not None:
        score_field = frozen.score_field
    elif options.prune_active:
        score_field = splat_score_field(cloud.means, score,
                                        medium.grid_d.bbox_min,
                                        medium.grid_d.bbox_max,
                                        medium.grid_d.resolution)
    else:
        g = medium.grid_d.resolution
        score_field = np.ones((g, g, g))

    w = options.weights
    l_img = loss_img(uw, gt, w)
    if options.prune_active:
        l_papsl = loss_papsl(base_color, enh_color, prune_prob, mlp, w)
    else:
        l_papsl = 0.0
    from .losses import loss_beta, loss_z
    l_beta = loss_beta(medium.grid_d, medium.grid_b, score_field,
                       options.beta_prior, values_d, values_b, w)
    l_z = loss_z(Image(base_depth), proj, u_norm, valid)
    losses = {
        "img": float(l_img),
        "papsl": float(l_papsl),
        "beta": float(l_beta),
        "z": float(l_z),
        "total": float(loss_total(l_img, l_papsl, l_beta, l_z, w)),
    }

    return PipelineState(
        cloud=cloud, medium=medium, mlp=mlp, prune_weights=prune_weights,
        view_index=view_index, session=session, result_base=result_base,
        result_enh=result_enh, base_color=base_color, base_depth=base_depth,
        valid=valid, enh_color=enh_color, uw=uw, compose_tape=compose_tape,
        u_raw=u_raw, u_norm=u_norm, p_raw=p_raw, score=score,
        prune_prob=prune_prob, mlp_tape=mlp_tape, decision=decision,
        score_field=score_field, values_d=values_d, values_b=values_b,
        gt=gt, losses=losses, options=options)


def backward_pipeline(state: PipelineState) -> GradientBundle:
    """Chain all analytic adjoints from the total loss back to parameters."""
    if state.compose_tape is None:
        raise TapeMissing("forward ran without tape recording")
    opts = state.options
    w = opts.weights
    session = state.session
    proj = session.proj
    cloud, medium, mlp = state.cloud, state.medium, state.mlp
    active = opts.prune_active

    _, d_uw = loss_img_with_grad(state.uw, state.gt, w)
    comp = compose_backward(state.compose_tape, medium, d_uw)
    d_enh_color = comp["d_uri"]
    d_depth_map = comp["d_depth"]
    d_b_logit = comp["d_b_logit"]
    val_adj_d = comp["value_adj_d"]
    val_adj_b = comp["value_adj_b"]

    d_base_color = np.zeros_like(state.base_color)
    d_m = None
    mlp_grads = None
    if active:
        _, g_base, g_enh, d_m_papsl, papsl_params = loss_papsl_with_grad(
            state.base_color, state.enh_color, state.prune_prob, mlp, w)
        d_base_color += w.lambda_papsl * g_base
        d_enh_color = d_enh_color + w.lambda_papsl * g_enh
        d_m = w.lambda_papsl * d_m_papsl
        mlp_grads = [w.lambda_papsl * p for p in papsl_params]

    _, d_z_map, d_z_dist = loss_z_with_grad(Image(state.base_depth), proj,
                                            state.u_norm, state.valid)
    d_depth_map = d_depth_map + w.lambda_z * d_z_map

    _, d_vd, d_vb, reg_d, reg_b = loss_beta_with_grad(
        medium.grid_d, medium.grid_b, state.score_field, opts.beta_prior,
        state.values_d, state.values_b, w)
    val_adj_d += w.lambda_beta * d_vd
    val_adj_b += w.lambda_beta * d_vb

    grid_grads_d = vm_components_backward(medium.grid_d, val_adj_d,
                                          raw=vm_raw_dense(medium.grid_d))
    grid_grads_b = vm_components_backward(medium.grid_b, val_adj_b,
                                          raw=vm_raw_dense(medium.grid_b))
    lam = w.lambda_beta
    for k in reg_d:
        grid_grads_d[k] += lam * reg_d[k]
        grid_grads_b[k] += lam * reg_b[k]

    d_w_u = d_w_p = 0.0
    adj_enh = None
    if active:
        adj_enh = session.blend_backward(state.result_enh, d_enh_color)
        d_keep = np.zeros(len(cloud))
        np.add.at(d_keep, proj.cloud_index, adj_enh.d_weight)
        d_m = d_m + state.decision.keep_weight_backward(d_keep)
        d_raw_m = d_m * state.prune_prob * (1.0 - state.prune_prob)
        d_score, chain_params = mlp.backward(state.mlp_tape, d_raw_m)
        mlp_grads = [a + b for a, b in zip(mlp_grads, chain_params)]
        d_w_u = float(np.dot(d_score, state.u_raw))
        d_w_p = float(np.dot(d_score, state.p_raw))
        d_color_base_blend = d_base_color
    else:
        # single blend carries both the composed color and the depth
        d_color_base_blend = d_enh_color

    adj = session.blend_backward(state.result_base, d_color_base_blend,
                                 d_aux=d_depth_map)
    adj.d_depth += adj.d_aux * (1.0 - state.u_norm[proj.cloud_index])
    adj.d_depth += w.lambda_z * d_z_dist
    if adj_enh is not None:
        adj.add(adj_enh)
    grads = session.projection_backward(adj)

    return GradientBundle(
        d_means=grads["means"],
        d_rotations=grads["rotations"],
        d_log_scales=grads["log_scales"],
        d_opacity_logits=grads["opacity_logits"],
        d_sh=grads["sh"],
        d_b_logit=d_b_logit,
        d_grid_d=grid_grads_d,
        d_grid_b=grid_grads_b,
        d_mlp=mlp_grads,
        d_w_u=d_w_u,
        d_w_p=d_w_p,
    )


def freeze_scores(state: PipelineState,
                  rng: np.random.Generator) -> FrozenScores:
    """Capture the detached quantities of a live forward so later forwards
    are deterministic functions of the parameters alone."""
    n = len(state.cloud)
    u = rng.uniform(low=np.finfo(np.float64).tiny, high=1.0, size=(2, n))
    return FrozenScores(
        u_raw=state.u_raw.copy(),
        u_norm=state.u_norm.copy(),
        p_raw=state.p_raw.copy(),
        tau=state.decision.tau if state.decision is not None else 0.5,
        gumbel_noise=-np.log(-np.log(u)),
        score_field=state.score_field.copy(),
    )


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


REL_FLOOR = 1e-5


def _loss_of(cloud, medium, mlp, pw, views, vi, options) -> float:
    state = forward_pipeline(cloud, medium, mlp, pw, views, vi,
                             replace(options, record_tape=False))
    return state.losses["total"]


def _sample_indices(shape, limit, rng):
    total = int(np.prod(shape))
    if total <= limit:
        chosen = np.arange(total)
    else:
        chosen = rng.choice(total, size=limit, replace=False)
    return [np.unravel_index(int(i), shape) for i in chosen]


@dataclass
class GroupReport:
    name: str
    n_checked: int
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    groups: list
    tolerance: float
    step: float
    loss: float

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def as_dict(self):
        return {
            "loss": self.loss,
            "step": self.step,
            "tolerance": self.tolerance,
            "passed": bool(self.passed),
            "groups": [{"name": g.name, "n_checked": g.n_checked,
                        "max_rel_error": g.max_rel_error,
                        "passed": bool(g.passed)} for g in self.groups],
        }


def finite_diff_check(cloud, medium, mlp, prune_weights, views, view_index,
                      step=1e-4, tolerance=1e-3, samples_per_group=8,
                      seed=0, options: Optional[ForwardOptions] = None,
                      sample_rows: Optional[int] = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Scores, threshold, Gumbel noise and the voxel score field are frozen
    (they are constants in the analytic backward), and the soft keep-weight
    is forwarded instead of the hard straight-through 0/1 so the finite
    differences probe exactly the surrogate the backward implements.

    sample_rows caps which gaussians the per-gaussian groups sample from.
    The canonical scene keeps a frame-filling backdrop slab in the last
    row; its screen footprint is so wide that fixed-step central
    differences are truncation-limited there (the numeric quotient only
    converges to the analytic value for steps well below the default).
    """
    if options is None:
        options = ForwardOptions(training=True, prune_active=True)
    live = forward_pipeline(cloud, medium, mlp, prune_weights, views,
                            view_index, options,
                            rng=np.random.default_rng(seed))
    frozen = freeze_scores(live, np.random.default_rng(seed + 1))
    opts = replace(options, frozen=frozen, soft_keep=True)

    l0 = _loss_of(cloud, medium, mlp, prune_weights, views, view_index, opts)
    l1 = _loss_of(cloud, medium, mlp, prune_weights, views, view_index, opts)
    if l0 != l1:
        raise NonDeterministicForward(
            f"two identical forwards returned {l0!r} and {l1!r}")

    state = forward_pipeline(cloud, medium, mlp, prune_weights, views,
                             view_index, opts)
    bundle = backward_pipeline(state)
    rng = np.random.default_rng(seed + 2)

    def cloud_group(attr):
        def f(idx, h):
            c = cloud.copy()
            getattr(c, attr)[idx] += h
            return _loss_of(c, medium, mlp, prune_weights, views,
                            view_index, opts)
        return f

    def medium_logit(idx, h):
        m2 = medium.copy()
        m2.b_logit[idx] += h
        return _loss_of(cloud, m2, mlp, prune_weights, views, view_index,
                        opts)

    def grid_group(which, comp):
        def f(idx, h):
            m2 = medium.copy()
            getattr(m2, which).__dict__[comp][idx] += h
            return _loss_of(cloud, m2, mlp, prune_weights, views,
                            view_index, opts)
        return f

    def mlp_group(pi):
        def f(idx, h):
            params = [p.copy() for p in mlp.parameters()]
            params[pi][idx] += h
            m2 = DenseNet(hidden=mlp.hidden)
            m2.set_parameters(params)
            return _loss_of(cloud, medium, m2, prune_weights, views,
                            view_index, opts)
        return f

    def pw_group(attr):
        def f(idx, h):
            pw2 = PruneWeights(prune_weights.w_u, prune_weights.w_p)
            setattr(pw2, attr, getattr(pw2, attr) + h)
            return _loss_of(cloud, medium, mlp, pw2, views, view_index, opts)
        return f

    mlp_names = ("w1", "b1", "w2", "b2")
    groups = [
        ("means", cloud.means.shape, bundle.d_means, cloud_group("means")),
        ("rotations", cloud.rotations.shape, bundle.d_rotations,
         cloud_group("rotations")),
        ("log_scales", cloud.log_scales.shape, bundle.d_log_scales,
         cloud_group("log_scales")),
        ("opacity_logits", cloud.opacity_logits.shape,
         bundle.d_opacity_logits, cloud_group("opacity_logits")),
        ("sh", cloud.sh.shape, bundle.d_sh, cloud_group("sh")),
        ("b_logit", medium.b_logit.shape, bundle.d_b_logit, medium_logit),
    ]
    for which, tag, gdict in (("grid_d", "d", bundle.d_grid_d),
                              ("grid_b", "b", bundle.d_grid_b)):
        grid = getattr(medium, which)
        for comp in ("u", "m", "v", "w", "bias"):
            groups.append((f"{which}.{comp}",
                           getattr(grid, comp).shape, gdict[comp],
                           grid_group(which, comp)))
    if bundle.d_mlp is not None:
        for pi, p in enumerate(mlp.parameters()):
            groups.append((f"mlp.{mlp_names[pi]}", p.shape,
                           bundle.d_mlp[pi], mlp_group(pi)))
        groups.append(("w_u", (1,), np.array([bundle.d_w_u]),
                       pw_group("w_u")))
        groups.append(("w_p", (1,), np.array([bundle.d_w_p]),
                       pw_group("w_p")))

    per_gaussian = {"means", "rotations", "log_scales", "opacity_logits",
                    "sh"}
    reports = []
    for name, shape, analytic, evaluate in groups:
        analytic = np.asarray(analytic, dtype=np.float64)
        worst = 0.0
        pick_shape = shape
        if sample_rows is not None and name in per_gaussian:
            pick_shape = (min(shape[0], sample_rows),) + tuple(shape[1:])
        picked = _sample_indices(pick_shape, samples_per_group, rng)
        for idx in picked:
            if len(shape) == 1:
                key = idx[0]
            else:
                key = idx
            hi = evaluate(key, +step)
            lo = evaluate(key, -step)
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic[idx] if len(shape) > 1 else analytic[idx[0]])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            worst = max(worst, rel)
        reports.append(GroupReport(name, len(picked), worst,
                                   worst <= tolerance))
    return GradCheckReport(reports, tolerance, step,
                           float(state.losses["total"]))


# ---------------------------------------------------------------------------
# canonical gradient-check scene
# ---------------------------------------------------------------------------


def build_gradcheck_scene(seed=7, n_gaussians=10, size=32, n_views=6):
    """Small fully covered scene with safety margins away from every
    non-differentiable point (clamps, masks, kinks, pixel rounding).

    Margins depend on where random gaussians happen to land, so the
    builder walks deterministic sub-seeds until a draw clears every
    margin check; the result is still a pure function of seed."""
    for attempt in range(64):
        try:
            return _draw_gradcheck_scene(
                np.random.default_rng([seed, attempt]),
                n_gaussians, size, n_views)
        except AssertionError:
            continue
    raise RuntimeError("no margin-safe gradient-check scene found; "
                       "loosen the generator ranges")


def _draw_gradcheck_scene(rng, n_gaussians, size, n_views):
    means = np.empty((n_gaussians + 1, 3))
    means[:n_gaussians] = rng.uniform([-0.9, -0.9, -0.4], [0.9, 0.9, 0.4],
                                      size=(n_gaussians, 3))
    means[n_gaussians] = (0.0, 0.0, 2.0)       # backdrop behind the cluster

    log_scales = np.empty((n_gaussians + 1, 3))
    log_scales[:n_gaussians] = np.log(
        rng.uniform(0.15, 0.3, size=(n_gaussians, 3)))
    log_scales[n_gaussians] = np.log((6.0, 6.0, 0.3))

    rotations = rng.normal(size=(n_gaussians + 1, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)

    opacity = rng.uniform(0.3, 0.7, size=n_gaussians + 1)
    opacity[n_gaussians] = 0.97
    opacity_logits = inverse_sigmoid(opacity)

    from .core import SH_C0
    sh = rng.uniform(-0.03, 0.03, size=(n_gaussians + 1, 3, 16))
    sh[:, :, 0] = rng.uniform(0.35, 0.75, size=(n_gaussians + 1, 3)) / SH_C0
    sh[n_gaussians, :, 0] = np.array([0.55, 0.60, 0.65]) / SH_C0
    cloud = GaussianCloud(means, rotations, log_scales, opacity_logits, sh)

    views = []
    for k in range(n_views):
        ang = (k - (n_views - 1) / 2.0) * 0.12
        eye = np.array([5.0 * np.sin(ang), 0.4 * np.sin(2 * ang),
                        -5.0 * np.cos(ang)])
        views.append(CameraView.look_at(eye, np.zeros(3),
                                        np.array([0.0, 1.0, 0.0]),
                                        focal=46.0, width=size, height=size,
                                        view_id=k))

    bmin, bmax = cloud.bounding_box(margin=0.1)
    medium = make_medium(bmin, bmax, BETA_PRIOR, rng, resolution=8, rank=2)
    medium.b_logit = np.array([0.1, -0.2, 0.15])
    mlp = DenseNet(hidden=32, rng=rng)
    pw = PruneWeights()

    # ground truth: the same scene seen through the water, dimmed with a
    # floor so the L1 sign never flips under the FD step
    for v in views:
        from .raster import rasterize
        from .medium import forward_simulate
        bundle = rasterize(cloud, v, record_pairs=False)
        uw = forward_simulate(bundle.uri.data, bundle.depth.data,
                              bundle.valid, medium, v)
        assert bundle.valid.all(), "gradcheck scene must cover every pixel"
        assert uw.min() > 0.07, "scene too dark for a safe L1 margin"
        v.gt_image = Image(np.clip(uw * 0.85 - 0.04, 0.0, 1.0))

    _assert_margins(cloud, medium, mlp, pw, views)
    return cloud, medium, mlp, pw, views


def _assert_margins(cloud, medium, mlp, pw, views):
    """Verify the scene sits clear of every discontinuity the FD step
    could straddle."""
    from .raster import TRANSMITTANCE_FLOOR

    opts = ForwardOptions(training=True, prune_active=True)
    state = forward_pipeline(cloud, medium, mlp, pw, views, 0, opts,
                             rng=np.random.default_rng(0))
    proj = state.session.proj
    assert len(proj) == len(cloud), "gradcheck scene must not cull"

    raw = proj.rgb_raw
    assert raw.min() > 0.02 and raw.max() < 0.98, "color clamp margin"

    frac = np.abs((proj.mean2d - np.floor(proj.mean2d)) - 0.5)
    assert frac.min() > 0.02, "center pixel rounding margin"

    assert state.result_base.final_transmittance.min() \
        > 5.0 * TRANSMITTANCE_FLOOR, "transmittance floor margin"

    assert mlp.relu_margin(state.score) > 1e-3, "relu kink margin"

    diff = np.abs(state.uw - state.gt)
    assert diff.min() > 0.02, "L1 sign margin"

    px = np.rint(proj.mean2d[:, 0]).astype(int)
    py = np.rint(proj.mean2d[:, 1]).astype(int)
    resid = np.abs(state.base_depth[py, px] - proj.depth)
    assert resid.min() > 1e-3, "depth loss kink margin"

    assert state.u_raw.max() > 0.0, "uncertainty normalization margin"
