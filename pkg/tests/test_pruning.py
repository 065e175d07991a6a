"""Scoring and pruning: variance statistics, the physics term, quantile
thresholding, the straight-through relaxation and its gradient."""

import numpy as np
import pytest

from helpers import make_camera
from uwsplat.core import SH_C0, GaussianCloud, inverse_sigmoid, sigmoid
from uwsplat.errors import FewerThanKViews
from uwsplat.pruning import (K_VIEWS, PruneWeights, center_depth_lookup,
                             combined_score, effective_opacity,
                             fallback_keep_mask, physics_component, prune,
                             select_neighbor_views, uncertainty_component,
                             view_color, view_statistics)
from uwsplat.raster import rasterize


def stacked_cloud(alphas, z_values, sigma=0.5, color=(0.5, 0.5, 0.5)):
    n = len(alphas)
    means = np.zeros((n, 3))
    means[:, 2] = z_values
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    log_scales = np.log(np.full((n, 3), sigma))
    opacity_logits = inverse_sigmoid(np.asarray(alphas, dtype=np.float64))
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = np.array(color) / SH_C0
    return GaussianCloud(means, rotations, log_scales, opacity_logits, sh)


def test_effective_opacity_chain_of_halves():
    # three aligned opacity-0.5 splats with sub-pixel footprints: each one
    # blends strongest at the exact center pixel, where the incoming
    # transmittances are 1, 0.5, 0.25, so effective opacities come out
    # 0.5, 0.25, 0.125
    cam = make_camera(size=17, focal=40)
    cloud = stacked_cloud([0.5, 0.5, 0.5], [3.0, 4.0, 5.0], sigma=0.01)
    bundle = rasterize(cloud, cam)
    eff = effective_opacity(bundle)
    assert eff == pytest.approx([0.5, 0.25, 0.125], abs=1e-12)


def test_variance_population_oracle():
    # var of (0.2, 0.4, 0.6, 0.8, 1.0) is 0.08
    vals = np.array([0.2, 0.4, 0.6, 0.8, 1.0])
    assert np.var(vals) == pytest.approx(0.08, abs=1e-15)
    u, u_norm = uncertainty_component(np.array([0.08]), np.array([0.0]))
    assert u[0] == pytest.approx(0.4 * 0.08, abs=1e-15)
    assert u_norm[0] == 1.0


def test_uncertainty_component_mixing_and_normalization():
    var_a = np.array([0.1, 0.0, 0.3])
    var_c = np.array([0.0, 0.2, 0.1])
    u, u_norm = uncertainty_component(var_a, var_c)
    expect = 0.4 * var_a + 0.6 * var_c
    assert np.allclose(u, expect, atol=1e-15)
    assert np.allclose(u_norm, expect / expect.max(), atol=1e-15)
    z, zn = uncertainty_component(np.zeros(2), np.zeros(2))
    assert np.array_equal(zn, np.zeros(2))


def test_physics_component_frozen_value():
    # z = 3, camera distance 2, alpha 0.5, mean attenuation 0.1:
    # P = 1 + 0.5 * (1 - exp(-0.3)) = 1.129590889659
    p = physics_component(np.array([3.0]), np.array([True]),
                          np.array([2.0]), np.array([0.5]),
                          np.array([0.1]))
    assert p[0] == pytest.approx(1.1295908896591411, abs=1e-12)


def test_physics_component_trivial_zeroes():
    p = physics_component(np.array([2.0]), np.array([True]),
                          np.array([2.0]), np.array([0.0]), np.array([0.5]))
    assert p[0] == 0.0
    p = physics_component(np.array([2.0]), np.array([True]),
                          np.array([2.0]), np.array([1.0]), np.array([0.0]))
    assert p[0] == 0.0


def test_physics_component_invalid_depth_uses_distance():
    p = physics_component(np.array([0.0]), np.array([False]),
                          np.array([2.0]), np.array([0.5]), np.array([0.1]))
    expect = 0.5 * (1.0 - np.exp(-0.1 * 2.0))
    assert p[0] == pytest.approx(expect, abs=1e-15)


def test_combined_score_monotone_in_components():
    w = PruneWeights(w_u=0.5, w_p=0.5)
    base = combined_score(np.array([1.0]), np.array([1.0]), w)
    up_u = combined_score(np.array([2.0]), np.array([1.0]), w)
    up_p = combined_score(np.array([1.0]), np.array([3.0]), w)
    assert up_u >= base and up_p >= base
    w.w_u, w.w_p = -0.3, -4.0
    w.clamp()
    assert w.w_u == 0.0 and w.w_p == 0.0


def test_prune_quantile_exact_count():
    m = np.linspace(0.1, 1.0, 20)
    decision = prune(m, training=False)
    assert decision.n_pruned == 1
    assert not decision.hard_keep[-1]
    assert decision.hard_keep[:-1].all()


def test_prune_cap_and_strict_inequality():
    rng = np.random.default_rng(0)
    for n in (19, 20, 40, 100, 523):
        m = rng.uniform(size=n)
        decision = prune(m, training=False)
        cap = int(np.ceil(0.05 * n)) + decision.n_ties
        assert decision.n_pruned <= cap
        assert np.all(m[decision.hard_keep] < decision.tau)


def test_prune_all_identical_falls_back():
    m = np.full(40, 0.7)
    decision = prune(m, training=False)
    assert decision.fallback
    kept = np.flatnonzero(decision.hard_keep)
    assert kept.size == 2                    # ceil(0.05 * 40)
    assert list(kept) == [0, 1]              # ties break by index


def test_fallback_keeps_lowest_scores():
    m = np.array([0.9, 0.1, 0.5, 0.2, 0.8, 0.3])
    mask = fallback_keep_mask(m)
    assert np.flatnonzero(mask).tolist() == [1]


def test_training_forward_is_hard_with_soft_backward():
    rng = np.random.default_rng(5)
    m = rng.uniform(size=50)
    noise = rng.gumbel(size=(2, 50))
    decision = prune(m, training=True, temperature=1.0, gumbel_noise=noise)
    assert set(np.unique(decision.keep_weight)) <= {0.0, 1.0}
    assert decision.soft is not None
    expect_soft = sigmoid(2.0 * (decision.tau - m) + noise[0] - noise[1])
    assert np.allclose(decision.soft, expect_soft, atol=1e-12)
    assert np.array_equal(decision.keep_weight, (expect_soft > 0.5) * 1.0)


def test_training_prune_requires_noise_source():
    with pytest.raises(ValueError):
        prune(np.array([0.1, 0.9]), training=True)


def test_keep_weight_backward_matches_soft_derivative():
    rng = np.random.default_rng(8)
    m = rng.uniform(size=30)
    noise = rng.gumbel(size=(2, 30))
    tau = 0.6
    temp = 0.7
    decision = prune(m, training=True, temperature=temp, gumbel_noise=noise,
                     tau_override=tau, soft_forward=True)
    d_keep = rng.normal(size=30)
    got = decision.keep_weight_backward(d_keep)

    eps = 1e-7
    for j in range(0, 30, 7):
        up, dn = m.copy(), m.copy()
        up[j] += eps
        dn[j] -= eps
        s_up = sigmoid((2.0 * (tau - up) + noise[0] - noise[1]) / temp)
        s_dn = sigmoid((2.0 * (tau - dn) + noise[0] - noise[1]) / temp)
        num = float(((s_up - s_dn) * d_keep).sum()) / (2 * eps)
        assert num == pytest.approx(got[j], rel=1e-4, abs=1e-9)


def test_eval_keep_weight_has_no_gradient():
    decision = prune(np.linspace(0, 1, 10), training=False)
    g = decision.keep_weight_backward(np.ones(10))
    assert np.array_equal(g, np.zeros(10))


def orbit_views(n, size=24):
    views = []
    for k in range(n):
        a = -0.3 + 0.6 * k / max(n - 1, 1)
        views.append(make_camera(size=size, eye=(3 * np.sin(a), 0.0,
                                                 4 - 3 * np.cos(a)),
                                 target=(0, 0, 4), view_id=k))
    return views


def test_select_neighbor_views_nearest_and_self():
    views = orbit_views(8)
    chosen = select_neighbor_views(views, 3)
    assert chosen[0] == 3
    assert len(chosen) == K_VIEWS
    centers = np.stack([v.camera_center for v in views])
    d = np.linalg.norm(centers - centers[3], axis=1)
    assert set(chosen) == set(np.argsort(d, kind="stable")[:K_VIEWS])


def test_select_neighbor_views_needs_two():
    with pytest.raises(FewerThanKViews):
        select_neighbor_views([make_camera()], 0)


def test_view_statistics_zero_for_view_independent_scene():
    # a lambertian (degree-0) gaussian watched from a tight orbit has
    # identical color everywhere; opacity variance reflects geometry only
    views = orbit_views(6)
    cloud = stacked_cloud([0.6], [4.0], sigma=0.3)
    var_alpha, var_color = view_statistics(cloud, views, 2)
    assert var_color[0] == pytest.approx(0.0, abs=1e-20)
    assert var_alpha[0] >= 0.0


def test_view_color_uses_sh_direction():
    # a linear-in-z band flips sign when the camera moves to the far side
    cloud = stacked_cloud([0.5], [4.0])
    cloud.sh[0, 0, 2] = 1.0
    front = view_color(cloud, make_camera(eye=(0, 0, 0), target=(0, 0, 4)))
    back = view_color(cloud, make_camera(eye=(0, 0, 8), target=(0, 0, 4)))
    zonal = 0.4886025119029199
    assert front[0, 0] == pytest.approx(0.5 + zonal, abs=1e-12)
    assert back[0, 0] == pytest.approx(0.5 - zonal, abs=1e-12)
    assert np.allclose(front[0, 1:], 0.5, atol=1e-12)


def test_center_depth_lookup_tracks_projection():
    cam = make_camera(size=16)
    cloud = stacked_cloud([0.9], [4.0], sigma=0.3)
    bundle = rasterize(cloud, cam)
    depth, ok = center_depth_lookup(bundle)
    assert ok[0]
    assert depth[0] == pytest.approx(bundle.depth.data[8, 8, 0], abs=1e-12)
