"""Rasterizer: projection geometry, culling, tile blending against the
per-pixel oracle, and the blend/projection adjoints against finite
differences."""

import numpy as np
import pytest

from helpers import brute_blend, make_camera, random_cloud
from uwsplat.core import GaussianCloud, SH_C0, sigmoid
from uwsplat.raster import (LOWPASS, NEAR_PLANE, ProjectedSplats,
                            RasterSession, project_gaussian, rasterize,
                            render_depth)


def single_gaussian_cloud(mean, sigma=0.2, opacity_logit=1.2,
                          color=(0.6, 0.3, 0.8)):
    means = np.array([mean], dtype=np.float64)
    rotations = np.array([[1.0, 0.0, 0.0, 0.0]])
    log_scales = np.log(np.full((1, 3), sigma))
    opacity_logits = np.array([opacity_logit])
    sh = np.zeros((1, 3, 16))
    sh[0, :, 0] = np.array(color) / SH_C0
    return GaussianCloud(means, rotations, log_scales, opacity_logits, sh)


def test_projection_pinhole_center():
    cam = make_camera(size=32)
    cloud = single_gaussian_cloud([0.5, -0.25, 4.0])
    proj = ProjectedSplats(cloud, cam)
    assert len(proj) == 1
    fx, fy = cam.focal
    cx, cy = cam.principal
    # camera at origin looking down +z with identity-ish rotation
    t = cloud.means[0] @ cam.rotation.T + cam.translation
    assert proj.mean2d[0, 0] == pytest.approx(fx * t[0] / t[2] + cx, abs=1e-9)
    assert proj.mean2d[0, 1] == pytest.approx(fy * t[1] / t[2] + cy, abs=1e-9)
    assert proj.depth[0] == pytest.approx(
        np.linalg.norm(cloud.means[0] - cam.camera_center), abs=1e-12)


def test_projection_adds_lowpass_floor():
    cam = make_camera(size=32)
    cloud = single_gaussian_cloud([0.0, 0.0, 4.0], sigma=1e-5)
    proj = ProjectedSplats(cloud, cam)
    assert proj.cov2d[0, 0, 0] >= LOWPASS
    assert proj.cov2d[0, 1, 1] >= LOWPASS


def test_near_plane_cull():
    cam = make_camera(size=16)
    cloud = single_gaussian_cloud([0.0, 0.0, NEAR_PLANE / 2])
    assert len(ProjectedSplats(cloud, cam)) == 0
    assert project_gaussian(cloud.gaussian(0), cam) is None


def test_behind_camera_cull():
    cam = make_camera(size=16)
    cloud = single_gaussian_cloud([0.0, 0.0, -3.0])
    assert len(ProjectedSplats(cloud, cam)) == 0


def test_far_offscreen_cull():
    cam = make_camera(size=16)
    cloud = single_gaussian_cloud([50.0, 0.0, 4.0], sigma=0.05)
    assert len(ProjectedSplats(cloud, cam)) == 0


def test_splats_sorted_by_camera_distance():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 40)
    cam = make_camera(size=16)
    proj = ProjectedSplats(cloud, cam)
    assert np.all(np.diff(proj.depth) >= 0.0)
    # stable: equal-depth entries keep index order
    dup = single_gaussian_cloud([0.3, 0.1, 4.0])
    both = dup.append(dup.copy())
    p2 = ProjectedSplats(both, cam)
    assert list(p2.cloud_index) == [0, 1]


def test_empty_cloud_rejected():
    cam = make_camera(size=8)
    cloud = random_cloud(np.random.default_rng(0), 3).subset(np.array([], dtype=int))
    with pytest.raises(ValueError):
        ProjectedSplats(cloud, cam)


def test_rasterize_empty_frame_flag():
    cam = make_camera(size=8)
    cloud = single_gaussian_cloud([0.0, 0.0, -5.0])
    bundle = rasterize(cloud, cam)
    assert bundle.empty_frame
    assert not bundle.valid.any()
    assert np.array_equal(bundle.uri.data, np.zeros((8, 8, 3)))
    assert np.array_equal(bundle.final_transmittance, np.ones((8, 8)))


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_tile_blend_matches_per_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 6, spread=0.7)
    cam = make_camera(size=16)
    session = RasterSession(cloud, cam)
    aux = session.proj.depth
    result = session.blend(aux=aux)
    color, aux_img, final_t = brute_blend(session.proj, cam, aux=aux)
    assert np.max(np.abs(result.color - color)) <= 1e-12
    assert np.max(np.abs(result.aux - aux_img)) <= 1e-12
    assert np.max(np.abs(result.final_transmittance - final_t)) <= 1e-12


def test_blend_respects_per_gaussian_weights():
    rng = np.random.default_rng(9)
    cloud = random_cloud(rng, 5, spread=0.6)
    cam = make_camera(size=16)
    session = RasterSession(cloud, cam)
    weights = rng.uniform(0.0, 1.0, len(cloud))
    weights[0] = 0.0
    result = session.blend(weights=weights)
    color, _, _ = brute_blend(session.proj, cam, weights=weights)
    assert np.max(np.abs(result.color - color)) <= 1e-12


def test_zero_weight_gaussian_leaves_no_trace():
    cam = make_camera(size=16)
    base = single_gaussian_cloud([0.0, 0.0, 4.0], color=(0.9, 0.1, 0.1))
    extra = single_gaussian_cloud([0.1, 0.05, 3.0], color=(0.1, 0.9, 0.1))
    both = base.append(extra)
    w = np.array([1.0, 0.0])
    with_masked = rasterize(both, cam, per_gaussian_weight=w)
    alone = rasterize(base, cam)
    assert np.allclose(with_masked.uri.data, alone.uri.data, atol=1e-15)


def test_transmittance_floor_stops_blending():
    cam = make_camera(size=8)
    # a stack of almost opaque splats at the same pixel: far ones go dead
    parts = [single_gaussian_cloud([0.0, 0.0, 2.0 + 0.2 * i], sigma=0.4,
                                   opacity_logit=6.0) for i in range(40)]
    cloud = parts[0]
    for p in parts[1:]:
        cloud = cloud.append(p)
    bundle = rasterize(cloud, cam)
    # the center pixel saturates after a few splats; the rest are dead there
    center = 4 * 8 + 4
    at_center = bundle.pairs["pixel"] == center
    assert 0 < np.count_nonzero(at_center) < 10
    assert bundle.final_transmittance[4, 4] < 1e-4


def test_recorded_pairs_reconstruct_the_image():
    rng = np.random.default_rng(13)
    cloud = random_cloud(rng, 7, spread=0.6)
    cam = make_camera(size=16)
    bundle = rasterize(cloud, cam)
    h, w = cam.height, cam.width
    recon = np.zeros((h * w, 3))
    rows = bundle.pairs["splat_row"]
    np.add.at(recon, bundle.pairs["pixel"],
              bundle.pairs["weight"][:, None] * bundle.splats.rgb[rows])
    assert np.allclose(recon.reshape(h, w, 3), bundle.uri.data, atol=1e-12)


def test_valid_mask_tracks_accumulated_weight():
    # 32 px frame = 2x2 tiles; a tiny corner splat leaves other tiles
    # untouched so their pixels stay invalid
    cam = make_camera(size=32)
    cloud = single_gaussian_cloud([-1.2, -1.2, 4.0], sigma=0.02)
    bundle = rasterize(cloud, cam)
    assert bundle.valid.any()
    assert not bundle.valid.all()
    wsum = bundle.result.weight_sum
    assert np.array_equal(bundle.valid, wsum > 0.0)


def test_render_depth_downweights_uncertain_gaussians():
    cam = make_camera(size=16)
    cloud = single_gaussian_cloud([0.0, 0.0, 4.0], sigma=0.3)
    bundle = rasterize(cloud, cam)
    full = render_depth(bundle, np.array([0.0]))
    half = render_depth(bundle, np.array([0.5]))
    gone = render_depth(bundle, np.array([1.0]))
    assert np.allclose(half.data, 0.5 * full.data, atol=1e-12)
    assert np.allclose(gone.data, 0.0, atol=1e-15)


def _render_loss(cloud, cam, d_color, d_aux_img, weights=None):
    session = RasterSession(cloud, cam)
    aux = session.proj.depth
    result = session.blend(weights=weights, aux=aux)
    return float(np.sum(result.color * d_color)
                 + np.sum(result.aux * d_aux_img))


def test_full_raster_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    cloud = random_cloud(rng, 4, spread=0.45, sigma_range=(0.15, 0.3),
                         opacity_range=(-0.8, 0.8))
    cam = make_camera(size=16)
    d_color = rng.normal(size=(16, 16, 3))
    d_aux_img = rng.normal(size=(16, 16))

    session = RasterSession(cloud, cam)
    proj = session.proj
    aux = proj.depth
    result = session.blend(aux=aux)
    adj = session.blend_backward(result, d_color, d_aux=d_aux_img)
    adj.d_depth += adj.d_aux          # aux payload was the depth itself
    grads = session.projection_backward(adj)

    eps = 1e-6
    checks = {
        "means": cloud.means,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "sh": cloud.sh,
    }
    for name, arr in checks.items():
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            up = _render_loss(cloud, cam, d_color, d_aux_img)
            flat[j] = orig - eps
            dn = _render_loss(cloud, cam, d_color, d_aux_img)
            flat[j] = orig
            num = (up - dn) / (2 * eps)
            ana = grads[name].reshape(-1)[j]
            assert num == pytest.approx(ana, abs=2e-5), (name, j)


def test_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(22)
    cloud = random_cloud(rng, 4, spread=0.45, sigma_range=(0.15, 0.3))
    cam = make_camera(size=16)
    d_color = rng.normal(size=(16, 16, 3))
    d_aux_img = np.zeros((16, 16))
    weights = rng.uniform(0.3, 0.9, len(cloud))

    session = RasterSession(cloud, cam)
    result = session.blend(weights=weights, aux=session.proj.depth)
    adj = session.blend_backward(result, d_color)
    d_weight_cloud = session.projection_backward(adj)["d_weight"]

    eps = 1e-6
    for j in range(len(cloud)):
        up, dn = weights.copy(), weights.copy()
        up[j] += eps
        dn[j] -= eps
        num = (_render_loss(cloud, cam, d_color, d_aux_img, weights=up)
               - _render_loss(cloud, cam, d_color, d_aux_img, weights=dn)) \
            / (2 * eps)
        assert num == pytest.approx(d_weight_cloud[j], abs=2e-5), j
