"""Water model: factored grids against dense loops, trilinear queries,
image formation degeneracies and the compose adjoints."""

import math

import numpy as np
import pytest

from helpers import make_camera
from uwsplat.core import sigmoid, softplus
from uwsplat.errors import IndexOutOfRange
from uwsplat.medium import (MediumParams, compose_backward,
                            compose_underwater, forward_simulate, grid_query,
                            make_medium, make_vm_grid, medium_from_dict,
                            medium_to_dict, scatter_query_adjoint,
                            vm_components_backward, vm_raw_dense,
                            vm_reconstruct, vm_values_dense)

BBOX = (np.array([-3.0, -3.0, -3.0]), np.array([3.0, 3.0, 3.0]))


def random_grid(seed, resolution=8, rank=4, noise=0.3):
    rng = np.random.default_rng(seed)
    return make_vm_grid(resolution, rank, BBOX[0], BBOX[1],
                        np.array([0.1, 0.15, 0.2]), rng, noise=noise)


def dense_by_loops(grid):
    g, r = grid.resolution, grid.rank
    out = np.empty((3, g, g, g))
    for c in range(3):
        for i in range(g):
            for j in range(g):
                for k in range(g):
                    total = float(grid.bias[c])
                    for q in range(r):
                        total += (grid.u[c, q, i] * grid.m[c, q, j, k]
                                  * grid.v[c, q, j] * grid.w[c, q, k])
                    out[c, i, j, k] = total
    return out


def test_factored_grid_equals_dense_loops_exactly():
    grid = random_grid(0, resolution=8, rank=4)
    raw = dense_by_loops(grid)
    assert np.array_equal(vm_raw_dense(grid), raw)
    vals = vm_values_dense(grid)
    for c in range(3):
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    assert vm_reconstruct(grid, (i, j, k), c) == \
                        float(softplus(raw[c, i, j, k]))


def test_node_queries_return_node_values_exactly():
    grid = random_grid(1, resolution=5, rank=3)
    vals = vm_values_dense(grid)
    g = grid.resolution
    step = (BBOX[1] - BBOX[0]) / (g - 1)
    pts, expect = [], []
    for i in range(g):
        for j in range(g):
            for k in range(g):
                pts.append(BBOX[0] + step * np.array([i, j, k]))
                expect.append(vals[:, i, j, k])
    got, _ = grid_query(grid, np.array(pts))
    assert np.array_equal(got, np.array(expect))


def test_voxel_index_bounds_checked():
    grid = random_grid(2, resolution=4, rank=2)
    with pytest.raises(IndexOutOfRange):
        vm_reconstruct(grid, (4, 0, 0), 0)
    with pytest.raises(IndexOutOfRange):
        vm_reconstruct(grid, (0, -1, 0), 1)
    with pytest.raises(IndexOutOfRange):
        vm_reconstruct(grid, (0, 0, 0), 3)


def trilinear_by_hand(grid, p):
    vals = vm_values_dense(grid)
    g = grid.resolution
    q = (p - BBOX[0]) * (g - 1) / (BBOX[1] - BBOX[0])
    q = np.clip(q, 0.0, g - 1)
    i0 = np.minimum(np.floor(q), g - 2).astype(int)
    f = q - i0
    out = np.zeros(3)
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                wt = ((f[0] if ox else 1 - f[0])
                      * (f[1] if oy else 1 - f[1])
                      * (f[2] if oz else 1 - f[2]))
                out += wt * vals[:, i0[0] + ox, i0[1] + oy, i0[2] + oz]
    return out


def test_trilinear_interpolation_matches_naive():
    grid = random_grid(3, resolution=6, rank=2)
    rng = np.random.default_rng(4)
    pts = rng.uniform(-2.8, 2.8, size=(40, 3))
    got, _ = grid_query(grid, pts)
    expect = np.stack([trilinear_by_hand(grid, p) for p in pts])
    assert np.allclose(got, expect, atol=1e-12)


def test_queries_clamp_outside_the_box():
    grid = random_grid(5, resolution=4, rank=2)
    inside, _ = grid_query(grid, np.array([[3.0, 0.0, 0.0]]))
    outside, tape = grid_query(grid, np.array([[9.0, 0.0, 0.0]]))
    assert np.array_equal(inside, outside)
    assert not tape.unclamped[0, 0]
    assert tape.unclamped[0, 1] and tape.unclamped[0, 2]


def flat_medium(b_logit=(0.0, 0.0, 0.0)):
    """Constant fields: values equal the init everywhere (zero noise)."""
    rng = np.random.default_rng(0)
    med = make_medium(BBOX[0], BBOX[1], np.array([0.1, 0.15, 0.2]), rng,
                      resolution=4, rank=2, noise=0.0,
                      b_logit=np.array(b_logit, dtype=np.float64))
    return med


def test_grid_init_hits_requested_value():
    med = flat_medium()
    assert np.allclose(vm_values_dense(med.grid_d),
                       np.array([0.1, 0.15, 0.2])[:, None, None, None],
                       atol=1e-12)


def test_compose_zero_depth_returns_clean_image():
    med = flat_medium()
    cam = make_camera(size=8, eye=(0, 0, -3), target=(0, 0, 1))
    rng = np.random.default_rng(7)
    uri = rng.uniform(0, 1, size=(8, 8, 3))
    depth = np.zeros((8, 8))
    valid = np.ones((8, 8), dtype=bool)
    uw, _ = compose_underwater(uri, depth, valid, med, cam)
    assert np.array_equal(uw, uri)


def test_compose_huge_depth_converges_to_veiling_color():
    med = flat_medium(b_logit=(0.3, -0.2, 0.9))
    cam = make_camera(size=8, eye=(0, 0, -3), target=(0, 0, 1))
    uri = np.full((8, 8, 3), 0.7)
    depth = np.full((8, 8), 1e6)
    valid = np.ones((8, 8), dtype=bool)
    uw, _ = compose_underwater(uri, depth, valid, med, cam)
    assert np.max(np.abs(uw - sigmoid(np.array([0.3, -0.2, 0.9])))) <= 1e-6


def test_compose_invalid_pixels_take_veiling_color():
    med = flat_medium(b_logit=(0.1, 0.2, 0.3))
    cam = make_camera(size=4, eye=(0, 0, -3), target=(0, 0, 1))
    uri = np.full((4, 4, 3), 0.25)
    depth = np.full((4, 4), 2.0)
    valid = np.zeros((4, 4), dtype=bool)
    valid[0, 0] = True
    uw, _ = compose_underwater(uri, depth, valid, med, cam)
    assert np.allclose(uw[1:, :], sigmoid(np.array([0.1, 0.2, 0.3])))


def test_compose_single_pixel_hand_oracle():
    # constant beta = (0.1, 0.15, 0.2), veiling (0.5, 0.5, 0.5), z = 2:
    # out_c = uri_c * exp(-beta_c * 2) + 0.5 * (1 - exp(-beta_c * 2))
    med = flat_medium()
    cam = make_camera(size=2, eye=(0, 0, -3), target=(0, 0, 1))
    uri = np.zeros((2, 2, 3))
    uri[:] = [0.8, 0.6, 0.4]
    depth = np.full((2, 2), 2.0)
    valid = np.ones((2, 2), dtype=bool)
    uw, _ = compose_underwater(uri, depth, valid, med, cam)
    expect = [0.8 * math.exp(-0.2) + 0.5 * (1 - math.exp(-0.2)),
              0.6 * math.exp(-0.3) + 0.5 * (1 - math.exp(-0.3)),
              0.4 * math.exp(-0.4) + 0.5 * (1 - math.exp(-0.4))]
    for c in range(3):
        assert uw[0, 0, c] == pytest.approx(expect[c], abs=1e-12)


def test_forward_simulate_matches_compose():
    med = flat_medium((0.2, 0.1, -0.1))
    cam = make_camera(size=6, eye=(0, 0, -3), target=(0, 0, 1))
    rng = np.random.default_rng(9)
    uri = rng.uniform(0, 1, size=(6, 6, 3))
    depth = rng.uniform(1.0, 3.0, size=(6, 6))
    valid = rng.uniform(size=(6, 6)) > 0.2
    a = forward_simulate(uri, depth, valid, med, cam)
    b, _ = compose_underwater(uri, depth, valid, med, cam, with_tape=False)
    assert np.array_equal(a, b)


def _compose_loss(uri, depth, valid, med, cam, d_out):
    uw, _ = compose_underwater(uri, depth, valid, med, cam, with_tape=False)
    return float(np.sum(uw * d_out))


def test_compose_backward_matches_finite_differences():
    rng = np.random.default_rng(12)
    med = MediumParams(
        b_logit=rng.normal(size=3) * 0.3,
        grid_d=random_grid(13, resolution=4, rank=2, noise=0.2),
        grid_b=random_grid(14, resolution=4, rank=2, noise=0.2),
    )
    cam = make_camera(size=5, eye=(0, 0, -3), target=(0, 0, 1))
    uri = rng.uniform(0.1, 0.9, size=(5, 5, 3))
    depth = rng.uniform(1.2, 2.4, size=(5, 5))
    valid = np.ones((5, 5), dtype=bool)
    valid[0, 0] = False
    d_out = rng.normal(size=(5, 5, 3))

    uw, tape = compose_underwater(uri, depth, valid, med, cam)
    back = compose_backward(tape, med, d_out)
    eps = 1e-6

    for idx in [(1, 2, 0), (3, 3, 2), (0, 0, 1)]:
        up, dn = uri.copy(), uri.copy()
        up[idx] += eps
        dn[idx] -= eps
        num = (_compose_loss(up, depth, valid, med, cam, d_out)
               - _compose_loss(dn, depth, valid, med, cam, d_out)) / (2 * eps)
        assert num == pytest.approx(back["d_uri"][idx], abs=1e-6)

    for idx in [(2, 2), (4, 1)]:
        up, dn = depth.copy(), depth.copy()
        up[idx] += eps
        dn[idx] -= eps
        num = (_compose_loss(uri, up, valid, med, cam, d_out)
               - _compose_loss(uri, dn, valid, med, cam, d_out)) / (2 * eps)
        assert num == pytest.approx(back["d_depth"][idx], abs=1e-6)

    for c in range(3):
        up, dn = med.copy(), med.copy()
        up.b_logit[c] += eps
        dn.b_logit[c] -= eps
        num = (_compose_loss(uri, depth, valid, up, cam, d_out)
               - _compose_loss(uri, depth, valid, dn, cam, d_out)) / (2 * eps)
        assert num == pytest.approx(back["d_b_logit"][c], abs=1e-6)

    # voxel-value adjoints chain through the factor backward
    for tag, adj_key in (("grid_d", "value_adj_d"), ("grid_b", "value_adj_b")):
        grads = vm_components_backward(getattr(med, tag), back[adj_key])
        for comp in ("u", "m", "v", "w", "bias"):
            arr = getattr(getattr(med, tag), comp)
            flat_idx = (0,) * arr.ndim
            orig = arr[flat_idx]
            arr[flat_idx] = orig + eps
            up_v = _compose_loss(uri, depth, valid, med, cam, d_out)
            arr[flat_idx] = orig - eps
            dn_v = _compose_loss(uri, depth, valid, med, cam, d_out)
            arr[flat_idx] = orig
            num = (up_v - dn_v) / (2 * eps)
            assert num == pytest.approx(grads[comp][flat_idx], abs=1e-6), \
                f"{tag}.{comp}"


def test_scatter_adjoint_is_transpose_of_query():
    grid = random_grid(20, resolution=5, rank=2)
    rng = np.random.default_rng(21)
    pts = rng.uniform(-2.5, 2.5, size=(7, 3))
    vals, tape = grid_query(grid, pts)
    d_vals = rng.normal(size=(7, 3))
    adj = scatter_query_adjoint(grid, tape, d_vals)
    # <query(values), d_vals> == <values, scatter(d_vals)>
    dense = vm_values_dense(grid)
    assert float(np.sum(vals * d_vals)) == \
        pytest.approx(float(np.sum(dense * adj)), rel=1e-12)


def test_vm_components_backward_matches_finite_differences():
    grid = random_grid(22, resolution=4, rank=3, noise=0.25)
    rng = np.random.default_rng(23)
    adj = rng.normal(size=(3, 4, 4, 4))
    grads = vm_components_backward(grid, adj)

    def loss():
        return float(np.sum(vm_values_dense(grid) * adj))

    eps = 1e-6
    for comp in ("u", "m", "v", "w", "bias"):
        arr = getattr(grid, comp)
        for idx in [np.unravel_index(0, arr.shape),
                    np.unravel_index(arr.size - 1, arr.shape)]:
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss()
            arr[idx] = orig - eps
            dn = loss()
            arr[idx] = orig
            assert (up - dn) / (2 * eps) == \
                pytest.approx(grads[comp][idx], abs=1e-6), comp


def test_medium_serialization_round_trip():
    rng = np.random.default_rng(30)
    med = MediumParams(
        b_logit=rng.normal(size=3),
        grid_d=random_grid(31, resolution=4, rank=2),
        grid_b=random_grid(32, resolution=4, rank=2),
    )
    clone = medium_from_dict(medium_to_dict(med))
    assert np.allclose(clone.b_logit, med.b_logit, atol=1e-7)
    assert np.allclose(vm_values_dense(clone.grid_d),
                       vm_values_dense(med.grid_d), atol=1e-6)
    assert clone.grid_b.rank == 2 and clone.grid_b.resolution == 4


def test_medium_copy_is_deep():
    med = flat_medium()
    clone = med.copy()
    clone.b_logit[0] = 9.0
    clone.grid_d.u[0, 0, 0] = 9.0
    assert med.b_logit[0] == 0.0
    assert med.grid_d.u[0, 0, 0] == 0.0
