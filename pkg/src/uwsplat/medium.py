"""Learnable scattering medium: factored attenuation/backscatter grids plus
a global veiling color, and the underwater image formation itself.

Each voxel grid stores per-channel rank-R components: a vector along the
first axis, a matrix over the remaining two axes and two modulation vectors,
so a G^3 field costs O(R(G + G^2)) parameters.  Voxel values pass through a
softplus so extinction coefficients stay positive.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

from .core import sigmoid, softplus, inverse_softplus
from .errors import IndexOutOfRange

CHANNELS = 3
BETA_PRIOR = np.array([0.1, 0.15, 0.2])   # RGB water attenuation prior


@dataclass
class VMGrid:
    """Vector-matrix factored voxel grid over an axis aligned box."""

    u: np.ndarray        # (3, R, G)   first-axis vectors
    m: np.ndarray        # (3, R, G, G) matrix over axes 2 and 3
    v: np.ndarray        # (3, R, G)   modulation along axis 2
    w: np.ndarray        # (3, R, G)   modulation along axis 3
    bias: np.ndarray     # (3,)        per channel offset before softplus
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    @property
    def resolution(self):
        return self.u.shape[2]

    @property
    def rank(self):
        return self.u.shape[1]

    def component_arrays(self):
        return {"u": self.u, "m": self.m, "v": self.v, "w": self.w,
                "bias": self.bias}

    def component_squared_norm(self):
        """Sum of squares of the factor components (bias excluded)."""
        return float(np.sum(self.u ** 2) + np.sum(self.m ** 2)
                     + np.sum(self.v ** 2) + np.sum(self.w ** 2))

    def copy(self):
        return VMGrid(self.u.copy(), self.m.copy(), self.v.copy(),
                      self.w.copy(), self.bias.copy(),
                      self.bbox_min.copy(), self.bbox_max.copy())


def make_vm_grid(resolution, rank, bbox_min, bbox_max, init_value, rng,
                 noise=0.01):
    """Create a grid whose initial post-softplus value is init_value.

    Components start as small gaussian noise (sigma = noise); the bias
    carries the prior so the product terms only perturb it.
    """
    init_value = np.asarray(init_value, dtype=np.float64)
    shape_v = (CHANNELS, rank, resolution)
    grid = VMGrid(
        u=rng.normal(0.0, noise, size=shape_v),
        m=rng.normal(0.0, noise, size=(CHANNELS, rank, resolution, resolution)),
        v=rng.normal(0.0, noise, size=shape_v),
        w=rng.normal(0.0, noise, size=shape_v),
        bias=inverse_softplus(init_value).astype(np.float64),
        bbox_min=np.asarray(bbox_min, dtype=np.float64).copy(),
        bbox_max=np.asarray(bbox_max, dtype=np.float64).copy(),
    )
    return grid


def vm_raw_dense(grid: VMGrid):
    """Pre-softplus field at every voxel, shape (3, G, G, G).

    Ranks accumulate in ascending order with left-to-right factor products
    so every voxel is bit-identical to vm_reconstruct.
    """
    g = grid.resolution
    raw = np.broadcast_to(grid.bias[:, None, None, None],
                          (CHANNELS, g, g, g)).copy()
    for r in range(grid.rank):
        raw += (grid.u[:, r, :, None, None] * grid.m[:, r, None, :, :]
                * grid.v[:, r, None, :, None] * grid.w[:, r, None, None, :])
    return raw


def vm_values_dense(grid: VMGrid):
    return softplus(vm_raw_dense(grid))


def vm_reconstruct(grid: VMGrid, index, channel):
    """Value of one voxel from its factor components.

    The rank sum runs in ascending order so the result is bit reproducible
    against a plain reference loop.
    """
    i, j, k = index
    g = grid.resolution
    if not (0 <= i < g and 0 <= j < g and 0 <= k < g):
        raise IndexOutOfRange(f"voxel index {index} outside grid of size {g}")
    if not 0 <= channel < CHANNELS:
        raise IndexOutOfRange(f"channel {channel} out of range")
    total = float(grid.bias[channel])
    for r in range(grid.rank):
        total += (grid.u[channel, r, i] * grid.m[channel, r, j, k]
                  * grid.v[channel, r, j] * grid.w[channel, r, k])
    return float(softplus(total))


@dataclass
class QueryTape:
    points: np.ndarray        # (P, 3)
    lin_index: np.ndarray     # (P, 8) linear voxel index per corner
    weights: np.ndarray       # (P, 8) trilinear weights
    corner_vals: np.ndarray   # (3, P, 8) post-softplus corner values
    d_weights: np.ndarray     # (P, 8, 3) dweight/dfrac per axis
    scale: np.ndarray         # (3,) fractional units per world unit
    unclamped: np.ndarray     # (P, 3) False where the coordinate was clamped


_CORNER_OFFSETS = np.array(
    [(ox, oy, oz) for ox in (0, 1) for oy in (0, 1) for oz in (0, 1)],
    dtype=np.int64)


def grid_query(grid: VMGrid, points, values=None):
    """Trilinear interpolation of the per-channel voxel values at points.

    Returns (vals (P, 3), QueryTape).  Coordinates clamp to the box; a
    precomputed dense value array can be passed to avoid reassembly.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g = grid.resolution
    if values is None:
        values = vm_values_dense(grid)
    extent = grid.bbox_max - grid.bbox_min
    scale = (g - 1) / extent
    p = (pts - grid.bbox_min) * scale
    unclamped = (p >= 0.0) & (p <= g - 1)
    p = np.clip(p, 0.0, g - 1)
    i0 = np.minimum(np.floor(p), g - 2).astype(np.int64)
    f = p - i0

    n = pts.shape[0]
    weights = np.empty((n, 8))
    d_weights = np.empty((n, 8, 3))
    lin = np.empty((n, 8), dtype=np.int64)
    one_f = 1.0 - f
    for c, (ox, oy, oz) in enumerate(_CORNER_OFFSETS):
        wx = f[:, 0] if ox else one_f[:, 0]
        wy = f[:, 1] if oy else one_f[:, 1]
        wz = f[:, 2] if oz else one_f[:, 2]
        weights[:, c] = wx * wy * wz
        d_weights[:, c, 0] = (1.0 if ox else -1.0) * wy * wz
        d_weights[:, c, 1] = (1.0 if oy else -1.0) * wx * wz
        d_weights[:, c, 2] = (1.0 if oz else -1.0) * wx * wy
        lin[:, c] = ((i0[:, 0] + ox) * g + (i0[:, 1] + oy)) * g + (i0[:, 2] + oz)

    corner_vals = values.reshape(CHANNELS, -1)[:, lin]      # (3, P, 8)
    vals = np.einsum('cpk,pk->pc', corner_vals, weights)
    tape = QueryTape(pts, lin, weights, corner_vals, d_weights,
                     scale, unclamped)
    return vals, tape


def query_spatial_gradient(tape: QueryTape):
    """d value / d world position, shape (P, 3 channels, 3 axes).

    Zero along axes where the query point was clamped to the box.
    """
    grad = np.einsum('cpk,pka->pca', tape.corner_vals, tape.d_weights)
    grad *= tape.scale[None, None, :]
    grad *= tape.unclamped[:, None, :]
    return grad


def scatter_query_adjoint(grid: VMGrid, tape: QueryTape, d_vals,
                          out=None):
    """Accumulate dL/d(voxel value) for the corners touched by a query.

    d_vals has shape (P, 3); returns / updates a dense (3, G, G, G) array.
    """
    g = grid.resolution
    if out is None:
        out = np.zeros((CHANNELS, g, g, g))
    flat = out.reshape(CHANNELS, -1)
    contrib = d_vals.T[:, :, None] * tape.weights[None, :, :]   # (3, P, 8)
    for c in range(CHANNELS):
        np.add.at(flat[c], tape.lin_index.ravel(), contrib[c].ravel())
    return out


def vm_components_backward(grid: VMGrid, value_adjoint, raw=None):
    """Map a dense dL/d(voxel value) array to component gradients.

    raw is the pre-softplus dense field; it is recomputed when absent.
    """
    if raw is None:
        raw = vm_raw_dense(grid)
    raw_adj = value_adjoint * sigmoid(raw)
    t = grid.m * grid.v[:, :, :, None] * grid.w[:, :, None, :]
    d_u = np.einsum('cijk,crjk->cri', raw_adj, t)
    pre = np.einsum('cijk,cri->crjk', raw_adj, grid.u)
    d_m = pre * grid.v[:, :, :, None] * grid.w[:, :, None, :]
    d_v = np.einsum('crjk->crj', pre * grid.m * grid.w[:, :, None, :])
    d_w = np.einsum('crjk->crk', pre * grid.m * grid.v[:, :, :, None])
    d_bias = raw_adj.sum(axis=(1, 2, 3))
    return {"u": d_u, "m": d_m, "v": d_v, "w": d_w, "bias": d_bias}


# ---------------------------------------------------------------------------
# medium parameters and the image formation model
# ---------------------------------------------------------------------------


@dataclass
class MediumParams:
    """Veiling color logits plus attenuation (direct) and backscatter grids."""

    b_logit: np.ndarray       # (3,)
    grid_d: VMGrid
    grid_b: VMGrid

    @property
    def b_infinity(self):
        return sigmoid(self.b_logit)

    def copy(self):
        return MediumParams(self.b_logit.copy(), self.grid_d.copy(),
                            self.grid_b.copy())


def make_medium(bbox_min, bbox_max, beta_init, rng, resolution=64, rank=16,
                noise=0.01, b_logit=None):
    if b_logit is None:
        b_logit = np.zeros(3)
    return MediumParams(
        b_logit=np.asarray(b_logit, dtype=np.float64).copy(),
        grid_d=make_vm_grid(resolution, rank, bbox_min, bbox_max, beta_init,
                            rng, noise),
        grid_b=make_vm_grid(resolution, rank, bbox_min, bbox_max, beta_init,
                            rng, noise),
    )


@dataclass
class ComposeTape:
    valid_flat: np.ndarray      # flat indices of valid pixels
    invalid_flat: np.ndarray
    z: np.ndarray               # (P,) depth at valid pixels
    uri: np.ndarray             # (P, 3) clean radiance at valid pixels
    e_d: np.ndarray             # (P, 3)
    e_b: np.ndarray             # (P, 3)
    beta_d: np.ndarray          # (P, 3)
    beta_b: np.ndarray          # (P, 3)
    grad_d_dir: np.ndarray      # (P, 3) directional derivative of beta_d
    grad_b_dir: np.ndarray
    tape_d: QueryTape
    tape_b: QueryTape
    shape: tuple


def compose_underwater(uri, depth, valid, medium: MediumParams, cam,
                       values_d=None, values_b=None, with_tape=True):
    """Underwater image from clean radiance, depth and the medium.

    uri: (H, W, 3); depth: (H, W) distance along the pixel ray; valid: bool
    mask, invalid pixels take the pure veiling color.  Returns (image,
    ComposeTape or None).
    """
    uri = np.asarray(uri, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[:, :, 0]
    valid = np.asarray(valid, dtype=bool)
    h, w = depth.shape
    if uri.shape != (h, w, 3) or valid.shape != (h, w):
        raise ValueError("compose inputs disagree in shape")

    b_inf = medium.b_infinity
    out = np.empty((h, w, 3))
    out[~valid] = b_inf

    flat_valid = np.flatnonzero(valid.ravel())
    flat_invalid = np.flatnonzero(~valid.ravel())
    if flat_valid.size == 0:
        tape = ComposeTape(flat_valid, flat_invalid, np.zeros(0),
                           np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                           np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                           np.zeros((0, 3)), None, None, (h, w))
        return out, (tape if with_tape else None)

    rays = cam.ray_directions().reshape(-1, 3)[flat_valid]
    z = depth.ravel()[flat_valid]
    pts = cam.camera_center[None, :] + rays * z[:, None]

    beta_d, tape_d = grid_query(medium.grid_d, pts, values=values_d)
    beta_b, tape_b = grid_query(medium.grid_b, pts, values=values_b)
    e_d = np.exp(-beta_d * z[:, None])
    e_b = np.exp(-beta_b * z[:, None])
    uri_v = uri.reshape(-1, 3)[flat_valid]
    out.reshape(-1, 3)[flat_valid] = uri_v * e_d + b_inf * (1.0 - e_b)

    if not with_tape:
        return out, None
    grad_d = query_spatial_gradient(tape_d)
    grad_b = query_spatial_gradient(tape_b)
    tape = ComposeTape(
        flat_valid, flat_invalid, z, uri_v, e_d, e_b, beta_d, beta_b,
        np.einsum('pca,pa->pc', grad_d, rays),
        np.einsum('pca,pa->pc', grad_b, rays),
        tape_d, tape_b, (h, w))
    return out, tape


def compose_backward(tape: ComposeTape, medium: MediumParams, d_out):
    """Adjoint of compose_underwater.

    Returns a dict with d_uri (H, W, 3), d_depth (H, W), d_b_logit (3,) and
    dense per-grid value adjoints value_adj_d / value_adj_b.
    """
    h, w = tape.shape
    d_out = np.asarray(d_out, dtype=np.float64).reshape(-1, 3)
    g_valid = d_out[tape.valid_flat]

    b_inf = medium.b_infinity
    d_uri = np.zeros((h * w, 3))
    d_uri[tape.valid_flat] = g_valid * tape.e_d

    # d/d b_infinity: (1 - e_b) on valid pixels, identity on invalid ones.
    d_binf = (g_valid * (1.0 - tape.e_b)).sum(axis=0)
    d_binf += d_out[tape.invalid_flat].sum(axis=0)
    d_b_logit = d_binf * b_inf * (1.0 - b_inf)

    z = tape.z[:, None]
    d_beta_d = g_valid * (-z * tape.uri * tape.e_d)
    d_beta_b = g_valid * (z * b_inf * tape.e_b)

    dz_per_c = (-tape.uri * tape.e_d * (tape.beta_d + z * tape.grad_d_dir)
                + b_inf * tape.e_b * (tape.beta_b + z * tape.grad_b_dir))
    d_depth = np.zeros(h * w)
    d_depth[tape.valid_flat] = (g_valid * dz_per_c).sum(axis=1)

    out = {
        "d_uri": d_uri.reshape(h, w, 3),
        "d_depth": d_depth.reshape(h, w),
        "d_b_logit": d_b_logit,
    }
    if tape.tape_d is not None:
        out["value_adj_d"] = scatter_query_adjoint(medium.grid_d, tape.tape_d,
                                                   d_beta_d)
        out["value_adj_b"] = scatter_query_adjoint(medium.grid_b, tape.tape_b,
                                                   d_beta_b)
    else:
        g = medium.grid_d.resolution
        out["value_adj_d"] = np.zeros((CHANNELS, g, g, g))
        out["value_adj_b"] = np.zeros((CHANNELS, g, g, g))
    return out


def forward_simulate(clean, depth, valid, medium: MediumParams, cam):
    """Degrade a clean image through the medium (no tape, same arithmetic)."""
    out, _ = compose_underwater(clean, depth, valid, medium, cam,
                                with_tape=False)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _encode(arr):
    return base64.b64encode(
        np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode(text, shape):
    data = np.frombuffer(base64.b64decode(text.encode("ascii")), dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def _grid_to_dict(grid: VMGrid):
    return {
        "resolution": grid.resolution,
        "rank": grid.rank,
        "u": _encode(grid.u),
        "m": _encode(grid.m),
        "v": _encode(grid.v),
        "w": _encode(grid.w),
        "bias": _encode(grid.bias),
        "bbox_min": grid.bbox_min.tolist(),
        "bbox_max": grid.bbox_max.tolist(),
    }


def _grid_from_dict(d):
    g, r = int(d["resolution"]), int(d["rank"])
    return VMGrid(
        u=_decode(d["u"], (CHANNELS, r, g)),
        m=_decode(d["m"], (CHANNELS, r, g, g)),
        v=_decode(d["v"], (CHANNELS, r, g)),
        w=_decode(d["w"], (CHANNELS, r, g)),
        bias=_decode(d["bias"], (CHANNELS,)),
        bbox_min=np.array(d["bbox_min"], dtype=np.float64),
        bbox_max=np.array(d["bbox_max"], dtype=np.float64),
    )


def medium_to_dict(medium: MediumParams):
    return {
        "b_infinity": medium.b_infinity.tolist(),
        "b_logit": medium.b_logit.tolist(),
        "grid_d": _grid_to_dict(medium.grid_d),
        "grid_b": _grid_to_dict(medium.grid_b),
    }


def medium_from_dict(d):
    return MediumParams(
        b_logit=np.array(d["b_logit"], dtype=np.float64),
        grid_d=_grid_from_dict(d["grid_d"]),
        grid_b=_grid_from_dict(d["grid_b"]),
    )
