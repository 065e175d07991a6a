"""Core data types and math shared by every stage of the pipeline.

Gaussian primitives are stored as structure-of-arrays so the optimizer can
treat each attribute as one parameter tensor.  All math is float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Real spherical harmonics constants, conventional band ordering.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_COEFFS = 16  # degree 3 -> (3 + 1)^2 basis functions per channel


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def softplus(x):
    # log(1 + e^x) computed without overflow for large |x|.
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    # x such that softplus(x) = y, valid for y > 0.
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# quaternions and covariances
# ---------------------------------------------------------------------------


def quat_to_rotation(quats):
    """Rotation matrices for unit quaternions in (w, x, y, z) order.

    Accepts (..., 4); the input is normalized internally.
    """
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_backward(quats, d_R):
    """Adjoint of quat_to_rotation: maps dL/dR to dL/dq (raw, unnormalized q)."""
    q = np.asarray(quats, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    g = np.asarray(d_R, dtype=np.float64)

    def e(i, j):
        return g[..., i, j]

    # dR/dw .. dR/dz contracted with the upstream gradient.
    dw = 2 * (-z * e(0, 1) + y * e(0, 2) + z * e(1, 0) - x * e(1, 2)
              - y * e(2, 0) + x * e(2, 1))
    dx = 2 * (y * e(0, 1) + z * e(0, 2) + y * e(1, 0) - 2 * x * e(1, 1)
              - w * e(1, 2) + z * e(2, 0) + w * e(2, 1) - 2 * x * e(2, 2))
    dy = 2 * (-2 * y * e(0, 0) + x * e(0, 1) + w * e(0, 2) + x * e(1, 0)
              + z * e(1, 2) - w * e(2, 0) + z * e(2, 1) - 2 * y * e(2, 2))
    dz = 2 * (-2 * z * e(0, 0) - w * e(0, 1) + x * e(0, 2) + w * e(1, 0)
              - 2 * z * e(1, 1) + y * e(1, 2) + x * e(2, 0) + y * e(2, 1))
    d_qh = np.stack([dw, dx, dy, dz], axis=-1)
    # Through the normalization q_hat = q / |q|.
    dot = np.sum(d_qh * qh, axis=-1, keepdims=True)
    return (d_qh - qh * dot) / norm


def covariance_from_params(rotation, log_scale):
    """3x3 world covariance R S S^T R^T from a quaternion and log scales.

    Positive semidefiniteness holds by construction for any inputs.
    """
    R = quat_to_rotation(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_backward(rotation, log_scale, d_cov):
    """Adjoint of covariance_from_params.

    Returns (dL/d_rotation, dL/d_log_scale) for upstream gradient d_cov,
    which does not need to be symmetric.
    """
    R = quat_to_rotation(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    G = np.asarray(d_cov, dtype=np.float64)
    d_M = (G + np.swapaxes(G, -1, -2)) @ M
    d_R = d_M * s[..., None, :]
    # S is diagonal, so only the matching diagonal of R^T dM contributes.
    d_s = np.einsum('...ki,...ki->...i', R, d_M)
    d_log_scale = d_s * s
    d_rot = rotation_backward(rotation, d_R)
    return d_rot, d_log_scale


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis(dirs):
    """Degree-3 real SH basis evaluated at unit directions, shape (..., 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    b = np.empty(d.shape[:-1] + (SH_COEFFS,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b[..., 4] = SH_C2[0] * xy
    b[..., 5] = SH_C2[1] * yz
    b[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * xz
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    b[..., 10] = SH_C3[1] * xy * z
    b[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    b[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_grad(dirs):
    """Jacobian of the basis w.r.t. the direction, shape (..., 16, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(d.shape[:-1] + (SH_COEFFS, 3), dtype=np.float64)
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    g[..., 4, 0] = SH_C2[0] * y
    g[..., 4, 1] = SH_C2[0] * x
    g[..., 5, 1] = SH_C2[1] * z
    g[..., 5, 2] = SH_C2[1] * y
    g[..., 6, 0] = SH_C2[2] * (-2 * x)
    g[..., 6, 1] = SH_C2[2] * (-2 * y)
    g[..., 6, 2] = SH_C2[2] * (4 * z)
    g[..., 7, 0] = SH_C2[3] * z
    g[..., 7, 2] = SH_C2[3] * x
    g[..., 8, 0] = SH_C2[4] * (2 * x)
    g[..., 8, 1] = SH_C2[4] * (-2 * y)
    xx, yy, zz = x * x, y * y, z * z
    g[..., 9, 0] = SH_C3[0] * 6 * x * y
    g[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
    g[..., 9, 2] = zero
    g[..., 10, 0] = SH_C3[1] * y * z
    g[..., 10, 1] = SH_C3[1] * x * z
    g[..., 10, 2] = SH_C3[1] * x * y
    g[..., 11, 0] = SH_C3[2] * (-2 * x * y)
    g[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
    g[..., 11, 2] = SH_C3[2] * (8 * y * z)
    g[..., 12, 0] = SH_C3[3] * (-6 * x * z)
    g[..., 12, 1] = SH_C3[3] * (-6 * y * z)
    g[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
    g[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
    g[..., 13, 1] = SH_C3[4] * (-2 * x * y)
    g[..., 13, 2] = SH_C3[4] * (8 * x * z)
    g[..., 14, 0] = SH_C3[5] * (2 * x * z)
    g[..., 14, 1] = SH_C3[5] * (-2 * y * z)
    g[..., 14, 2] = SH_C3[5] * (xx - yy)
    g[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
    g[..., 15, 1] = SH_C3[6] * (-6 * x * y)
    g[..., 15, 2] = zero
    return g


def sh_eval(coeffs, dirs):
    """Evaluate SH color: coeffs (..., 3, 16) dotted with the basis at dirs.

    Returns the raw per-channel value; callers clamp at composition time.
    """
    b = sh_basis(dirs)
    return np.einsum('...ck,...k->...c', np.asarray(coeffs, dtype=np.float64), b)


# ---------------------------------------------------------------------------
# gaussians
# ---------------------------------------------------------------------------


@dataclass
class Gaussian3D:
    """A single anisotropic gaussian primitive."""

    mean: np.ndarray                 # (3,)
    rotation: np.ndarray             # (4,) quaternion, w first
    log_scale: np.ndarray            # (3,)
    opacity_logit: float
    sh_coeffs: np.ndarray            # (3, 16)

    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    def covariance(self):
        return covariance_from_params(self.rotation, self.log_scale)


class GaussianCloud:
    """Structure-of-arrays container for the whole primitive set."""

    def __init__(self, means, rotations, log_scales, opacity_logits, sh,
                 generation_tags=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(rotations, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(
            np.asarray(opacity_logits, dtype=np.float64))
        self.sh = np.asarray(sh, dtype=np.float64).reshape(-1, 3, SH_COEFFS)
        n = self.means.shape[0]
        if generation_tags is None:
            generation_tags = np.zeros(n, dtype=np.int64)
        self.generation_tags = np.asarray(generation_tags, dtype=np.int64)
        self._check()

    def _check(self):
        n = len(self)
        assert self.rotations.shape == (n, 4)
        assert self.log_scales.shape == (n, 3)
        assert self.opacity_logits.shape == (n,)
        assert self.sh.shape == (n, 3, SH_COEFFS)
        assert self.generation_tags.shape == (n,)

    def __len__(self):
        return self.means.shape[0]

    @classmethod
    def from_gaussians(cls, gaussians):
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=np.stack([g.sh_coeffs for g in gaussians]),
        )

    def gaussian(self, i) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh[i].copy(),
        )

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def covariances(self):
        return covariance_from_params(self.rotations, self.log_scales)

    def subset(self, mask_or_idx) -> "GaussianCloud":
        return GaussianCloud(
            self.means[mask_or_idx],
            self.rotations[mask_or_idx],
            self.log_scales[mask_or_idx],
            self.opacity_logits[mask_or_idx],
            self.sh[mask_or_idx],
            self.generation_tags[mask_or_idx],
        )

    def copy(self) -> "GaussianCloud":
        # subset(slice) would alias the arrays; a copy must own its data
        return GaussianCloud(
            self.means.copy(), self.rotations.copy(),
            self.log_scales.copy(), self.opacity_logits.copy(),
            self.sh.copy(), self.generation_tags.copy(),
        )

    def append(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
            np.concatenate([self.generation_tags, other.generation_tags]),
        )

    def bounding_box(self, margin=0.0):
        lo = self.means.min(axis=0)
        hi = self.means.max(axis=0)
        pad = (hi - lo) * margin
        return lo - pad, hi + pad


# ---------------------------------------------------------------------------
# cameras and images
# ---------------------------------------------------------------------------


@dataclass
class CameraView:
    """Pinhole camera; world_to_camera maps x_cam = R x_world + t.

    Pixel centers sit on the integer lattice, so the principal point of a
    centered W x H sensor is ((W - 1) / 2, (H - 1) / 2).
    """

    rotation: np.ndarray            # (3, 3)
    translation: np.ndarray         # (3,)
    focal: np.ndarray               # (fx, fy)
    principal: np.ndarray           # (cx, cy)
    width: int
    height: int
    view_id: int = 0
    gt_image: Optional[np.ndarray] = None   # (H, W, 3) in [0, 1]

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.focal = np.asarray(self.focal, dtype=np.float64)
        self.principal = np.asarray(self.principal, dtype=np.float64)

    @property
    def camera_center(self):
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height, view_id=0):
        """Build a view with +z forward toward the target."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        t = -R @ eye
        f = np.array([focal, focal], dtype=np.float64)
        c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        return cls(R, t, f, c, width, height, view_id=view_id)

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def ray_directions(self):
        """Unit world-space ray directions through every pixel center, (H, W, 3)."""
        xs = np.arange(self.width, dtype=np.float64)
        ys = np.arange(self.height, dtype=np.float64)
        px, py = np.meshgrid(xs, ys)
        dx = (px - self.principal[0]) / self.focal[0]
        dy = (py - self.principal[1]) / self.focal[1]
        d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
        d_world = d_cam @ self.rotation   # R^T applied row-wise
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def config_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal.tolist(),
            "principal": self.principal.tolist(),
            "width": int(self.width),
            "height": int(self.height),
            "view_id": int(self.view_id),
        }

    @classmethod
    def from_config_dict(cls, d, gt_image=None):
        return cls(
            rotation=np.array(d["rotation"], dtype=np.float64),
            translation=np.array(d["translation"], dtype=np.float64),
            focal=np.array(d["focal"], dtype=np.float64),
            principal=np.array(d["principal"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
            view_id=int(d.get("view_id", 0)),
            gt_image=gt_image,
        )


@dataclass
class Image:
    """Float image wrapper, data shaped (H, W, C)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def validate(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains NaN or Inf")
        return self
