"""Desk-scale synthetic scenes with exact ground truth.

A textured height-field patch is sampled with surface gaussians, floater
gaussians are planted in the free water between the cameras and the
surface, and underwater images are fabricated by pushing clean renders
through a known medium at exact ray-surface depths.  Everything is a pure
function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (CameraView, GaussianCloud, Image, SH_C0, inverse_sigmoid,
                   inverse_softplus)
from .medium import BETA_PRIOR, MediumParams, forward_simulate, make_medium
from .raster import ProjectedSplats, rasterize

PATCH_HALFWIDTH = 1.6
CAMERA_RADIUS = 4.0
RADIUS_SWING = 2.4
FOOTPRINT_THRESHOLD = 4.0      # px^2, floater screen-size gate
DISTANCE_FACTOR = 3.0          # x median surface scale, floater distance gate


@dataclass
class HeightField:
    """Smooth analytic surface z = h(x, y), defined everywhere."""

    amp1: float
    amp2: float
    fx: float
    fy: float
    phase_x: float
    phase_y: float

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (self.amp1 * np.sin(self.fx * x + self.phase_x)
                * np.cos(self.fy * y + self.phase_y)
                + self.amp2 * np.sin(1.7 * x - 1.3 * y))


@dataclass
class SyntheticScene:
    cloud: GaussianCloud                 # surface + planted floaters
    cameras: list
    true_medium: MediumParams
    clean_images: list
    uw_images: list
    true_depths: list
    floater_indices: np.ndarray
    n_surface: int
    height_field: HeightField
    patch_halfwidth: float = PATCH_HALFWIDTH

    @property
    def views(self):
        return self.cameras


def _surface_cloud(rng, n_surface, hf: HeightField):
    side = int(np.ceil(np.sqrt(n_surface)))
    spacing = 2.0 * PATCH_HALFWIDTH / side
    gx, gy = np.meshgrid(np.arange(side), np.arange(side))
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    xy = -PATCH_HALFWIDTH + (xy + 0.5) * spacing
    xy += rng.uniform(-0.35, 0.35, size=xy.shape) * spacing
    order = rng.permutation(xy.shape[0])[:n_surface]
    xy = xy[order]

    means = np.column_stack([xy, hf.height(xy[:, 0], xy[:, 1])])
    sigma_t = 0.85 * spacing
    log_scales = np.log(np.column_stack([
        rng.uniform(0.9, 1.15, n_surface) * sigma_t,
        rng.uniform(0.9, 1.15, n_surface) * sigma_t,
        np.full(n_surface, 0.02),
    ]))
    rotations = np.zeros((n_surface, 4))
    rotations[:, 0] = 1.0
    opacity_logits = inverse_sigmoid(rng.uniform(0.75, 0.92, n_surface))

    sh = rng.uniform(-0.015, 0.015, size=(n_surface, 3, 16))
    x, y = xy[:, 0], xy[:, 1]
    base = np.stack([
        0.5 + 0.32 * np.sin(3.1 * x + 0.4) * np.sin(2.7 * y - 0.2),
        0.5 + 0.30 * np.sin(2.6 * x - 0.9) * np.cos(3.3 * y + 0.6),
        0.5 + 0.28 * np.cos(2.9 * x + 1.3) * np.sin(2.4 * y + 1.1),
    ], axis=1)
    # a few broad near-black patches: their pixels are veil-dominated at
    # every viewing distance, anchoring the water color that bright
    # radiance could otherwise absorb.  The smooth ramp keeps neighboring
    # gaussians dim too, so blending cannot leak light into the patch core.
    dark_field = np.sin(2.2 * x + 1.7) * np.sin(2.0 * y - 0.8)
    ramp = np.clip((dark_field - 0.25) / 0.5, 0.0, 1.0)
    base *= (1.0 - 0.95 * ramp)[:, None]
    sh[:, :, 0] = base / SH_C0
    return GaussianCloud(means, rotations, log_scales, opacity_logits, sh)


def _floater_cloud(rng, n_floaters):
    means = np.column_stack([
        rng.uniform(-0.6, 0.6, n_floaters),
        rng.uniform(-0.6, 0.6, n_floaters),
        rng.uniform(-2.3, -1.0, n_floaters),
    ])
    log_scales = np.log(rng.uniform(0.07, 0.13, size=(n_floaters, 3)))
    rotations = rng.normal(size=(n_floaters, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity_logits = inverse_sigmoid(rng.uniform(0.2, 0.6, n_floaters))
    sh = rng.uniform(-0.01, 0.01, size=(n_floaters, 3, 16))
    sh[:, :, 0] = rng.uniform(0.3, 0.7, size=(n_floaters, 3)) / SH_C0
    return GaussianCloud(means, rotations, log_scales, opacity_logits, sh)


def _orbit_cameras(n_views, img_size):
    # the viewing distance sweeps outward from the nominal radius so every
    # surface point is observed through several very different water column
    # lengths; a constant-radius orbit leaves the veiling color nearly
    # unidentifiable from the attenuated radiance.  The sweep never goes
    # inward, keeping the cameras well clear of the planted floaters.
    views = []
    angles = np.linspace(-0.25, 0.25, n_views)
    phases = np.linspace(0.0, 4.0 * np.pi, n_views)
    for k, (a, ph) in enumerate(zip(angles, phases)):
        r = CAMERA_RADIUS + RADIUS_SWING * 0.5 * (1.0 - np.cos(ph))
        eye = np.array([r * np.sin(a),
                        0.2 * np.sin(3.0 * a + 0.5),
                        -r * np.cos(a)])
        views.append(CameraView.look_at(
            eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
            focal=2.65 * img_size, width=img_size, height=img_size,
            view_id=k))
    return views


def exact_surface_depth(cam: CameraView, hf: HeightField):
    """Per-pixel euclidean distance to the analytic surface via bisection.

    The surface height is bounded by ~0.13 so the root of
    ray_z(t) - h(ray_xy(t)) is bracketed by the planes z = -0.45 / +0.45
    and unique because rays advance in z much faster than h varies.
    """
    o = cam.camera_center
    d = cam.ray_directions().reshape(-1, 3)
    dz = d[:, 2]
    if np.any(dz <= 0.0):
        raise ValueError("camera must face the surface")
    t_lo = (-0.45 - o[2]) / dz
    t_hi = (0.45 - o[2]) / dz
    for _ in range(64):
        t_mid = 0.5 * (t_lo + t_hi)
        p = o[None, :] + d * t_mid[:, None]
        above = p[:, 2] - hf.height(p[:, 0], p[:, 1]) > 0.0
        t_hi = np.where(above, t_mid, t_hi)
        t_lo = np.where(above, t_lo, t_mid)
    t = 0.5 * (t_lo + t_hi)
    hit = o[None, :] + d * t[:, None]
    inside = (np.abs(hit[:, 0]) <= PATCH_HALFWIDTH) \
        & (np.abs(hit[:, 1]) <= PATCH_HALFWIDTH)
    return t.reshape(cam.height, cam.width), \
        inside.reshape(cam.height, cam.width)


def _true_medium(rng, grid_variation, resolution=8):
    bbox_min = np.array([-PATCH_HALFWIDTH - 0.5, -PATCH_HALFWIDTH - 0.5,
                         -CAMERA_RADIUS - 0.5])
    bbox_max = np.array([PATCH_HALFWIDTH + 0.5, PATCH_HALFWIDTH + 0.5, 0.7])
    medium = make_medium(bbox_min, bbox_max, BETA_PRIOR, rng,
                         resolution=resolution, rank=1, noise=0.0)
    for grid in (medium.grid_d, medium.grid_b):
        for comp in (grid.u, grid.m, grid.v, grid.w):
            comp[:] = 0.0
        if grid_variation:
            ramp = np.linspace(-0.3, 0.3, resolution)
            # one channel ramps along each axis, the rest stay constant
            grid.u[0, 0] = ramp
            grid.m[0, 0] = 1.0
            grid.v[0, 0] = 1.0
            grid.w[0, 0] = 1.0
            grid.u[1, 0] = 1.0
            grid.m[1, 0] = 1.0
            grid.v[1, 0] = ramp
            grid.w[1, 0] = 1.0
            grid.u[2, 0] = 1.0
            grid.m[2, 0] = 1.0
            grid.v[2, 0] = 1.0
            grid.w[2, 0] = ramp
    medium.b_logit = inverse_sigmoid(np.array([0.2, 0.4, 0.5]))
    return medium


def make_scene(seed, n_surface=500, n_floaters=25, grid_variation=False,
               img_size=64, n_views=12) -> SyntheticScene:
    """Fabricate a full scene; every array is a pure function of seed."""
    rng = np.random.default_rng(seed)
    hf = HeightField(
        amp1=0.08 + 0.02 * rng.uniform(),
        amp2=0.03 + 0.01 * rng.uniform(),
        fx=2.3 + 0.2 * rng.uniform(),
        fy=1.9 + 0.2 * rng.uniform(),
        phase_x=rng.uniform(0.0, 2 * np.pi),
        phase_y=rng.uniform(0.0, 2 * np.pi),
    )
    surface = _surface_cloud(rng, n_surface, hf)
    cloud = surface
    floater_indices = np.arange(0)
    if n_floaters > 0:
        cloud = surface.append(_floater_cloud(rng, n_floaters))
        floater_indices = np.arange(n_surface, n_surface + n_floaters)

    cameras = _orbit_cameras(n_views, img_size)
    medium = _true_medium(rng, grid_variation)

    clean_images, uw_images, true_depths = [], [], []
    for cam in cameras:
        depth, inside = exact_surface_depth(cam, hf)
        if not inside.all():
            raise ValueError("camera frustum leaves the surface patch")
        bundle = rasterize(surface, cam, record_pairs=False)
        clean = bundle.uri
        uw = forward_simulate(clean.data, depth,
                              np.ones_like(depth, dtype=bool), medium, cam)
        clean_images.append(clean)
        uw_images.append(Image(uw))
        true_depths.append(Image(depth))
        cam.gt_image = Image(uw)

    return SyntheticScene(cloud, cameras, medium, clean_images, uw_images,
                          true_depths, floater_indices, n_surface, hf)


def invert_simulation(uw, depth, medium: MediumParams, cam) -> np.ndarray:
    """Solve the image-formation model for the clean radiance given the
    exact medium and depth (sanity oracle for the fabricated data)."""
    from .medium import grid_query
    h, w = depth.shape
    rays = cam.ray_directions().reshape(-1, 3)
    z = np.asarray(depth, dtype=np.float64).ravel()
    pts = cam.camera_center[None, :] + rays * z[:, None]
    beta_d, _ = grid_query(medium.grid_d, pts)
    beta_b, _ = grid_query(medium.grid_b, pts)
    b_inf = medium.b_infinity
    uw_flat = np.asarray(uw, dtype=np.float64).reshape(-1, 3)
    back = b_inf * (1.0 - np.exp(-beta_b * z[:, None]))
    clean = (uw_flat - back) * np.exp(beta_d * z[:, None])
    return clean.reshape(h, w, 3)


def median_surface_scale(scene: SyntheticScene) -> float:
    surf = scene.cloud.log_scales[:scene.n_surface]
    return float(np.median(np.exp(surf).mean(axis=1)))


def floater_ratio(cloud: GaussianCloud, scene: SyntheticScene,
                  keep_mask: Optional[np.ndarray] = None) -> float:
    """Percentage of surviving gaussians that sit far off the true surface
    and are big enough on screen to matter (both gates must fire)."""
    if keep_mask is None:
        keep_mask = np.ones(len(cloud), dtype=bool)
    survivors = np.flatnonzero(keep_mask)
    if survivors.size == 0:
        return 0.0
    sub = cloud.subset(survivors)

    hf = scene.height_field
    dist = np.abs(sub.means[:, 2] - hf.height(sub.means[:, 0],
                                              sub.means[:, 1]))
    delta = DISTANCE_FACTOR * median_surface_scale(scene)
    far = dist > delta

    big = np.zeros(len(sub), dtype=bool)
    for cam in scene.cameras:
        proj = ProjectedSplats(sub, cam)
        if len(proj) == 0:
            continue
        det = np.linalg.det(proj.cov2d)
        area = np.pi * np.sqrt(np.maximum(det, 0.0))
        hit = proj.cloud_index[area > FOOTPRINT_THRESHOLD]
        big[hit] = True

    flagged = int(np.count_nonzero(far & big))
    return 100.0 * flagged / survivors.size
