"""Shared scene builders and independent oracles used across the suite.

The oracles here deliberately reimplement behavior with naive loops or
closed forms so the package code is always checked against something that
was written separately.
"""

import numpy as np

from uwsplat import CameraView, GaussianCloud, SH_C0, inverse_sigmoid
from uwsplat.raster import (ALPHA_CEILING, TILE, TRANSMITTANCE_FLOOR)


def make_camera(size=16, focal=None, eye=(0.0, 0.0, 0.0),
                target=(0.0, 0.0, 4.0), view_id=0):
    focal = focal if focal is not None else 1.4 * size
    return CameraView.look_at(np.array(eye, dtype=np.float64),
                              np.array(target, dtype=np.float64),
                              np.array([0.0, 1.0, 0.0]),
                              focal=focal, width=size, height=size,
                              view_id=view_id)


def random_cloud(rng, n, spread=0.9, depth_range=(2.5, 5.0),
                 sigma_range=(0.08, 0.35), opacity_range=(-1.5, 1.5),
                 color_floor=0.1):
    means = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*depth_range, n),
    ])
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(*sigma_range, size=(n, 3)))
    opacity_logits = rng.uniform(*opacity_range, n)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rng.uniform(color_floor, 0.9, (n, 3)) / SH_C0
    sh[:, :, 1:] = rng.normal(0.0, 0.02, (n, 3, 15))
    return GaussianCloud(means, rotations, log_scales, opacity_logits, sh)


def brute_blend(proj, cam, weights=None, aux=None):
    """Per-pixel, globally sorted blend over all projected splats.

    Mirrors the footprint rule (a splat reaches the pixels of every tile
    its radius box overlaps) but does the accumulation with a plain loop
    and no tiling, so ordering, the transmittance floor and the alpha
    ceiling are checked independently.
    """
    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    aux_img = np.zeros((h, w)) if aux is not None else None
    final_t = np.ones((h, w))
    n = len(proj)
    if weights is None:
        w_splat = np.ones(n)
    else:
        w_splat = np.asarray(weights, dtype=np.float64)[proj.cloud_index]

    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    cover = []
    for s in range(n):
        r = proj.radius[s]
        mx, my = proj.mean2d[s]
        tx0 = int(np.clip(np.floor((mx - r) / TILE), 0, tiles_x - 1))
        tx1 = int(np.clip(np.floor((mx + r) / TILE), 0, tiles_x - 1))
        ty0 = int(np.clip(np.floor((my - r) / TILE), 0, tiles_y - 1))
        ty1 = int(np.clip(np.floor((my + r) / TILE), 0, tiles_y - 1))
        cover.append((tx0, tx1, ty0, ty1))

    for py in range(h):
        for px in range(w):
            tx, ty = px // TILE, py // TILE
            t = 1.0
            for s in range(n):       # splats arrive depth sorted
                tx0, tx1, ty0, ty1 = cover[s]
                if not (tx0 <= tx <= tx1 and ty0 <= ty <= ty1):
                    continue
                if t < TRANSMITTANCE_FLOOR:
                    break
                d = np.array([px, py], dtype=np.float64) - proj.mean2d[s]
                q = d @ proj.conic[s] @ d
                a = min(proj.alpha[s] * w_splat[s] * np.exp(-0.5 * q),
                        ALPHA_CEILING)
                weight = a * t
                color[py, px] += weight * proj.rgb[s]
                if aux_img is not None:
                    aux_img[py, px] += weight * aux[s]
                t *= 1.0 - a
            final_t[py, px] = t
    return color, aux_img, final_t
