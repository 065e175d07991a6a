"""Tile based software rasterizer for anisotropic gaussians.

Splats project through a local affine approximation of the pinhole camera
(2D covariance J W Sigma W^T J^T), are depth sorted per 16x16 tile and
alpha-blended front to back.  Every forward step has a matching analytic
adjoint so the whole render is differentiable without a general tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (CameraView, GaussianCloud, Image, sh_basis, sh_basis_grad,
                   covariance_from_params, covariance_backward, sigmoid)

TILE = 16
NEAR_PLANE = 1e-2
LOWPASS = 0.3                      # px^2 added to the 2D covariance diagonal
ALPHA_CEILING = 1.0 - 1e-7
TRANSMITTANCE_FLOOR = 1e-4         # blending stops below this transmittance
CULL_SIGMA = 3.0348542587702925    # sqrt(2 ln 100): 99 percent mass radius
COVERAGE_SIGMA = 6.0               # rasterized footprint radius in sigmas


@dataclass
class Splat2D:
    """One projected gaussian."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth_center: float        # euclidean camera-to-mean distance
    gaussian_index: int
    rgb: np.ndarray            # clamped to [0, 1]
    alpha: float


class ProjectedSplats:
    """Structure-of-arrays of the splats surviving projection, depth sorted."""

    def __init__(self, cloud: GaussianCloud, cam: CameraView):
        self.cam = cam
        if len(cloud) == 0:
            raise ValueError("cannot project an empty cloud")
        R, t = cam.rotation, cam.translation
        cam_t = cloud.means @ R.T + t
        keep = cam_t[:, 2] > NEAR_PLANE

        fx, fy = cam.focal
        cx, cy = cam.principal
        tz = cam_t[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            mx = fx * cam_t[:, 0] / tz + cx
            my = fy * cam_t[:, 1] / tz + cy

        cov_w = covariance_from_params(cloud.rotations, cloud.log_scales)
        J = np.zeros((len(cloud), 2, 3))
        with np.errstate(divide="ignore", invalid="ignore"):
            J[:, 0, 0] = fx / tz
            J[:, 0, 2] = -fx * cam_t[:, 0] / tz ** 2
            J[:, 1, 1] = fy / tz
            J[:, 1, 2] = -fy * cam_t[:, 1] / tz ** 2
        M = J @ R[None, :, :]
        cov2d = M @ cov_w @ np.swapaxes(M, 1, 2)
        cov2d[:, 0, 0] += LOWPASS
        cov2d[:, 1, 1] += LOWPASS

        # largest eigenvalue of the 2x2 gives the footprint radius
        half_tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
        det_term = np.sqrt(np.maximum(
            (0.5 * (cov2d[:, 0, 0] - cov2d[:, 1, 1])) ** 2
            + cov2d[:, 0, 1] ** 2, 0.0))
        lam_max = half_tr + det_term
        sigma_max = np.sqrt(np.maximum(lam_max, 1e-12))
        r99 = CULL_SIGMA * sigma_max
        inside = ((mx + r99 >= -0.5) & (mx - r99 <= cam.width - 0.5)
                  & (my + r99 >= -0.5) & (my - r99 <= cam.height - 0.5))
        keep &= np.where(np.isfinite(mx) & np.isfinite(my), inside, False)

        idx = np.flatnonzero(keep)
        center = cam.camera_center
        diff = cloud.means[idx] - center
        dist = np.linalg.norm(diff, axis=1)
        order = np.argsort(dist, kind="stable")
        idx = idx[order]

        self.cloud_index = idx
        self.cam_t = cam_t[idx]
        self.mean2d = np.stack([mx[idx], my[idx]], axis=1)
        self.cov2d = cov2d[idx]
        self.conic = np.linalg.inv(self.cov2d)
        self.depth = dist[order]
        self.radius = COVERAGE_SIGMA * sigma_max[idx]
        self.view_dir = (cloud.means[idx] - center) / self.depth[:, None]
        self.basis = sh_basis(self.view_dir)
        self.rgb_raw = np.einsum('sck,sk->sc', cloud.sh[idx], self.basis)
        self.rgb = np.clip(self.rgb_raw, 0.0, 1.0)
        self.alpha = sigmoid(cloud.opacity_logits[idx])
        self.cov_w = cov_w[idx]
        self.jac = J[idx]
        self.affine = M[idx]

    def __len__(self):
        return self.cloud_index.shape[0]

    def splat(self, row) -> Splat2D:
        return Splat2D(
            mean2d=self.mean2d[row].copy(),
            cov2d=self.cov2d[row].copy(),
            depth_center=float(self.depth[row]),
            gaussian_index=int(self.cloud_index[row]),
            rgb=self.rgb[row].copy(),
            alpha=float(self.alpha[row]),
        )


def project_gaussian(gaussian, cam: CameraView) -> Optional[Splat2D]:
    """Project a single gaussian; None when culled (behind the near plane
    or with its 99 percent footprint fully off the image)."""
    cloud = GaussianCloud.from_gaussians([gaussian])
    proj = ProjectedSplats(cloud, cam)
    if len(proj) == 0:
        return None
    return proj.splat(0)


@dataclass
class _TileBlock:
    rows: np.ndarray         # sorted splat rows touching the tile
    x0: int
    y0: int
    nx: int
    ny: int
    g: np.ndarray            # (S_t, P) gaussian falloff per pixel
    pix_flat: np.ndarray     # (P,) flat pixel indices (y * W + x)
    dx: np.ndarray           # (S_t, P) pixel x minus splat center x
    dy: np.ndarray           # (S_t, P) pixel y minus splat center y


@dataclass
class BlendTape:
    text: list               # per tile transmittance stacks (S_t + 1, P)
    live: list               # per tile bool masks (S_t, P)
    alpha_eff: list          # per tile effective alphas after the ceiling
    wmat: list               # per tile blend weights (S_t, P)
    weights_used: np.ndarray  # per splat multiplicative weight
    aux_values: Optional[np.ndarray]


@dataclass
class BlendResult:
    color: np.ndarray             # (H, W, 3)
    aux: Optional[np.ndarray]     # (H, W)
    final_transmittance: np.ndarray
    weight_sum: np.ndarray        # (H, W) accumulated blend weight
    best_weight: np.ndarray       # (S,) largest blend weight of each splat
    best_transmittance: np.ndarray  # (S,) transmittance at that pixel
    pairs: Optional[dict]         # flat (splat_row, pixel, weight, transmittance)
    tape: BlendTape


class SplatAdjoints:
    """Per-splat upstream gradients accumulated across blends."""

    def __init__(self, n):
        self.d_alpha = np.zeros(n)
        self.d_rgb = np.zeros((n, 3))
        self.d_weight = np.zeros(n)
        self.d_mean2d = np.zeros((n, 2))
        self.d_conic = np.zeros((n, 2, 2))
        self.d_depth = np.zeros(n)
        self.d_aux = np.zeros(n)

    def add(self, other: "SplatAdjoints"):
        self.d_alpha += other.d_alpha
        self.d_rgb += other.d_rgb
        self.d_weight += other.d_weight
        self.d_mean2d += other.d_mean2d
        self.d_conic += other.d_conic
        self.d_depth += other.d_depth
        self.d_aux += other.d_aux
        return self


class RasterSession:
    """Projection and tile assignment shared by several blends of one view."""

    def __init__(self, cloud: GaussianCloud, cam: CameraView):
        self.cloud = cloud
        self.cam = cam
        self.proj = ProjectedSplats(cloud, cam)
        self.tiles = []
        self._build_tiles()

    def _build_tiles(self):
        proj, cam = self.proj, self.cam
        n = len(proj)
        if n == 0:
            return
        tiles_x = (cam.width + TILE - 1) // TILE
        tiles_y = (cam.height + TILE - 1) // TILE
        r = proj.radius
        tx0 = np.clip(np.floor((proj.mean2d[:, 0] - r) / TILE), 0,
                      tiles_x - 1).astype(np.int64)
        tx1 = np.clip(np.floor((proj.mean2d[:, 0] + r) / TILE), 0,
                      tiles_x - 1).astype(np.int64)
        ty0 = np.clip(np.floor((proj.mean2d[:, 1] - r) / TILE), 0,
                      tiles_y - 1).astype(np.int64)
        ty1 = np.clip(np.floor((proj.mean2d[:, 1] + r) / TILE), 0,
                      tiles_y - 1).astype(np.int64)
        buckets = [[] for _ in range(tiles_x * tiles_y)]
        for s in range(n):
            for ty in range(ty0[s], ty1[s] + 1):
                base = ty * tiles_x
                for tx in range(tx0[s], tx1[s] + 1):
                    buckets[base + tx].append(s)
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                rows = buckets[ty * tiles_x + tx]
                if not rows:
                    continue
                rows = np.asarray(rows, dtype=np.int64)
                x0, y0 = tx * TILE, ty * TILE
                nx = min(TILE, cam.width - x0)
                ny = min(TILE, cam.height - y0)
                xs = np.arange(x0, x0 + nx, dtype=np.float64)
                ys = np.arange(y0, y0 + ny, dtype=np.float64)
                px, py = np.meshgrid(xs, ys)
                px, py = px.ravel(), py.ravel()
                dx = px[None, :] - proj.mean2d[rows, 0, None]
                dy = py[None, :] - proj.mean2d[rows, 1, None]
                q00 = proj.conic[rows, 0, 0, None]
                q01 = proj.conic[rows, 0, 1, None]
                q11 = proj.conic[rows, 1, 1, None]
                quad = q00 * dx * dx + 2.0 * q01 * dx * dy + q11 * dy * dy
                g = np.exp(-0.5 * quad)
                pix_flat = (py * cam.width + px).astype(np.int64)
                self.tiles.append(_TileBlock(rows, x0, y0, nx, ny, g,
                                             pix_flat, dx, dy))

    def blend(self, weights=None, aux=None, record_pairs=False) -> BlendResult:
        """Alpha blend front to back.

        weights: optional per-gaussian multiplier on opacity (cloud indexed);
        aux: optional per-splat payload (sorted-row indexed) blended into a
        single extra channel, e.g. depth times an uncertainty downweight.
        """
        proj, cam = self.proj, self.cam
        h, w = cam.height, cam.width
        color = np.zeros((h, w, 3))
        final_t = np.ones((h, w))
        wsum = np.zeros((h, w))
        aux_img = np.zeros((h, w)) if aux is not None else None
        n = len(proj)
        best_w = np.zeros(n)
        best_t = np.zeros(n)

        if weights is None:
            w_splat = np.ones(n)
        else:
            w_splat = np.asarray(weights, dtype=np.float64)[proj.cloud_index]
        alpha_w = proj.alpha * w_splat

        pair_chunks = [] if record_pairs else None
        texts, lives, alphas_eff, wmats = [], [], [], []
        color_flat = color.reshape(-1, 3)
        final_flat = final_t.ravel()
        wsum_flat = wsum.ravel()
        aux_flat = aux_img.ravel() if aux_img is not None else None

        for tile in self.tiles:
            rows = tile.rows
            a = np.minimum(alpha_w[rows, None] * tile.g, ALPHA_CEILING)
            s_t, p = a.shape
            text = np.empty((s_t + 1, p))
            text[0] = 1.0
            np.cumprod(1.0 - a, axis=0, out=text[1:])
            live = text[:-1] >= TRANSMITTANCE_FLOOR
            wmat = a * text[:-1] * live
            color_flat[tile.pix_flat] += wmat.T @ proj.rgb[rows]
            if aux_flat is not None:
                aux_flat[tile.pix_flat] += wmat.T @ aux[rows]
            counts = live.sum(axis=0)
            final_flat[tile.pix_flat] = text[counts, np.arange(p)]
            wsum_flat[tile.pix_flat] += wmat.sum(axis=0)

            loc_best = wmat.argmax(axis=1)
            loc_w = wmat[np.arange(s_t), loc_best]
            loc_t = text[np.arange(s_t), loc_best]
            better = loc_w > best_w[rows]
            upd = rows[better]
            best_w[upd] = loc_w[better]
            best_t[upd] = loc_t[better]

            if pair_chunks is not None:
                ls, lp = np.nonzero(live)
                pair_chunks.append((rows[ls], tile.pix_flat[lp],
                                    wmat[ls, lp], text[ls, lp]))
            texts.append(text)
            lives.append(live)
            alphas_eff.append(a)
            wmats.append(wmat)

        pairs = None
        if pair_chunks is not None:
            if pair_chunks:
                pairs = {
                    "splat_row": np.concatenate([c[0] for c in pair_chunks]),
                    "pixel": np.concatenate([c[1] for c in pair_chunks]),
                    "weight": np.concatenate([c[2] for c in pair_chunks]),
                    "transmittance": np.concatenate([c[3] for c in pair_chunks]),
                }
            else:
                pairs = {k: np.zeros(0) for k in
                         ("splat_row", "pixel", "weight", "transmittance")}
                pairs["splat_row"] = pairs["splat_row"].astype(np.int64)
                pairs["pixel"] = pairs["pixel"].astype(np.int64)

        tape = BlendTape(texts, lives, alphas_eff, wmats, w_splat,
                         None if aux is None else np.asarray(aux, dtype=np.float64))
        return BlendResult(color, aux_img, final_t, wsum, best_w, best_t,
                           pairs, tape)

    def blend_backward(self, result: BlendResult, d_color,
                       d_aux=None) -> SplatAdjoints:
        """Adjoint of blend for upstream image gradients.

        Returns per-splat gradients; the closed form for the alpha chain is
        d a_i = T_i G_i - (sum of downstream weighted contributions) / (1 - a_i).
        """
        proj = self.proj
        adj = SplatAdjoints(len(proj))
        d_color_flat = np.asarray(d_color, dtype=np.float64).reshape(-1, 3)
        d_aux_flat = (None if d_aux is None
                      else np.asarray(d_aux, dtype=np.float64).ravel())
        tape = result.tape
        alpha_w = proj.alpha * tape.weights_used

        for ti, tile in enumerate(self.tiles):
            rows = tile.rows
            g = tile.g
            text = tape.text[ti]
            live = tape.live[ti]
            a = tape.alpha_eff[ti]
            wmat = tape.wmat[ti]

            gc = d_color_flat[tile.pix_flat]                     # (P, 3)
            gsp = proj.rgb[rows] @ gc.T                          # (S_t, P)
            adj.d_rgb[rows] += wmat @ gc
            if d_aux_flat is not None and tape.aux_values is not None:
                ga = d_aux_flat[tile.pix_flat]
                gsp = gsp + tape.aux_values[rows, None] * ga[None, :]
                adj.d_aux[rows] += wmat @ ga

            gw = wmat * gsp
            suffix = gw[::-1].cumsum(axis=0)[::-1] - gw
            d_a = live * (text[:-1] * gsp - suffix / (1.0 - a))
            pre = d_a * (a < ALPHA_CEILING)                      # ceiling gate
            d_alpha_w = (pre * g).sum(axis=1)
            adj.d_alpha[rows] += d_alpha_w * tape.weights_used[rows]
            adj.d_weight[rows] += d_alpha_w * proj.alpha[rows]

            dg = pre * alpha_w[rows, None] * g
            dx, dy = tile.dx, tile.dy
            q00 = proj.conic[rows, 0, 0, None]
            q01 = proj.conic[rows, 0, 1, None]
            q11 = proj.conic[rows, 1, 1, None]
            e0 = q00 * dx + q01 * dy
            e1 = q01 * dx + q11 * dy
            adj.d_mean2d[rows, 0] += (dg * e0).sum(axis=1)
            adj.d_mean2d[rows, 1] += (dg * e1).sum(axis=1)
            cxx = -0.5 * (dg * dx * dx).sum(axis=1)
            cxy = -0.5 * (dg * dx * dy).sum(axis=1)
            cyy = -0.5 * (dg * dy * dy).sum(axis=1)
            adj.d_conic[rows, 0, 0] += cxx
            adj.d_conic[rows, 0, 1] += cxy
            adj.d_conic[rows, 1, 0] += cxy
            adj.d_conic[rows, 1, 1] += cyy
        return adj

    def projection_backward(self, adj: SplatAdjoints):
        """Chain per-splat adjoints back to the gaussian parameters.

        Returns a dict of cloud sized gradient arrays plus d_weight per
        gaussian for the pruning chain.  Culled gaussians keep zero grads.
        """
        proj, cam, cloud = self.proj, self.cam, self.cloud
        n_cloud = len(cloud)
        grads = {
            "means": np.zeros((n_cloud, 3)),
            "rotations": np.zeros((n_cloud, 4)),
            "log_scales": np.zeros((n_cloud, 3)),
            "opacity_logits": np.zeros(n_cloud),
            "sh": np.zeros((n_cloud, 3, 16)),
            "d_weight": np.zeros(n_cloud),
        }
        s = len(proj)
        if s == 0:
            return grads
        idx = proj.cloud_index
        fx, fy = cam.focal
        R = cam.rotation
        tz = proj.cam_t[:, 2]

        # conic -> 2D covariance (inverse function adjoint)
        d_cov2d = -proj.conic @ adj.d_conic @ proj.conic

        sym = d_cov2d + np.swapaxes(d_cov2d, 1, 2)
        d_m = sym @ proj.affine @ proj.cov_w
        d_cov_w = np.swapaxes(proj.affine, 1, 2) @ d_cov2d @ proj.affine
        d_j = d_m @ R.T[None, :, :]

        d_t = np.einsum('sic,si->sc', proj.jac, adj.d_mean2d)
        inv_tz2 = 1.0 / tz ** 2
        d_t[:, 0] += d_j[:, 0, 2] * (-fx * inv_tz2)
        d_t[:, 1] += d_j[:, 1, 2] * (-fy * inv_tz2)
        d_t[:, 2] += (d_j[:, 0, 0] * (-fx * inv_tz2)
                      + d_j[:, 1, 1] * (-fy * inv_tz2)
                      + d_j[:, 0, 2] * (2 * fx * proj.cam_t[:, 0] / tz ** 3)
                      + d_j[:, 1, 2] * (2 * fy * proj.cam_t[:, 1] / tz ** 3))
        d_mean = d_t @ R

        d_mean += adj.d_depth[:, None] * proj.view_dir

        # color: clamp gate, then SH coefficients and the view direction
        gate = ((proj.rgb_raw > 0.0) & (proj.rgb_raw < 1.0)).astype(np.float64)
        d_raw = adj.d_rgb * gate
        d_sh = np.einsum('sc,sk->sck', d_raw, proj.basis)
        bgrad = sh_basis_grad(proj.view_dir)
        d_dir = np.einsum('sc,sck,ska->sa', d_raw, cloud.sh[idx], bgrad)
        dot = np.einsum('sa,sa->s', proj.view_dir, d_dir)
        d_mean += (d_dir - proj.view_dir * dot[:, None]) / proj.depth[:, None]

        d_rot, d_ls = covariance_backward(cloud.rotations[idx],
                                          cloud.log_scales[idx], d_cov_w)
        alpha = proj.alpha
        d_logit = adj.d_alpha * alpha * (1.0 - alpha)

        np.add.at(grads["means"], idx, d_mean)
        np.add.at(grads["rotations"], idx, d_rot)
        np.add.at(grads["log_scales"], idx, d_ls)
        np.add.at(grads["opacity_logits"], idx, d_logit)
        np.add.at(grads["sh"], idx, d_sh)
        np.add.at(grads["d_weight"], idx, adj.d_weight)
        return grads


# ---------------------------------------------------------------------------
# public render surface
# ---------------------------------------------------------------------------


@dataclass
class RenderBundle:
    """One view's render products and blend records."""

    uri: Image
    depth: Image                      # expected depth with zero uncertainty
    final_transmittance: np.ndarray
    valid: np.ndarray                 # pixels with nonzero accumulated weight
    splats: ProjectedSplats
    pairs: Optional[dict]
    empty_frame: bool = False
    session: Optional[RasterSession] = None
    result: Optional[BlendResult] = None

    def splat_list(self):
        return [self.splats.splat(i) for i in range(len(self.splats))]

    def contributions_for(self, gaussian_index):
        """All (pixel, weight) pairs a gaussian actually blended into."""
        if self.pairs is None:
            raise ValueError("rasterize was called without pair recording")
        rows = self.splats.cloud_index[self.pairs["splat_row"]]
        mask = rows == gaussian_index
        w = self.uri.width
        pix = self.pairs["pixel"][mask]
        return [((int(p % w), int(p // w)), float(wt))
                for p, wt in zip(pix, self.pairs["weight"][mask])]


def rasterize(cloud: GaussianCloud, cam: CameraView,
              per_gaussian_weight=None, record_pairs=True) -> RenderBundle:
    """Render a cloud into a view; weights scale each gaussian's opacity."""
    session = RasterSession(cloud, cam)
    if len(session.proj) == 0:
        h, w = cam.height, cam.width
        empty = RenderBundle(
            uri=Image(np.zeros((h, w, 3))),
            depth=Image(np.zeros((h, w))),
            final_transmittance=np.ones((h, w)),
            valid=np.zeros((h, w), dtype=bool),
            splats=session.proj,
            pairs=None,
            empty_frame=True,
            session=session,
        )
        return empty
    result = session.blend(weights=per_gaussian_weight,
                           aux=session.proj.depth,
                           record_pairs=record_pairs)
    return RenderBundle(
        uri=Image(result.color),
        depth=Image(result.aux),
        final_transmittance=result.final_transmittance,
        valid=result.weight_sum > 0.0,
        splats=session.proj,
        pairs=result.pairs,
        empty_frame=False,
        session=session,
        result=result,
    )


def render_depth(bundle: RenderBundle, uncertainty) -> Image:
    """Uncertainty weighted expected depth from recorded blend weights.

    depth(p) = sum_i z_i w_i (1 - U_i) over the recorded pairs, with U
    indexed per gaussian and clamped to [0, 1].  Pixels with no recorded
    weight stay 0 (invalid).
    """
    if bundle.pairs is None:
        raise ValueError("bundle carries no recorded pairs")
    h, w = bundle.uri.height, bundle.uri.width
    depth = np.zeros(h * w)
    if bundle.empty_frame or bundle.pairs["pixel"].size == 0:
        return Image(depth.reshape(h, w))
    u = np.clip(np.asarray(uncertainty, dtype=np.float64), 0.0, 1.0)
    rows = bundle.pairs["splat_row"]
    z = bundle.splats.depth[rows]
    keep = 1.0 - u[bundle.splats.cloud_index[rows]]
    np.add.at(depth, bundle.pairs["pixel"],
              bundle.pairs["weight"] * z * keep)
    return Image(depth.reshape(h, w))
