"""On-disk formats: PLY point clouds, checkpoints, images, scenes, config.

All binary containers share one layout: a magic line, an 8-byte little
endian header length, a JSON header, then raw little-endian arrays.  Every
write goes through a temp file and an atomic rename so a killed run never
leaves a readable-but-truncated file behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict

import numpy as np
from PIL import Image as PILImage
from scipy.spatial import cKDTree

from .core import SH_C0, CameraView, GaussianCloud, Image, inverse_sigmoid
from .errors import CheckpointError, MalformedPLY
from .medium import medium_from_dict, medium_to_dict
from .mlp import DenseNet
from .pruning import PruneWeights

CHECKPOINT_MAGIC = b"UWSPLAT-CKPT-1\n"
ARRAY_MAGIC = b"UWSPLAT-ARR-1\n"
IMAGE_MAGIC = b"UWSPLAT-IMG-1\n"


def _atomic_write(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# generic array container
# ---------------------------------------------------------------------------


def _pack_container(magic, arrays, extra):
    """arrays: list of (name, ndarray, dtype string)."""
    manifest = {"extra": extra, "arrays": []}
    blobs = []
    for name, arr, dtype in arrays:
        a = np.ascontiguousarray(np.asarray(arr), dtype=np.dtype(dtype))
        manifest["arrays"].append({"name": name, "shape": list(a.shape),
                                   "dtype": dtype})
        blobs.append(a.tobytes())
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def _unpack_container(magic, data, path):
    if not data.startswith(magic):
        raise CheckpointError(f"{path}: bad magic, not a recognized file")
    off = len(magic)
    if len(data) < off + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        manifest = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    off += hlen
    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = n * dt.itemsize
        if len(data) < off + nbytes:
            raise CheckpointError(
                f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(data[off:off + nbytes], dtype=dt)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        off += nbytes
    return arrays, manifest.get("extra", {})


def save_arrays(path, named_arrays: dict, extra=None, dtype="<f4"):
    arrays = [(k, v, dtype) for k, v in named_arrays.items()]
    _atomic_write(path, _pack_container(ARRAY_MAGIC, arrays, extra or {}))


def load_arrays(path):
    with open(path, "rb") as f:
        data = f.read()
    return _unpack_container(ARRAY_MAGIC, data, path)


# ---------------------------------------------------------------------------
# point clouds (PLY)
# ---------------------------------------------------------------------------


_PLY_TYPES = {
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def _parse_ply_header(data, path):
    end = data.find(b"end_header\n")
    if end < 0:
        raise MalformedPLY(f"{path}: no end_header line")
    body_start = end + len(b"end_header\n")
    try:
        text = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedPLY(f"{path}: non-ascii header") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedPLY(f"{path}: line 1: missing 'ply' magic")

    fmt = None
    elements = []            # (name, count, [(prop_name, type_str)])
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii",
                                                  "binary_little_endian"):
                raise MalformedPLY(f"{path}: line {ln}: unsupported format "
                                   f"{line.strip()!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MalformedPLY(f"{path}: line {ln}: bad element line")
            try:
                elements.append((parts[1], int(parts[2]), []))
            except ValueError as exc:
                raise MalformedPLY(f"{path}: line {ln}: bad element count") \
                    from exc
        elif parts[0] == "property":
            if not elements:
                raise MalformedPLY(f"{path}: line {ln}: property before "
                                   "element")
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise MalformedPLY(f"{path}: line {ln}: unsupported "
                                       f"property {line.strip()!r}")
                elements[-1][2].append((parts[2], parts[1]))
    if fmt is None:
        raise MalformedPLY(f"{path}: header has no format line")
    if not elements:
        raise MalformedPLY(f"{path}: header declares no elements")
    return fmt, elements, body_start


def _cloud_from_points(points, colors):
    n = points.shape[0]
    if n > 1:
        tree = cKDTree(points)
        k = min(3, n - 1)
        dist, _ = tree.query(points, k=k + 1)
        neigh = dist[:, 1:]
        # trimmed mean: a boundary point sees far-side neighbors whose
        # distances would inflate its scale, so drop any neighbor at twice
        # the nearest distance or more
        keep = neigh < 2.0 * neigh[:, :1]
        keep[:, 0] = True
        sigma = (neigh * keep).sum(axis=1) / keep.sum(axis=1)
        sigma = np.maximum(sigma, 1e-8)
    else:
        sigma = np.full(1, 0.1)
    log_scales = np.log(np.repeat(sigma[:, None], 3, axis=1))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full(n, inverse_sigmoid(0.1))
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = colors / SH_C0
    return GaussianCloud(points, rotations, log_scales, opacity_logits, sh)


def read_point_cloud(path) -> GaussianCloud:
    """Initial gaussians from a PLY file: positions, optional colors;
    isotropic scale from the mean 3-nearest-neighbor distance, opacity 0.1."""
    with open(path, "rb") as f:
        data = f.read()
    fmt, elements, body_start = _parse_ply_header(data, path)
    if elements[0][0] != "vertex":
        raise MalformedPLY(f"{path}: first element must be 'vertex', got "
                           f"{elements[0][0]!r}")
    name, count, props = elements[0]
    if any(t == "list" for _, t in props):
        raise MalformedPLY(f"{path}: vertex element has list properties")
    prop_names = [p for p, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise MalformedPLY(f"{path}: vertex lacks property {axis!r}")

    color_names = None
    for candidate in (("red", "green", "blue"), ("r", "g", "b")):
        if all(c in prop_names for c in candidate):
            color_names = candidate
            break

    if fmt == "ascii":
        text = data[body_start:].decode("ascii", errors="replace")
        rows = text.splitlines()
        if len(rows) < count:
            raise MalformedPLY(f"{path}: expected {count} vertex rows, got "
                               f"{len(rows)}")
        table = np.empty((count, len(props)))
        for i in range(count):
            parts = rows[i].split()
            if len(parts) < len(props):
                raise MalformedPLY(f"{path}: vertex row {i + 1}: expected "
                                   f"{len(props)} values, got {len(parts)}")
            try:
                table[i] = [float(v) for v in parts[:len(props)]]
            except ValueError as exc:
                raise MalformedPLY(f"{path}: vertex row {i + 1}: {exc}") \
                    from exc
        columns = {p: table[:, j] for j, (p, _) in enumerate(props)}
        types = dict(props)
    else:
        dt = np.dtype([(f"f{j}", _PLY_TYPES[t])
                       for j, (_, t) in enumerate(props)])
        need = count * dt.itemsize
        if len(data) - body_start < need:
            raise MalformedPLY(f"{path}: binary body truncated at byte "
                               f"{len(data)} (need {body_start + need})")
        rec = np.frombuffer(data, dtype=dt, count=count, offset=body_start)
        columns = {p: rec[f"f{j}"].astype(np.float64)
                   for j, (p, _) in enumerate(props)}
        types = dict(props)

    points = np.stack([columns["x"], columns["y"], columns["z"]], axis=1)
    if color_names is not None:
        colors = np.stack([columns[c] for c in color_names], axis=1)
        if types[color_names[0]] in ("uchar", "uint8"):
            colors = colors / 255.0
        colors = np.clip(colors, 0.0, 1.0)
    else:
        colors = np.full((count, 3), 0.5)
    return _cloud_from_points(points, colors)


def write_point_cloud(path, points, colors=None, binary=True):
    """Write positions (and optional [0,1] colors) as a PLY file."""
    if isinstance(points, GaussianCloud):
        cloud = points
        points = cloud.means
        colors = np.clip(cloud.sh[:, :, 0] * SH_C0, 0.0, 1.0)
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    has_color = colors is not None
    header = ["ply",
              "format binary_little_endian 1.0" if binary
              else "format ascii 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if has_color:
            fields += [("red", "<u1"), ("green", "<u1"), ("blue", "<u1")]
        rec = np.empty(n, dtype=np.dtype(fields))
        rec["x"], rec["y"], rec["z"] = (points[:, i].astype(np.float32)
                                        for i in range(3))
        if has_color:
            rgb = np.rint(np.clip(colors, 0, 1) * 255).astype(np.uint8)
            rec["red"], rec["green"], rec["blue"] = rgb.T
        body = rec.tobytes()
    else:
        lines = []
        for i in range(n):
            row = f"{points[i, 0]!r} {points[i, 1]!r} {points[i, 2]!r}"
            if has_color:
                rgb = np.rint(np.clip(colors[i], 0, 1) * 255).astype(int)
                row += f" {rgb[0]} {rgb[1]} {rgb[2]}"
            lines.append(row)
        body = ("\n".join(lines) + "\n").encode("ascii")
    _atomic_write(path, head + body)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def save_image_raw(path, image):
    arr = np.asarray(image.data if hasattr(image, "data") else image,
                     dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    payload = _pack_container(IMAGE_MAGIC, [("data", arr, "<f4")],
                              {"height": arr.shape[0], "width": arr.shape[1],
                               "channels": arr.shape[2]})
    _atomic_write(path, payload)


def load_image_raw(path) -> Image:
    with open(path, "rb") as f:
        data = f.read()
    arrays, extra = _unpack_container(IMAGE_MAGIC, data, path)
    arr = arrays["data"]
    if extra.get("channels") == 1:
        arr = arr[:, :, 0]
    return Image(arr)


def save_image_png(path, image):
    arr = np.asarray(image.data if hasattr(image, "data") else image,
                     dtype=np.float64)
    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    mode = "L" if pixels.ndim == 2 else "RGB"
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        PILImage.fromarray(pixels, mode=mode).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_image_png(path) -> Image:
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cloud: GaussianCloud, medium, mlp, prune_weights,
                    final_keep, config_dict, iteration=0):
    extra = {
        "iteration": int(iteration),
        "n_gaussians": len(cloud),
        "config": config_dict,
        "medium": medium_to_dict(medium),
        "prune_weights": {"w_u": float(prune_weights.w_u),
                          "w_p": float(prune_weights.w_p)},
        "mlp_hidden": int(mlp.hidden),
    }
    arrays = [("means", cloud.means, "<f4"),
              ("rotations", cloud.rotations, "<f4"),
              ("log_scales", cloud.log_scales, "<f4"),
              ("opacity_logits", cloud.opacity_logits, "<f4"),
              ("sh", cloud.sh, "<f4"),
              ("final_keep", np.asarray(final_keep, dtype=np.uint8), "<u1")]
    for pi, p in enumerate(mlp.parameters()):
        arrays.append((f"mlp_{pi}", p, "<f4"))
    _atomic_write(path, _pack_container(CHECKPOINT_MAGIC, arrays, extra))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    arrays, extra = _unpack_container(CHECKPOINT_MAGIC, data, path)
    try:
        cloud = GaussianCloud(arrays["means"], arrays["rotations"],
                              arrays["log_scales"],
                              arrays["opacity_logits"], arrays["sh"])
        medium = medium_from_dict(extra["medium"])
        mlp = DenseNet(hidden=extra["mlp_hidden"])
        mlp.set_parameters([arrays[f"mlp_{i}"] for i in range(4)])
        pw = PruneWeights(extra["prune_weights"]["w_u"],
                          extra["prune_weights"]["w_p"])
        final_keep = arrays["final_keep"].astype(bool)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from exc
    return {"cloud": cloud, "medium": medium, "mlp": mlp,
            "prune_weights": pw, "final_keep": final_keep,
            "config": extra.get("config", {}),
            "iteration": extra.get("iteration", 0)}


# ---------------------------------------------------------------------------
# synthetic scene directories
# ---------------------------------------------------------------------------


def save_scene(directory, scene):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "n_surface": int(scene.n_surface),
        "floater_indices": [int(i) for i in scene.floater_indices],
        "patch_halfwidth": float(scene.patch_halfwidth),
        "height_field": asdict(scene.height_field),
        "cameras": [cam.config_dict() for cam in scene.cameras],
        "medium": medium_to_dict(scene.true_medium),
    }
    _atomic_write(os.path.join(directory, "scene.json"),
                  json.dumps(meta, indent=2, sort_keys=True).encode("utf-8"))
    save_arrays(os.path.join(directory, "cloud.bin"),
                {"means": scene.cloud.means,
                 "rotations": scene.cloud.rotations,
                 "log_scales": scene.cloud.log_scales,
                 "opacity_logits": scene.cloud.opacity_logits,
                 "sh": scene.cloud.sh})
    for k in range(len(scene.cameras)):
        save_image_raw(os.path.join(directory, f"view_{k:02d}_clean.raw"),
                       scene.clean_images[k])
        save_image_raw(os.path.join(directory, f"view_{k:02d}_uw.raw"),
                       scene.uw_images[k])
        save_image_raw(os.path.join(directory, f"view_{k:02d}_depth.raw"),
                       scene.true_depths[k])


def load_scene(directory):
    from .synthetic import HeightField, SyntheticScene
    with open(os.path.join(directory, "scene.json"), "r",
              encoding="utf-8") as f:
        meta = json.load(f)
    arrays, _ = load_arrays(os.path.join(directory, "cloud.bin"))
    cloud = GaussianCloud(arrays["means"], arrays["rotations"],
                          arrays["log_scales"], arrays["opacity_logits"],
                          arrays["sh"])
    cameras = [CameraView.from_config_dict(d) for d in meta["cameras"]]
    clean, uw, depths = [], [], []
    for k, cam in enumerate(cameras):
        clean.append(load_image_raw(
            os.path.join(directory, f"view_{k:02d}_clean.raw")))
        uw.append(load_image_raw(
            os.path.join(directory, f"view_{k:02d}_uw.raw")))
        d = load_image_raw(os.path.join(directory, f"view_{k:02d}_depth.raw"))
        depths.append(d)
        cam.gt_image = uw[-1]
    return SyntheticScene(
        cloud=cloud, cameras=cameras,
        true_medium=medium_from_dict(meta["medium"]),
        clean_images=clean, uw_images=uw, true_depths=depths,
        floater_indices=np.asarray(meta["floater_indices"], dtype=np.int64),
        n_surface=meta["n_surface"],
        height_field=HeightField(**meta["height_field"]),
        patch_halfwidth=meta["patch_halfwidth"])


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


RUN_CONFIG_KEYS = {
    "iterations", "lr_opacity", "lr_scale", "lr_rotation", "lr_medium",
    "lr_mean", "lr_mean_final", "lr_sh", "lr_prune", "densify_start",
    "densify_interval", "densify_rate", "opacity_reset_interval",
    "paup_start", "adam_beta1", "adam_beta2", "adam_eps", "temperature",
    "grid_resolution", "grid_rank", "seed", "checkpoint_interval",
    "stats_refresh", "floater_metric_interval",
    "scene", "out", "metrics", "full_scale",
}


def load_run_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - RUN_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return data
