"""Command-line front door.

Exit codes: 0 success, 1 user error (arguments, files, config), 2 runtime
failure (divergence, failed gradient check, internal errors).  Every
failure prints a single diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as uio
from .autodiff import build_gradcheck_scene, finite_diff_check, \
    forward_pipeline, ForwardOptions
from .errors import DivergenceDetected, UwsplatError
from .losses import psnr, ssim
from .medium import forward_simulate
from .pruning import score_records
from .synthetic import floater_ratio, make_scene
from .trainer import TrainConfig, TrainedModel, render_eval, train

USER_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 for bad arguments; remap to 1."""

    def error(self, message):
        self.exit(USER_ERROR, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="uwsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--surface", type=int, default=500)
    s.add_argument("--floaters", type=int, default=25)
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--grid-variation", action="store_true",
                   help="spatially varying true water instead of constant")

    t = sub.add_parser("train", help="fit a scene end to end")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", default=None,
                   help="final checkpoint path (default <scene>/final.ckpt)")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--metrics", default=None, help="JSONL metrics path")
    t.add_argument("--checkpoint-dir", default=None)
    t.add_argument("--init-ply", default=None,
                   help="initialize gaussians from a PLY instead of the "
                        "scene's bundled cloud")
    t.add_argument("--full-scale", action="store_true",
                   help="paper-scale schedule instead of the desk preset")
    t.add_argument("--no-prune", action="store_true",
                   help="ablation: disable the pruning branch entirely")

    r = sub.add_parser("render", help="render a checkpoint into PNGs")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True, help="camera source directory")
    r.add_argument("--mode", choices=["uri", "uwi", "depth"], default="uwi")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--view", type=int, default=None,
                   help="single view index (default: all)")
    r.add_argument("--float", action="store_true", dest="raw_float",
                   help="write 32-bit raw floats instead of 8-bit PNG")
    r.add_argument("--override-depth", type=float, default=None,
                   help="compose against this constant depth instead of "
                        "the rendered one")

    e = sub.add_parser("eval", help="PSNR/SSIM/floater report as JSON")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--scene", default=None)
    e.add_argument("--render", default=None, help="image file to score")
    e.add_argument("--ref", default=None, help="reference image file")
    e.add_argument("--out", default=None, help="also write the JSON here")

    g = sub.add_parser("grad-check", help="verify analytic gradients "
                                          "against finite differences")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--tolerance", type=float, default=1e-3)
    g.add_argument("--samples", type=int, default=8)

    pr = sub.add_parser("prune-report", help="per-gaussian score dump")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--scene", required=True)
    pr.add_argument("--view", type=int, default=0)
    pr.add_argument("--out", default=None)
    return p


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    scene = make_scene(args.seed, n_surface=args.surface,
                       n_floaters=args.floaters,
                       grid_variation=args.grid_variation,
                       img_size=args.size, n_views=args.views)
    uio.save_scene(args.out, scene)
    print(f"wrote scene with {len(scene.cloud)} gaussians, "
          f"{len(scene.cameras)} views to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    fields = {}
    if args.config is not None:
        data = uio.load_run_config(args.config)
        data.pop("scene", None)
        data.pop("out", None)
        data.pop("metrics", None)
        if data.pop("full_scale", False):
            args.full_scale = True
        fields.update(data)
    if args.iters is not None:
        fields["iterations"] = args.iters
    if args.seed is not None:
        fields["seed"] = args.seed
    if args.full_scale:
        return TrainConfig(**fields)
    return TrainConfig.desk_scale(**fields)


def _cmd_train(args) -> int:
    scene = uio.load_scene(args.scene)
    config = _train_config(args)
    init_cloud = scene.cloud
    if args.init_ply is not None:
        init_cloud = uio.read_point_cloud(args.init_ply)
    if args.no_prune:
        config.paup_start = config.iterations + 1
    model = train(scene.views, init_cloud, config, scene=scene,
                  metrics_path=args.metrics,
                  checkpoint_dir=args.checkpoint_dir)
    out = args.out or os.path.join(args.scene, "final.ckpt")
    uio.save_checkpoint(out, model.cloud, model.medium, model.mlp,
                        model.prune_weights, model.final_keep,
                        model.config.to_dict(),
                        iteration=model.config.iterations)
    survivors = int(np.count_nonzero(model.final_keep))
    print(f"trained {config.iterations} iterations, "
          f"{survivors}/{len(model.cloud)} gaussians kept, "
          f"checkpoint at {out}")
    return 0


def _load_model(path) -> TrainedModel:
    state = uio.load_checkpoint(path)
    return TrainedModel(cloud=state["cloud"], medium=state["medium"],
                        mlp=state["mlp"],
                        prune_weights=state["prune_weights"],
                        final_keep=state["final_keep"],
                        config=TrainConfig(**state["config"])
                        if state["config"] else TrainConfig.desk_scale())


def _render_frame(model: TrainedModel, cam, mode, override_depth):
    out = render_eval(model, cam)
    if mode == "uri":
        return out["uri"].data
    if mode == "uwi":
        if override_depth is None:
            return out["uw"].data
        depth = np.full((cam.height, cam.width), float(override_depth))
        valid = np.ones_like(depth, dtype=bool)
        return forward_simulate(out["uri"].data, depth, valid,
                                model.medium, cam)
    depth = out["depth"].data[:, :, 0]
    return np.where(out["valid"], depth, 0.0)


def _cmd_render(args) -> int:
    model = _load_model(args.checkpoint)
    scene = uio.load_scene(args.scene)
    indices = range(len(scene.cameras)) if args.view is None \
        else [args.view]
    os.makedirs(args.out, exist_ok=True)
    for k in indices:
        if not 0 <= k < len(scene.cameras):
            raise FileNotFoundError(f"view {k} not in scene "
                                    f"(has {len(scene.cameras)})")
        frame = _render_frame(model, scene.cameras[k], args.mode,
                              args.override_depth)
        if args.raw_float:
            path = os.path.join(args.out, f"view_{k:02d}_{args.mode}.raw")
            uio.save_image_raw(path, frame)
        else:
            path = os.path.join(args.out, f"view_{k:02d}_{args.mode}.png")
            if args.mode == "depth":
                peak = frame.max()
                frame = frame / peak if peak > 0 else frame
            uio.save_image_png(path, frame)
        print(path)
    return 0


def _load_any_image(path):
    with open(path, "rb") as f:
        magic = f.read(len(uio.IMAGE_MAGIC))
    if magic == uio.IMAGE_MAGIC:
        return uio.load_image_raw(path).data
    return uio.load_image_png(path).data


def _cmd_eval(args) -> int:
    if args.render is not None or args.ref is not None:
        if args.render is None or args.ref is None:
            raise ValueError("--render and --ref must be given together")
        a = _load_any_image(args.render)
        b = _load_any_image(args.ref)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        report = {"psnr": psnr(a, b), "ssim": ssim(a, b)}
    else:
        if args.checkpoint is None or args.scene is None:
            raise ValueError("eval needs --checkpoint and --scene "
                             "(or --render/--ref)")
        model = _load_model(args.checkpoint)
        scene = uio.load_scene(args.scene)
        per_view = []
        for k, cam in enumerate(scene.cameras):
            uw = render_eval(model, cam)["uw"].data
            gt = scene.uw_images[k].data
            per_view.append({"view": k, "psnr": psnr(uw, gt),
                             "ssim": ssim(uw, gt)})
        report = {
            "psnr": float(np.mean([v["psnr"] for v in per_view])),
            "ssim": float(np.mean([v["ssim"] for v in per_view])),
            "n_gaussians": int(np.count_nonzero(model.final_keep)),
            "floater_ratio": floater_ratio(model.cloud, scene,
                                           model.final_keep),
            "per_view": per_view,
        }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out is not None:
        uio._atomic_write(args.out, text.encode("utf-8"))
    print(text)
    return 0


def _cmd_grad_check(args) -> int:
    cloud, medium, mlp, pw, views = build_gradcheck_scene(seed=args.seed)
    # last row is the coverage backdrop; fixed-step central differences
    # are truncation-limited on its frame-wide footprint
    report = finite_diff_check(cloud, medium, mlp, pw, views, 0,
                               step=args.step, tolerance=args.tolerance,
                               samples_per_group=args.samples,
                               seed=args.seed, sample_rows=len(cloud) - 1)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    if not report.passed:
        print("gradient check failed", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


def _cmd_prune_report(args) -> int:
    model = _load_model(args.checkpoint)
    scene = uio.load_scene(args.scene)
    if not 0 <= args.view < len(scene.cameras):
        raise ValueError(f"view {args.view} not in scene")
    opts = ForwardOptions(training=False, prune_active=True)
    state = forward_pipeline(model.cloud, model.medium, model.mlp,
                             model.prune_weights, scene.views, args.view,
                             opts)
    records = score_records(state.u_raw, state.p_raw, state.score,
                            state.prune_prob, state.decision.hard_keep)
    report = {
        "view": args.view,
        "tau": state.decision.tau,
        "n_pruned": state.decision.n_pruned,
        "n_ties": state.decision.n_ties,
        "gaussians": [vars(r) for r in records],
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out is not None:
        uio._atomic_write(args.out, text.encode("utf-8"))
    print(text)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "prune-report": _cmd_prune_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceDetected as exc:
        print(f"uwsplat: training diverged: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except (FileNotFoundError, NotADirectoryError, ValueError) as exc:
        print(f"uwsplat: {exc}", file=sys.stderr)
        return USER_ERROR
    except UwsplatError as exc:
        kind = type(exc).__name__
        print(f"uwsplat: {kind}: {exc}", file=sys.stderr)
        return USER_ERROR
    except Exception as exc:   # noqa: BLE001 - last-resort diagnostic
        print(f"uwsplat: internal error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
