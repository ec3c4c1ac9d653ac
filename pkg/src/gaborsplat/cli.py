"""Command-line interface: ``gaborsplat {train,render,eval,synth,gradcheck}``.

Exit codes: 0 success, 1 bad configuration or input data, 2 numerical failure
(training divergence, gradient check mismatch).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("gaborsplat")

# TrainConfig / LossWeights fields settable from flags and config files
_TRAIN_KEYS = {
    "iterations": int, "mode": str, "n_waves": int, "seed": int,
    "lr_position": float, "lr_position_final": float, "lr_quat": float, "lr_scale": float,
    "lr_alpha": float, "lr_color": float, "lr_wave": float, "position_lr_scale": float,
    "eval_every": int, "checkpoint_every": int, "test_fraction": float, "split_policy": str,
}
_LOSS_KEYS = {"lambda_dssim": float, "w_dist": float, "w_normal": float, "normal_start_iter": int}
_BOOL_KEYS = {"densify"}


class CliError(Exception):
    """Bad flags or inputs; reported with exit code 1."""


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(f"expected a boolean, got {text!r}")


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use TrainConfig/LossWeights field names."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key = value")
        cast = _TRAIN_KEYS.get(key) or _LOSS_KEYS.get(key) or (_parse_bool if key in _BOOL_KEYS else None)
        if cast is None:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = cast(val)
        except ValueError:
            raise CliError(f"{path}:{lineno}: invalid value {val!r} for {key}") from None
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, type=Path, help="dataset directory (or transforms JSON file)")
    p.add_argument("--format", required=True, choices=("colmap", "transforms"), help="dataset format")
    p.add_argument("--out", required=True, type=Path, help="output directory for checkpoints and metrics.log")
    p.add_argument("--seed", required=True, type=int, help="seed for initialization, view order and splits")
    p.add_argument("--config", type=Path, help="key = value file of training settings; flags override it")
    p.add_argument("--points", type=Path, help="COLMAP points3D.txt used for initialization instead of the dataset's")
    p.add_argument("--threads", type=int, help="rasterizer worker threads (results do not depend on it)")
    g = p.add_argument_group("model and schedule")
    g.add_argument("--mode", help="gabor, baselineA, baselineB, baselineC or gaussian_only (default gabor)")
    g.add_argument("--n-waves", dest="n_waves", type=int, help="waves per primitive, 1..16 (default 4)")
    g.add_argument("--iters", dest="iterations", type=int, help="training iterations (default 30000)")
    g.add_argument("--eval-every", dest="eval_every", type=int, help="held-out evaluation cadence, 0 = only at the end (default 1000)")
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="checkpoint cadence, 0 = only final (default 0)")
    g.add_argument("--test-fraction", dest="test_fraction", type=float, help="held-out fraction of views (default 1/8)")
    g.add_argument("--split-policy", dest="split_policy", choices=("every_nth", "random"), help="held-out view selection (default every_nth)")
    g.add_argument("--densify", action="store_const", const=True, default=None, help="rejected: densification is not supported")
    g = p.add_argument_group("learning rates")
    g.add_argument("--lr-position", dest="lr_position", type=float, help="initial position rate (default 1.6e-4)")
    g.add_argument("--lr-position-final", dest="lr_position_final", type=float, help="final position rate (default 1.6e-6)")
    g.add_argument("--position-lr-scale", dest="position_lr_scale", type=float, help="multiplier for position rates (default: camera extent)")
    g.add_argument("--lr-quat", dest="lr_quat", type=float, help="rotation rate (default 1e-3)")
    g.add_argument("--lr-scale", dest="lr_scale", type=float, help="log-scale rate (default 5e-3)")
    g.add_argument("--lr-alpha", dest="lr_alpha", type=float, help="opacity logit rate (default 5e-2)")
    g.add_argument("--lr-color", dest="lr_color", type=float, help="color logit rate (default 2.5e-3)")
    g.add_argument("--lr-wave", dest="lr_wave", type=float, help="wave weight/frequency/phase rate (default 2.5e-3)")
    g = p.add_argument_group("loss weights")
    g.add_argument("--lambda-dssim", dest="lambda_dssim", type=float, help="D-SSIM mix weight (default 0.2)")
    g.add_argument("--w-dist", dest="w_dist", type=float, help="distortion weight (default 1000)")
    g.add_argument("--w-normal", dest="w_normal", type=float, help="normal consistency weight (default 0.05)")
    g.add_argument("--normal-start-iter", dest="normal_start_iter", type=int, help="first iteration with the normal term (default 7000)")


def _add_dataset_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--data", required=required, type=Path, help="dataset directory (or transforms JSON file)")
    p.add_argument("--format", choices=("colmap", "transforms"), default="transforms", help="dataset format (default transforms)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaborsplat", description="Gabor splatting: fit, render and evaluate scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a scene to a dataset", description="Fit a scene to a dataset.")
    _add_train_flags(p)

    p = sub.add_parser("render", help="render a checkpoint", description="Render a checkpoint from a dataset view or a pose file.")
    p.add_argument("--ckpt", required=True, type=Path, help="checkpoint file (.gspl)")
    p.add_argument("--camera", required=True, help="view index into --data, or a JSON pose file (fl_x, fl_y, cx, cy, w, h, transform_matrix)")
    p.add_argument("--out", required=True, type=Path, help="output PNG")
    _add_dataset_flags(p, required=False)
    p.add_argument("--mode", help="render in another mode than the checkpoint's")
    p.add_argument("--show-splats", action="store_true", help="also write <out>_splats.png with one random flat color per primitive")
    p.add_argument("--seed", type=int, default=0, help="seed for --show-splats colors (default 0)")

    p = sub.add_parser("eval", help="held-out PSNR/SSIM table", description="Print per-view and mean PSNR/SSIM as TSV.")
    p.add_argument("--ckpt", required=True, type=Path, help="checkpoint file (.gspl)")
    _add_dataset_flags(p, required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test", help="views to evaluate (default test)")
    p.add_argument("--test-fraction", type=float, default=1.0 / 8.0, help="held-out fraction used for the split (default 1/8)")
    p.add_argument("--split-policy", choices=("every_nth", "random"), default="every_nth", help="split policy (default every_nth)")
    p.add_argument("--seed", type=int, default=0, help="seed for the random split policy (default 0)")

    p = sub.add_parser("synth", help="write a synthetic dataset", description="Render a textured unit plane from a hemisphere of views.")
    p.add_argument("--preset", required=True, help="texture: stripes, checker or rings")
    p.add_argument("--views", type=int, default=16, help="number of views, at least 2 (default 16)")
    p.add_argument("--res", type=_resolution, default=(128, 128), help="image size WxH (default 128x128)")
    p.add_argument("--freq", type=float, default=8.0, help="texture frequency in cycles per plane width (default 8)")
    p.add_argument("--points", type=int, default=64, help="approximate number of init points (default 64)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", required=True, type=int, help="seed for poses and point jitter")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check", description="Compare analytic gradients with central differences on a random scene.")
    p.add_argument("--seed", type=int, default=0, help="scene seed (default 0)")
    p.add_argument("--primitives", type=int, default=8, help="primitive count, 1..32 (default 8)")
    p.add_argument("--res", type=_resolution, default=(24, 24), help="image size WxH, at most 64x64 (default 24x24)")
    p.add_argument("--n-waves", type=int, default=4, help="waves per primitive (default 4)")
    p.add_argument("--mode", default="gabor", help="rendering mode (default gabor)")
    p.add_argument("--corrupt", metavar="GROUP", help="testing hook: perturb the analytic gradient of one parameter group")
    return parser


def _set_threads(n) -> None:
    if n is None:
        return
    if n < 1:
        raise CliError("--threads must be at least 1")
    import numba

    if n > numba.config.NUMBA_NUM_THREADS:
        raise CliError(f"--threads {n} exceeds the {numba.config.NUMBA_NUM_THREADS} threads numba was started with")
    numba.set_num_threads(n)


def train_config_from_args(args):
    from gaborsplat.losses import LossWeights
    from gaborsplat.optimizer import TrainConfig

    values = read_config_file(args.config) if args.config else {}
    for key in list(_TRAIN_KEYS) + list(_LOSS_KEYS) + list(_BOOL_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    values["seed"] = args.seed
    loss = {k: values.pop(k) for k in list(values) if k in _LOSS_KEYS}
    try:
        return TrainConfig(loss=LossWeights(**loss), **values).validate()
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from None


def cmd_train(args) -> int:
    config = train_config_from_args(args)
    from gaborsplat import dataio
    from gaborsplat.losses import format_metric
    from gaborsplat.optimizer import TrainingDiverged, mean_metrics, train
    from gaborsplat.rasterizer import NonFiniteGradientError

    if not args.data.exists():
        raise CliError(f"dataset not found: {args.data}")
    dataset = dataio.load_dataset(args.data, args.format)
    points = None
    if args.points is not None:
        _, points = dataio.parse_points3d_txt(dataio._read_text(args.points), str(args.points))

    def progress(rec):
        if "psnr" in rec:
            log.info("iter %d loss %.5f psnr %.3f ssim %.4f", rec["iter"], rec["total_loss"], rec["psnr"], rec["ssim"])

    try:
        result = train(dataset, config, args.out, init_points=points, on_record=progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NonFiniteGradientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_table(args.out / "test_metrics.tsv", result.test_metrics)
    summary = {"iterations": config.iterations, "mode": config.mode, "test_views": len(result.test_views)}
    if result.test_metrics:
        m = mean_metrics(result.test_metrics)
        summary.update(test_psnr=format_metric(m["psnr"]), test_ssim=format_metric(m["ssim"]))
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def _table_lines(rows) -> list[str]:
    from gaborsplat.losses import format_metric
    from gaborsplat.optimizer import mean_metrics

    lines = ["view\tpsnr\tssim"]
    lines += [f"{r['view']}\t{format_metric(r['psnr'])}\t{format_metric(r['ssim'])}" for r in rows]
    if rows:
        m = mean_metrics(rows)
        lines.append(f"mean\t{format_metric(m['psnr'])}\t{format_metric(m['ssim'])}")
    return lines


def _write_table(path: Path, rows) -> None:
    path.write_text("\n".join(_table_lines(rows)) + "\n")


def load_pose_file(path):
    """Single camera from a JSON object with transforms-style intrinsics and a camera-to-world matrix."""
    import json

    from gaborsplat import dataio

    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read camera file {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise CliError(f"{path}: expected a JSON object")
    frame = {"file_path": "pose", **obj}
    doc = {k: v for k, v in obj.items() if k != "transform_matrix"}
    doc["frames"] = [frame]
    return dataio.parse_transforms(doc, str(path)).cameras[0]


def _resolve_camera(args):
    """(camera, target image or None) for ``--camera``."""
    from gaborsplat import dataio

    choice = args.camera
    if choice.lstrip("-").isdigit():
        if args.data is None:
            raise CliError("--camera with a view index needs --data")
        ds = dataio.load_dataset(args.data, args.format)
        index = int(choice)
        if not 0 <= index < len(ds.views):
            raise CliError(f"view index {index} out of range (dataset has {len(ds.views)} views)")
        view = ds.views[index]
        return ds.cameras[view.camera_index], view.image
    if not Path(choice).exists():
        raise CliError(f"camera file not found: {choice}")
    return load_pose_file(choice), None


def splat_visualization(scene, camera, seed: int):
    """Render every primitive with a seeded random flat color (waves ignored)."""
    import numpy as np

    from gaborsplat.rasterizer import render_forward
    from gaborsplat.scene import logit

    rng = np.random.default_rng(seed)
    vis = scene.copy()
    vis.set("color_a", logit(rng.uniform(0.15, 0.95, (len(scene), 3))))
    return render_forward(vis, camera, mode="gaussian_only").color


def cmd_render(args) -> int:
    from gaborsplat import dataio
    from gaborsplat.losses import format_metric, psnr, ssim
    from gaborsplat.optimizer import quantize
    from gaborsplat.rasterizer import render_forward
    from gaborsplat.scene import check_mode

    scene = dataio.load_checkpoint(args.ckpt)
    mode = check_mode(args.mode) if args.mode else scene.mode
    camera, target = _resolve_camera(args)
    image = render_forward(scene, camera, mode=mode).color
    dataio.save_image(args.out, image)
    fields = {"out": args.out}
    if args.show_splats:
        path = args.out.with_name(args.out.stem + "_splats.png")
        dataio.save_image(path, splat_visualization(scene, camera, args.seed))
        fields["splats"] = path
    if target is not None:
        shown = quantize(image)
        fields.update(psnr=format_metric(psnr(shown, target)))
        if min(target.shape[:2]) >= 11:
            fields.update(ssim=format_metric(ssim(shown, target)))
    print(" ".join(f"{k}={v}" for k, v in fields.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from gaborsplat import dataio
    from gaborsplat.optimizer import evaluate_views, split_train_test

    scene = dataio.load_checkpoint(args.ckpt)
    ds = dataio.load_dataset(args.data, args.format)
    train_views, test_views = split_train_test(ds.views, args.test_fraction, args.seed, args.split_policy)
    views = {"test": test_views, "train": train_views, "all": sorted(ds.views, key=lambda v: v.name)}[args.split]
    if not views:
        raise CliError(f"the {args.split} split is empty")
    for line in _table_lines(evaluate_views(scene, views, ds.cameras)):
        print(line)
    print("# LPIPS: not supported")
    return EXIT_OK


def cmd_synth(args) -> int:
    from gaborsplat import synth

    if args.preset not in synth.PRESETS:
        raise CliError(f"invalid preset {args.preset!r}; choose from {', '.join(synth.PRESETS)}")
    width, height = args.res
    path = synth.write_synthetic(args.out, args.preset, args.views, width, height, args.freq, args.seed, args.points)
    print(f"transforms={path} views={args.views}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from gaborsplat.gradcheck import run_gradcheck

    width, height = args.res
    report = run_gradcheck(args.seed, args.primitives, width, height, args.n_waves, args.mode, args.corrupt)
    for g in report.groups:
        print(f"group={g.name} max_rel={g.max_rel:.3e} max_abs={g.max_abs:.3e} failures={g.failures}/{g.checked}")
    print(f"redraws={report.redraws} status={'pass' if report.ok else 'fail'}")
    if not report.ok:
        print("failing: " + ", ".join(report.failing()), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval, "synth": cmd_synth, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; bad flags are configuration errors here
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from gaborsplat.dataio import FormatError

    try:
        _set_threads(getattr(args, "threads", None))
        return COMMANDS[args.command](args)
    except (CliError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
