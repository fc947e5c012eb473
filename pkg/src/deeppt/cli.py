"""``deeppt`` command line.

Every option can come from a JSON config (``--config``) or a flag; flags
win over the config, which wins over built-in defaults. Each run writes
the resolved configuration (including the seed) to ``<out>/config.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import cv2
import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets as ds
from .heads import (
    DETECTOR_HIDDEN,
    SCORE_HEAD,
    SCORE_HIDDEN,
    generate_detector_labels,
    make_score_pairs,
    match_score,
    train_detector_head,
    train_score_head,
)
from .klt import KLTTracker
from .metrics import (
    REFERENCE_BACKPROJECTION,
    backprojection_report,
    backprojection_table,
    error_at_95_recall,
    pixel_accuracy,
    pixel_accuracy_table,
    read_correspondences,
    read_homographies,
    ubc_table,
    write_json,
)
from .nn import DEFAULT_CONV_WIDTHS, SCORE_CONFIG, TRACKER_CONFIG, load_params, save_params
from .pipeline import (
    DeepPTModel,
    PipelineConfig,
    PreconditionError,
    format_track_table,
    parse_track_table,
    run_sequence,
    summary,
    write_overlays,
)
from .tracker import predict_displacement, score_maps, train_tracker

log = logging.getLogger("deeppt")

DATA_ENV = "DEEPPT_DATA"
IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class UsageError(Exception):
    pass


def _int_list(value):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(int(v) for v in value)


def _float_list(value):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(float(v) for v in value)


def _bool(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
        return value.lower() in ("true", "1")
    raise ValueError(f"not a boolean: {value!r}")


def _opt(kind, default, help, path=False):
    return {"type": kind, "default": default, "help": help, "path": path}


def _train_opts(preset):
    return {
        "lr": _opt(float, preset.lr, "base learning rate"),
        "lr_decay": _opt(float, preset.lr_decay, "per-iteration learning-rate decay"),
        "weight_decay": _opt(float, preset.weight_decay, "L2 weight decay"),
        "momentum": _opt(float, preset.momentum, "Adam beta1"),
        "step_factor": _opt(float, preset.step_factor, "step-down factor"),
        "step_every": _opt(int, preset.step_every, "epochs between step-downs"),
        "step_start": _opt(int, preset.step_start, "first epoch eligible for step-down"),
        "epochs": _opt(int, preset.epochs, "training epochs"),
        "batch_size": _opt(int, preset.batch_size, "mini-batch size"),
    }


_PIPELINE = PipelineConfig()
PIPELINE_OPTS = {
    "epsilon": _opt(int, _PIPELINE.epsilon, "re-detect when live tracks drop below this"),
    "score_threshold": _opt(float, _PIPELINE.score_threshold, "drop tracks scoring below this"),
    "detector_threshold": _opt(float, _PIPELINE.detector_threshold,
                               "minimum trackability for new tracks"),
    "max_tracks": _opt(int, _PIPELINE.max_tracks, "cap on live tracks"),
    "nms_radius": _opt(int, _PIPELINE.nms_radius, "detector NMS radius (px)"),
    "stride": _opt(int, _PIPELINE.stride, "detector scan stride (px)"),
}

COMMON_OPTS = {
    "out": _opt(str, None, "output directory (default: runs/<command>)"),
    "seed": _opt(int, 0, "random seed"),
    "threads": _opt(int, None, "cap on worker threads (1 = fully serial)"),
    "data_root": _opt(str, None, f"dataset root for relative paths (default: ${DATA_ENV})"),
    "log_level": _opt(str, "INFO", "logging level"),
}

COMMANDS = {
    "gen-synthetic": ("synthetic translation samples with exact ground truth", {
        "count": _opt(int, 2000, "number of samples"),
        "size": _opt(int, 93, "texture side length"),
        "max_shift": _opt(int, ds.WINDOW_RADIUS, "maximum |dx|, |dy|"),
    }),
    "gen-samples": ("tracking samples from KITTI flow pairs", {
        "kitti": _opt(str, "kitti", "KITTI flow root (image_2, flow_noc)", path=True),
        "max_samples": _opt(int, None, "total sample cap"),
        "max_per_pair": _opt(int, None, "per-pair sample cap"),
        "harris_threshold": _opt(float, 0.01, "Harris threshold, fraction of max response"),
    }),
    "train-tracker": ("train the conv stack (stage 1)", {
        "samples": _opt(str, None, "DPTS sample cache", path=True),
        "widths": _opt(_int_list, DEFAULT_CONV_WIDTHS, "comma-separated conv widths"),
        **_train_opts(TRACKER_CONFIG),
    }),
    "train-score": ("train the tracking-score head on a frozen conv stack (stage 2)", {
        "weights": _opt(str, None, "DPT1 weights with a trained conv stack", path=True),
        "samples": _opt(str, None, "DPTS sample cache", path=True),
        "ubc_dir": _opt(str, None, "UBC patch directory (alternative to --samples)", path=True),
        "max_pairs": _opt(int, None, "cap on training pairs"),
        "hidden": _opt(_int_list, SCORE_HIDDEN, "hidden layer widths"),
        **_train_opts(SCORE_CONFIG),
    }),
    "train-detector": ("train the detector head on a frozen conv stack (stage 3)", {
        "weights": _opt(str, None, "DPT1 weights with a trained conv stack", path=True),
        "samples": _opt(str, None, "DPTS sample cache", path=True),
        "tolerance": _opt(float, 3.0, "correct-track tolerance (px)"),
        "hidden": _opt(_int_list, DETECTOR_HIDDEN, "hidden layer widths"),
        **_train_opts(SCORE_CONFIG),
    }),
    "track": ("run the detect/track loop over a frame directory", {
        "weights": _opt(str, None, "DPT1 weights with both heads", path=True),
        "frames": _opt(str, None, "directory of frames in name order", path=True),
        "overlays": _opt(_bool, True, "write PNG overlays"),
        **PIPELINE_OPTS,
    }),
    "eval-kitti": ("x-pixel accuracy of Deep-PT and KLT", {
        "weights": _opt(str, None, "DPT1 weights", path=True),
        "kitti": _opt(str, None, "KITTI flow root", path=True),
        "samples": _opt(str, None, "DPTS cache (Deep-PT only)", path=True),
        "max_samples": _opt(int, None, "cap on evaluated points"),
        "thresholds": _opt(_float_list, (1.0, 2.0, 3.0), "pixel thresholds"),
        "klt": _opt(_bool, True, "also evaluate the KLT baseline"),
    }),
    "eval-ubc": ("patch matching error at 95% recall", {
        "weights": _opt(str, None, "DPT1 weights", path=True),
        "test_dir": _opt(str, None, "UBC directory to evaluate on", path=True),
        "train_dir": _opt(str, None, "UBC directory to fit the score head on first",
                          path=True),
        "max_pairs": _opt(int, None, "cap on pairs per split"),
        **_train_opts(SCORE_CONFIG),
    }),
    "eval-backproj": ("homography back-projection error", {
        "correspondences": _opt(str, None, "x_prev y_prev x_curr y_curr patch_id file",
                                path=True),
        "homographies": _opt(str, None, "directory of <patch_id>.txt homographies", path=True),
        "inlier_threshold": _opt(float, 5.0, "inlier threshold (px)"),
        "method": _opt(str, "Deep-PT (this run)", "row label"),
    }),
    "visualize": ("draw a track table over its frames", {
        "frames": _opt(str, None, "frame directory", path=True),
        "tracks": _opt(str, None, "track table file", path=True),
    }),
}


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="deeppt", description="Deep-PT point tracker")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (help_text, opts) in COMMANDS.items():
        help_text = help_text.replace("%", "%%")  # argparse formats help with %
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of option values")
        for key, opt in {**opts, **COMMON_OPTS}.items():
            default = opt["default"]
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            p.add_argument(_flag(key), dest=key, default=argparse.SUPPRESS,
                           metavar=key.upper(),
                           help=(opt["help"] if default is None
                                 else f"{opt['help']} [default: {default}]").replace("%", "%%"))
    return parser


def resolve_config(command, given, config_file=None, env=None):
    """Merge defaults < config file < flags, converting and checking every value."""
    env = os.environ if env is None else env
    options = {**COMMANDS[command][1], **COMMON_OPTS}
    values = {k: s["default"] for k, s in options.items()}
    if config_file is not None:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_file}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_file} must hold a JSON object")
        loaded.pop("command", None)
        for key in loaded:
            if key not in options:
                raise UsageError(f"unknown config key {key!r} for {command}")
        values.update(loaded)
    values.update(given)
    for key, value in values.items():
        if value is None:
            continue
        try:
            values[key] = options[key]["type"](value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    if values["data_root"] is None:
        values["data_root"] = env.get(DATA_ENV)
    if values["out"] is None:
        values["out"] = str(Path("runs") / command)
    if values["threads"] is not None and values["threads"] < 1:
        raise UsageError("threads must be >= 1")
    for key, opt in options.items():
        if opt["path"] and values[key] is not None:
            values[key] = str(_data_path(values[key], values["data_root"], key))
    values["command"] = command
    return values


def _data_path(value, root, key):
    """Relative paths missing from the working directory are tried under ``root``."""
    p = Path(value)
    if not p.is_absolute() and not p.exists() and root:
        p = Path(root) / p
    if not p.exists():
        raise UsageError(f"{_flag(key)}: path does not exist: {p}")
    return p


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _train_config(cfg, preset):
    return preset.replace(**{k: cfg[k] for k in (
        "lr", "lr_decay", "weight_decay", "momentum", "step_factor", "step_every",
        "step_start", "epochs", "batch_size")}, seed=cfg["seed"])


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) is None:
            raise PreconditionError(f"{cfg['command']} requires {_flag(key)}")


def _load_weights(cfg):
    _require(cfg, "weights")
    return load_params(cfg["weights"])


def _list_frames(directory):
    files = sorted((p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
                   key=ds._natural_key)
    if not files:
        raise ds.DatasetError(f"{directory}: no image files")
    return files


def _write_loss_log(path, losses):
    Path(path).write_text("".join(f"{i + 1} {v:.8f}\n" for i, v in enumerate(losses)))


def _subsample(n, cap, seed):
    if cap is None or cap >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, cap, replace=False))


def _ubc_pairs(directory, cap, seed):
    data = ds.parse_ubc_dataset(directory)
    if not data.pairs:
        raise ds.DatasetError(f"{directory}: no m50_*.txt match files")
    name = sorted(data.pairs)[0]
    a, b, labels = data.pair_patches(name)
    keep = _subsample(len(labels), cap, seed)
    templates = ds.center_crop(a[keep], ds.TEMPLATE_SIZE)
    searches = ds.center_crop(b[keep], ds.SEARCH_SIZE)
    return templates, searches, labels[keep].astype(np.int64), name


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_synthetic(cfg, out):
    samples = ds.make_synthetic_translations(cfg["count"], seed=cfg["seed"], size=cfg["size"],
                                             max_shift=cfg["max_shift"])
    ds.write_samples(out / "samples.dpts", samples)
    write_json(out / "metrics.json", {"samples": len(samples), "seed": cfg["seed"]})
    log.info("wrote %d synthetic samples", len(samples))


def cmd_gen_samples(cfg, out):
    samples = ds.kitti_samples(cfg["kitti"], max_samples=cfg["max_samples"],
                               max_per_pair=cfg["max_per_pair"],
                               harris_threshold=cfg["harris_threshold"])
    ds.write_samples(out / "samples.dpts", samples)
    write_json(out / "metrics.json", {"samples": len(samples), "seed": cfg["seed"]})
    log.info("wrote %d KITTI samples", len(samples))


def cmd_train_tracker(cfg, out):
    _require(cfg, "samples")
    samples = ds.read_samples(cfg["samples"])
    config = _train_config(cfg, TRACKER_CONFIG)
    params, losses = train_tracker(samples, config, widths=cfg["widths"])
    save_params(params, out / "weights.dpt1")
    _write_loss_log(out / "losses.txt", losses)
    write_json(out / "metrics.json", {"losses": losses, "seed": cfg["seed"],
                                      "samples": len(samples)})


def cmd_train_score(cfg, out):
    params = _load_weights(cfg)
    if cfg["samples"] is not None:
        samples = ds.read_samples(cfg["samples"])
        templates, searches, labels = make_score_pairs(samples, seed=cfg["seed"])
        keep = _subsample(len(labels), cfg["max_pairs"], cfg["seed"])
        templates, searches, labels = templates[keep], searches[keep], labels[keep]
    elif cfg["ubc_dir"] is not None:
        templates, searches, labels, _ = _ubc_pairs(cfg["ubc_dir"], cfg["max_pairs"],
                                                    cfg["seed"])
    else:
        raise PreconditionError("train-score requires --samples or --ubc-dir")
    _, losses = train_score_head(params, templates, searches, labels,
                                 _train_config(cfg, SCORE_CONFIG), cfg["hidden"])
    save_params(params, out / "weights.dpt1")
    _write_loss_log(out / "losses.txt", losses)
    write_json(out / "metrics.json", {"losses": losses, "pairs": len(labels),
                                      "seed": cfg["seed"]})


def cmd_train_detector(cfg, out):
    params = _load_weights(cfg)
    _require(cfg, "samples")
    samples = ds.read_samples(cfg["samples"])
    labels = generate_detector_labels(params, samples, cfg["tolerance"], cfg["seed"])
    _, losses = train_detector_head(params, samples.templates[labels.sample_index],
                                    labels.labels, _train_config(cfg, SCORE_CONFIG),
                                    cfg["hidden"])
    save_params(params, out / "weights.dpt1")
    _write_loss_log(out / "losses.txt", losses)
    write_json(out / "metrics.json", {
        "losses": losses, "points": len(labels),
        "positive": int(labels.labels.sum()), "seed": cfg["seed"],
    })


def cmd_track(cfg, out):
    _require(cfg, "frames")
    model = DeepPTModel(_load_weights(cfg))
    config = PipelineConfig(**{k: cfg[k] for k in PIPELINE_OPTS})
    frames = [ds.load_gray_image(p) for p in _list_frames(cfg["frames"])]
    state, reports = run_sequence(frames, model, config)
    text = format_track_table(state)
    (out / "tracks.txt").write_text(text, encoding="utf-8")
    write_json(out / "metrics.json", {"summary": summary(state), "frames": reports,
                                      "seed": cfg["seed"]})
    if cfg["overlays"]:
        write_overlays(frames, parse_track_table(text), out / "overlays")
    print(text.splitlines()[-1])


def _kitti_eval_points(root, cap, seed):
    """Per pair: images, frame-t points and float ground-truth flow at them."""
    pairs = []
    for t0, t1, fl in ds.find_kitti_pairs(root):
        img_t, img_t1 = ds.load_gray_image(t0), ds.load_gray_image(t1)
        flow = ds.decode_kitti_flow(fl)
        corners = ds.harris_corners(img_t)
        samples, _ = ds.generate_tracking_samples(img_t, img_t1, flow, corners)
        if len(samples) == 0:
            continue
        x, y = samples.positions.T
        gt = np.column_stack([flow.u[y, x], flow.v[y, x]])
        pairs.append((img_t, img_t1, samples, gt))
    total = sum(len(p[2]) for p in pairs)
    keep = _subsample(total, cap, seed)
    out, start = [], 0
    for img_t, img_t1, samples, gt in pairs:
        local = keep[(keep >= start) & (keep < start + len(samples))] - start
        start += len(samples)
        if len(local):
            out.append((img_t, img_t1, samples.subset(local), gt[local]))
    return out


def cmd_eval_kitti(cfg, out):
    params = _load_weights(cfg)
    thresholds = cfg["thresholds"]
    results = {}
    if cfg["kitti"] is not None:
        pairs = _kitti_eval_points(cfg["kitti"], cfg["max_samples"], cfg["seed"])
        if not pairs:
            raise ds.DatasetError(f"{cfg['kitti']}: no usable points")
        pred, klt_pred, gts = [], [], []
        klt = KLTTracker()
        for img_t, img_t1, samples, gt in pairs:
            pred.append(predict_displacement(score_maps(params, samples.templates,
                                                        samples.searches)).reshape(-1, 2))
            gts.append(gt)
            if cfg["klt"]:
                p = samples.positions.astype(np.float64)
                moved, _, _ = klt.track(img_t, img_t1, p)
                klt_pred.append(moved - p)
        gt = np.concatenate(gts)
        results["Deep-PT (this run)"] = pixel_accuracy(np.concatenate(pred), gt, thresholds)
        if cfg["klt"]:
            results["KLT (this run)"] = pixel_accuracy(np.concatenate(klt_pred), gt, thresholds)
        n = len(gt)
    elif cfg["samples"] is not None:
        samples = ds.read_samples(cfg["samples"])
        keep = _subsample(len(samples), cfg["max_samples"], cfg["seed"])
        samples = samples.subset(keep)
        pred = predict_displacement(score_maps(params, samples.templates, samples.searches))
        results["Deep-PT (this run)"] = pixel_accuracy(pred.reshape(-1, 2),
                                                       samples.displacements, thresholds)
        n = len(samples)
    else:
        raise PreconditionError("eval-kitti requires --kitti or --samples")
    table = pixel_accuracy_table(results, thresholds)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    write_json(out / "metrics.json", {
        "points": n, "seed": cfg["seed"],
        "accuracy": {m: {f"{t:g}": v for t, v in acc.items()} for m, acc in results.items()},
        "reference_backprojection": REFERENCE_BACKPROJECTION,
    })
    print(table)


def cmd_eval_ubc(cfg, out):
    params = _load_weights(cfg)
    _require(cfg, "test_dir")
    train_name = "pretrained"
    if cfg["train_dir"] is not None:
        t, s, y, _ = _ubc_pairs(cfg["train_dir"], cfg["max_pairs"], cfg["seed"])
        train_score_head(params, t, s, y, _train_config(cfg, SCORE_CONFIG))
        save_params(params, out / "weights.dpt1")
        train_name = Path(cfg["train_dir"]).name
    if SCORE_HEAD not in params.heads:
        raise PreconditionError("weights lack a score head; pass --train-dir to fit one")
    t, s, y, match_file = _ubc_pairs(cfg["test_dir"], cfg["max_pairs"], cfg["seed"])
    scores = np.atleast_1d(match_score(params.heads[SCORE_HEAD], score_maps(params, t, s)))
    err = error_at_95_recall(scores, y)
    test_name = Path(cfg["test_dir"]).name
    table = ubc_table({(train_name, test_name): err})
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    write_json(out / "metrics.json", {
        "train": train_name, "test": test_name, "match_file": match_file,
        "pairs": len(y), "error_at_95_recall": err, "seed": cfg["seed"],
    })
    print(table)


def cmd_eval_backproj(cfg, out):
    _require(cfg, "correspondences", "homographies")
    prev, curr, ids = read_correspondences(cfg["correspondences"])
    report = backprojection_report(prev, curr, ids, read_homographies(cfg["homographies"]),
                                   cfg["inlier_threshold"])
    table = backprojection_table({cfg["method"]: report})
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    write_json(out / "metrics.json", {"report": report.to_dict(),
                                      "reference": REFERENCE_BACKPROJECTION,
                                      "seed": cfg["seed"]})
    print(table)


def cmd_visualize(cfg, out):
    _require(cfg, "frames", "tracks")
    frames = [ds.load_gray_image(p) for p in _list_frames(cfg["frames"])]
    rows = parse_track_table(Path(cfg["tracks"]).read_text(encoding="utf-8"))
    paths = write_overlays(frames, rows, out / "overlays")
    log.info("wrote %d overlays", len(paths))


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "gen-samples": cmd_gen_samples,
    "train-tracker": cmd_train_tracker,
    "train-score": cmd_train_score,
    "train-detector": cmd_train_detector,
    "track": cmd_track,
    "eval-kitti": cmd_eval_kitti,
    "eval-ubc": cmd_eval_ubc,
    "eval-backproj": cmd_eval_backproj,
    "visualize": cmd_visualize,
}


def _setup_logging(level, out):
    root = logging.getLogger("deeppt")
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    # no timestamps, so logs are reproducible too
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(fmt)
    fileh = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    fileh.setFormatter(fmt)
    root.addHandler(console)
    root.addHandler(fileh)
    root.setLevel(level.upper())
    root.propagate = False
    return fileh


def dispatch(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    handler = _setup_logging(cfg["log_level"], out)
    try:
        if cfg["threads"] is not None:
            cv2.setNumThreads(cfg["threads"])
            with threadpool_limits(limits=cfg["threads"]):
                HANDLERS[cfg["command"]](cfg, out)
        else:
            HANDLERS[cfg["command"]](cfg, out)
    finally:
        logging.getLogger("deeppt").removeHandler(handler)
        handler.close()
    return 0


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    try:
        cfg = resolve_config(ns.command, given, ns.config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deeppt: error: {exc}", file=sys.stderr)
        return 2
    try:
        return dispatch(cfg)
    except (PreconditionError, ds.DatasetError, ValueError, KeyError, OSError) as exc:
        print(f"deeppt {cfg['command']}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
