"""Command-line interface.

Every option can also be given in a JSON file passed with ``--config``
(keys are the long option names with ``-`` replaced by ``_``). Precedence:
built-in defaults < config file < command-line flags.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O or
file-format error.
"""
import argparse
import json
import os
import sys

from . import data as dio
from . import evaluation, models, training
from .errors import InvalidInputError, NumericFailureError, ParseError, SubsetLiftError, TrainingHalted
from .subset_loss import SubsetLossConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(Exception):
    pass


def _int_list(text):
    if isinstance(text, list):
        return [int(x) for x in text]
    text = str(text).strip()
    return [int(x) for x in text.split(",") if x.strip()] if text else []


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).lower() in ("", "none", "auto"):
        return None
    return float(text)


# (key, type, default, help)
COMMON = [("seed", int, 0, "seed for data generation, initialization and training")]

SYNTH = [
    ("out", str, "dataset.jsonl", "output dataset path"),
    ("frames", int, 2000, "number of frames"),
    ("k", int, 60, "keypoints per frame"),
    ("segments", int, 3, "chain segments"),
    ("max_angle", float, 60.0, "hinge angle limit in degrees"),
    ("tube_radius", float, 0.05, "radius of the keypoint tube around each segment"),
    ("occlusion_radius", float, 0.03, "screen distance below which points can occlude"),
    ("depth_margin", float, 0.02, "depth gap needed for an occlusion"),
]

MODEL = [
    ("family", str, "mixer", "network family: mixer or mlp"),
    ("depth", int, 8, "mixer blocks or MLP hidden layers"),
    ("width", int, 8, "mixer token size or MLP width (alias --token)"),
    ("expansion", int, 2, "hidden multiplier inside mixer blocks"),
]

TRAIN = [
    ("dataset", str, None, "training dataset path"),
    ("out_dir", str, "run", "directory for checkpoint.slc and metrics.csv"),
    ("resume", str, None, "checkpoint to resume from"),
    ("steps", int, 5000, "total optimizer steps"),
    ("batch_size", int, 128, "samples per batch"),
    ("learning_rate", _opt_float, None, "Adam step size; auto = 1e-3 mixer, 1e-4 mlp, 1e-5 sequence"),
    ("agc_lambda", float, 0.1, "adaptive gradient clipping ratio"),
    ("sequence_mode", _bool, False, "use the whole dataset as one batch"),
    ("occlusion_weight", float, 1.0, "weight of the occlusion loss (0 disables it)"),
    ("augment_rotation", _bool, False, "random in-plane rotation of every batch"),
    ("checkpoint_every", int, 1000, "steps between checkpoints"),
    ("sizes_random", _int_list, "", "comma-separated sizes of random subsets"),
    ("sizes_nn", _int_list, "32", "comma-separated sizes of nearest-neighbour subsets"),
    ("subsets_per_batch", int, 10, "subsets drawn per size and batch"),
    ("epsilon", float, 1e-8, "epsilon inside the log singular-value loss"),
    ("scale_mode", str, "orthographic-std", "orthographic-std or perspective-mean-depth"),
]

EVAL = [
    ("checkpoint", str, None, "model checkpoint"),
    ("predictions", str, None, "dataset file whose 3D points are scored instead of a checkpoint"),
    ("dataset", str, None, "dataset with ground truth"),
    ("out", str, "report.txt", "report path"),
    ("metrics", str, "mpjpe,depth-offset,sequence-scale", "comma-separated metric list"),
]

RECONSTRUCT = [
    ("checkpoint", str, None, "model checkpoint"),
    ("dataset", str, None, "dataset to reconstruct"),
    ("out_dir", str, "reconstruction", "output directory"),
    ("format", str, "ply", "ply or csv"),
]

EXPORT = [
    ("dataset", str, None, "dataset path"),
    ("checkpoint", str, None, "checkpoint; without it the ground truth is exported"),
    ("index", int, 0, "sample index"),
    ("out", str, "sample.ply", "output path; format from the extension"),
]

PREPROCESS = [
    ("dataset", str, None, "tracked sequence stored as a dataset (one frame per sample)"),
    ("out", str, "sequence.jsonl", "output dataset path"),
    ("min_visibility", float, 0.30, "minimum fraction of frames a track must be visible in"),
    ("target_k", int, 100, "keypoints kept by farthest point sampling"),
]

COMMANDS = {
    "synth": (SYNTH, "generate a synthetic hinge-chain dataset"),
    "train": (TRAIN + MODEL, "train a lifting network"),
    "eval": (EVAL, "evaluate a checkpoint or stored predictions against ground truth"),
    "reconstruct": (RECONSTRUCT, "write one point cloud per sample"),
    "export": (EXPORT, "write one reconstruction or ground-truth sample"),
    "preprocess": (PREPROCESS, "filter and downsample a tracked sequence"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="subsetlift", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (table, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="JSON file with option values")
        for key, typ, default, text in table + COMMON:
            flags = ["--" + key.replace("_", "-")]
            if key == "width":
                flags.append("--token")
            if key == "k":
                flags.append("--keypoints")
            p.add_argument(*flags, dest=key, type=typ, default=argparse.SUPPRESS, help=f"{text} (default: {default})")
    return parser


def resolve_options(command, namespace):
    """Merge defaults, the config file and explicit flags."""
    table = COMMANDS[command][0] + COMMON
    types = {key: typ for key, typ, _, _ in table}
    opts = {key: _int_list(default) if typ is _int_list else default for key, typ, default, _ in table}
    cfg_path = getattr(namespace, "config", None)
    if cfg_path:
        try:
            with open(cfg_path, encoding="utf-8") as fh:
                file_opts = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_opts) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        for key, val in file_opts.items():
            try:
                opts[key] = types[key](val) if val is not None else None
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"bad value for {key}: {val!r}") from exc
    for key in types:
        if hasattr(namespace, key):
            opts[key] = getattr(namespace, key)
    return opts


def _require(opts, *keys):
    for key in keys:
        if not opts.get(key):
            raise ConfigError(f"--{key.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(opts):
    ds = dio.synth_hinge_chain(
        opts["frames"],
        opts["k"],
        segments=opts["segments"],
        max_angle=opts["max_angle"],
        tube_radius=opts["tube_radius"],
        occlusion_radius=opts["occlusion_radius"],
        depth_margin=opts["depth_margin"],
        seed=opts["seed"],
    )
    dio.write_dataset(opts["out"], ds)
    print(f"frames={len(ds)} keypoints={ds.keypoints} occlusion_rate={ds.occlusion_rate():.6f} -> {opts['out']}")
    return EXIT_OK


def train_configs(opts, keypoints):
    model_cfg = models.ModelConfig(
        family=opts["family"],
        depth=opts["depth"],
        width=opts["width"],
        keypoints=keypoints,
        seed=opts["seed"],
        expansion=opts["expansion"],
    ).validate()
    loss_cfg = SubsetLossConfig(
        sizes_random=list(opts["sizes_random"]),
        sizes_nn=list(opts["sizes_nn"]),
        subsets_per_batch=opts["subsets_per_batch"],
        epsilon=opts["epsilon"],
        scale_mode=opts["scale_mode"],
    ).validate(keypoints)
    train_cfg = training.TrainConfig(
        learning_rate=opts["learning_rate"],
        batch_size=opts["batch_size"],
        steps=opts["steps"],
        agc_lambda=opts["agc_lambda"],
        seed=opts["seed"],
        sequence_mode=opts["sequence_mode"],
        occlusion_weight=opts["occlusion_weight"],
        augment_rotation=opts["augment_rotation"],
        checkpoint_every=opts["checkpoint_every"],
    ).validate()
    return model_cfg, loss_cfg, train_cfg


def cmd_train(opts):
    _require(opts, "dataset")
    ds = dio.read_dataset(opts["dataset"])
    model_cfg, loss_cfg, train_cfg = train_configs(opts, ds.keypoints)
    model = models.build_model(model_cfg)
    result = training.train(model, ds, loss_cfg, train_cfg, out_dir=opts["out_dir"], resume=opts["resume"])
    last = result.history[-1] if result.history else None
    summary = f"steps={train_cfg.steps} checkpoint={result.checkpoint}"
    if last:
        summary += f" subset_loss={last['subset_loss']:.6g} occlusion_loss={last['occlusion_loss']:.6g}"
    print(summary)
    return EXIT_OK


def _load_pair(opts):
    _require(opts, "checkpoint", "dataset")
    model, _, meta = models.load_model(opts["checkpoint"])
    ds = dio.read_dataset(opts["dataset"])
    if model.config.keypoints != ds.keypoints:
        raise ConfigError(f"checkpoint expects K={model.config.keypoints}, dataset has K={ds.keypoints}")
    return model, ds, meta.get("normalization")


def cmd_eval(opts):
    if opts["predictions"]:
        _require(opts, "dataset")
        ds = dio.read_dataset(opts["dataset"])
        pred_ds = dio.read_dataset(opts["predictions"])
        if pred_ds.gt is None or pred_ds.gt.shape != ds.w.shape[:2] + (3,):
            raise ConfigError("predictions must hold 3D points for every sample and keypoint")
        preds, source = pred_ds.gt, os.path.basename(opts["predictions"])
    else:
        model, ds, norm = _load_pair(opts)
        preds, source = None, os.path.basename(opts["checkpoint"])
    if ds.gt is None:
        raise ConfigError("dataset has no ground truth")
    if preds is None:
        preds = training.predict(model, ds, norm)
    metrics = [m.strip() for m in opts["metrics"].split(",") if m.strip()]
    unknown = set(metrics) - {"mpjpe", "depth-offset", "sequence-scale"}
    if unknown:
        raise ConfigError(f"unknown metrics: {', '.join(sorted(unknown))}")
    meta = {"coordinates": "dataset", "depth_offset": "per-sample minimizer", "source": source}
    report = evaluation.evaluate(preds, ds.gt, ds.v, metrics, meta)
    report.write(opts["out"])
    print(f"mpjpe={report.mpjpe:.6g}", end="")
    if report.mpjpe_depth_offset is not None:
        print(f" mpjpe_depth_offset={report.mpjpe_depth_offset:.6g}", end="")
    if report.mpjpe_sequence_scale is not None:
        print(f" mpjpe_sequence_scale={report.mpjpe_sequence_scale:.6g}", end="")
    print()
    return EXIT_OK


def cmd_reconstruct(opts):
    model, ds, norm = _load_pair(opts)
    fmt = opts["format"]
    if fmt not in ("ply", "csv"):
        raise ConfigError("format must be ply or csv")
    preds = training.predict(model, ds, norm)
    os.makedirs(opts["out_dir"], exist_ok=True)
    for i, points in enumerate(preds):
        evaluation.export_pointcloud(points, os.path.join(opts["out_dir"], f"sample_{i:06d}.{fmt}"), fmt)
    print(f"wrote {len(preds)} files to {opts['out_dir']}")
    return EXIT_OK


def cmd_export(opts):
    _require(opts, "dataset")
    ds = dio.read_dataset(opts["dataset"])
    if not 0 <= opts["index"] < len(ds):
        raise ConfigError(f"index {opts['index']} outside [0, {len(ds)})")
    if opts["checkpoint"]:
        model, _, meta = models.load_model(opts["checkpoint"])
        if model.config.keypoints != ds.keypoints:
            raise ConfigError(f"checkpoint expects K={model.config.keypoints}, dataset has K={ds.keypoints}")
        sel = slice(opts["index"], opts["index"] + 1)
        single = dio.Dataset(ds.manifest, ds.w[sel], ds.v[sel], None)
        points = training.predict(model, single, meta.get("normalization") or training.dataset_normalization(ds))[0]
    else:
        if ds.gt is None:
            raise ConfigError("dataset has no ground truth and no checkpoint was given")
        points = ds.gt[opts["index"]]
    evaluation.export_pointcloud(points, opts["out"])
    print(f"wrote {opts['out']}")
    return EXIT_OK


def cmd_preprocess(opts):
    _require(opts, "dataset")
    ds = dio.read_dataset(opts["dataset"])
    out = dio.preprocess_sequence(
        ds.w, ds.v, ds.gt, min_visibility=opts["min_visibility"], target_keypoints=opts["target_k"], camera=ds.camera
    )
    dio.write_dataset(opts["out"], out)
    print(f"kept {out.keypoints} of {ds.keypoints} tracks -> {opts['out']}")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "export": cmd_export,
    "preprocess": cmd_preprocess,
}


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve_options(ns.command, ns)
        return HANDLERS[ns.command](opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingHalted as exc:
        where = exc.last_good_checkpoint or "none written"
        print(f"numeric failure at step {exc.step}: {exc}; last good checkpoint: {where}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, SubsetLiftError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
