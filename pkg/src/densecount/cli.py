"""Command-line surface wiring the library into reproducible runs.

Commands: make-density, synth, train, eval, predict. Configuration layers
as file < environment < flags; every run hashes its resolved domain config
into a fingerprint that is stamped on the artifacts it produces (report
JSON, log CSV, checkpoint metadata, or a config.resolved.json manifest for
directories of binary outputs).

Exit codes: 0 success, 1 internal error, 2 input error, 3 config or
checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .annotations import parse_dot_csv
from .density import (
    DEFAULT_KNN_K,
    DEFAULT_SIGMA,
    DEFAULT_SIGMA0_SQ,
    KernelSpec,
    integrate_count,
    render_heatmap,
    write_density_map,
)
from .errors import (
    AnnotationParseError,
    CheckpointError,
    ConfigError,
    DensecountError,
    FormatError,
    ValidationError,
)
from .pipeline import (
    SplitSpec,
    TrainConfig,
    compare_report,
    evaluate,
    ground_truth_map,
    load_dataset,
    load_image,
    make_splits,
    train,
    write_training_log,
)
from .synthgen import BACKGROUND_MODES, SceneSpec, generate_dataset
from .unet import UNetConfig, load_checkpoint, predict_count, save_checkpoint

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_CONFIG = 3

ENV_CONFIG = "DENSECOUNT_CONFIG"
ENV_SEED = "DENSECOUNT_SEED"

_SHARED_DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "sigma": DEFAULT_SIGMA,
    "adaptive": False,
    "k": DEFAULT_KNN_K,
    "sigma0_sq": DEFAULT_SIGMA0_SQ,
    "scale": 100.0,
}

_COMMAND_DEFAULTS: dict[str, dict] = {
    "make-density": {"out": "density-maps", "check": False, "heatmaps": False},
    "synth": {
        "out": "synth-data",
        "size": 300,
        "width": 128,
        "height": 128,
        "count_min": 0,
        "count_max": 10,
        "radius_min": 3.0,
        "radius_max": 6.0,
        "background": "speckle",
        "glare_probability": 0.3,
        "glare_intensity": 0.35,
        "min_separation": 8.0,
        "seed": 42,
    },
    "train": {
        "out": "model.unck",
        "log": None,
        "epochs": 30,
        "batch_size": 8,
        "patch_size": 64,
        "learning_rate": 1e-3,
        "patience": None,
        "patches_per_image": 4,
        "object_biased": False,
        "flip_augment": False,
        "split": "0.8,0.1,0.1",
        "depth": 3,
        "base_channels": 16,
        "in_channels": 1,
    },
    "eval": {"out": None, "oracle": False, "heatmap_dir": None,
             "depth": None, "base_channels": None, "in_channels": None},
    "predict": {"heatmap": None},
}

# output locations, concurrency, and presentation toggles do not change what
# a run computes, so they stay out of the fingerprint
_FP_EXCLUDE = {"out", "log", "check", "heatmaps", "heatmap", "heatmap_dir", "jobs"}

_INT_KEYS = {"seed", "jobs", "k", "size", "width", "height", "count_min", "count_max",
             "epochs", "batch_size", "patch_size", "patches_per_image",
             "depth", "base_channels", "in_channels", "patience"}
_FLOAT_KEYS = {"sigma", "sigma0_sq", "scale", "radius_min", "radius_max",
               "glare_probability", "glare_intensity", "min_separation", "learning_rate"}
_BOOL_KEYS = {"adaptive", "check", "heatmaps", "object_biased", "flip_augment", "oracle"}


def _coerce(key: str, value):
    if value is None:
        return None
    try:
        if key in _BOOL_KEYS:
            if not isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")
            return value
        if key in _INT_KEYS:
            if isinstance(value, bool) or int(value) != value:
                raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} has invalid value {value!r}") from None
    return value


def resolve_config(args: argparse.Namespace, command: str) -> tuple[dict, str]:
    """Layer defaults < config file < environment < flags; returns (config, fingerprint)."""
    cfg = {**_SHARED_DEFAULTS, **_COMMAND_DEFAULTS[command]}

    file_path = args.config if args.config is not None else os.environ.get(ENV_CONFIG)
    if file_path:
        path = Path(file_path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in data.items():
            if key not in cfg:
                raise ConfigError(f"config file {path}: unknown key {key!r} for {command}")
            cfg[key] = _coerce(key, value)

    if getattr(args, "seed", None) is None and ENV_SEED in os.environ:
        try:
            cfg["seed"] = int(os.environ[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {os.environ[ENV_SEED]!r}") from None

    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value)

    payload = {k: v for k, v in sorted(cfg.items()) if k not in _FP_EXCLUDE}
    payload["command"] = command
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return cfg, hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: dict, fingerprint: str) -> None:
    payload = {
        "command": command,
        "config": {k: v for k, v in sorted(cfg.items()) if k not in _FP_EXCLUDE},
        "config_fingerprint": fingerprint,
    }
    (out_dir / "config.resolved.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _kernel_from(cfg: dict) -> KernelSpec:
    if cfg["adaptive"]:
        return KernelSpec.adaptive(sigma0_sq=cfg["sigma0_sq"], k=cfg["k"])
    return KernelSpec.constant(sigma=cfg["sigma"])


def _resolve_dataset(path_str: str) -> tuple[Path, str]:
    """Accept either a dataset directory (with dots.csv) or a dot CSV path."""
    path = Path(path_str)
    if path.is_dir():
        return path, "dots.csv"
    if path.is_file():
        return path.parent, path.name
    raise ValidationError(f"dataset not found: {path}")


def _density_task(task):
    img, kernel = task
    return ground_truth_map(img, kernel)


def cmd_make_density(args, cfg: dict, fingerprint: str) -> int:
    csv_path = Path(args.annotations)
    if not csv_path.is_file():
        raise ValidationError(f"annotation file not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        images = parse_dot_csv(fh)

    stems = [Path(img.image_path).stem for img in images]
    if len(set(stems)) != len(stems):
        raise ValidationError("annotation image names collide after dropping directories")

    kernel = _kernel_from(cfg)
    if kernel.mode == "adaptive":
        for img in images:
            if img.count < 2:
                print(f"warning: {img.image_path}: fewer than 2 dots, adaptive sigma "
                      f"falls back to constant", file=sys.stderr)

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(img, kernel) for img in images]
    if cfg["jobs"] > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            maps = list(pool.map(_density_task, tasks, chunksize=4))
    else:
        maps = [_density_task(t) for t in tasks]

    violations = 0
    for img, stem, dm in zip(images, stems, maps):
        write_density_map(dm, out_dir / f"{stem}.dmap")
        if cfg["heatmaps"]:
            render_heatmap(dm, out_dir / f"{stem}.png")
        if cfg["check"]:
            mass = integrate_count(dm)
            ok = abs(mass - img.count) <= 1e-4 * max(1.0, img.count)
            print(f"{img.image_path}: mass {mass:.4f} / dots {img.count}"
                  + ("" if ok else "  VIOLATION"), file=sys.stderr)
            violations += 0 if ok else 1
    _write_manifest(out_dir, "make-density", cfg, fingerprint)
    if violations:
        print(f"error: {violations} of {len(images)} maps violate count conservation",
              file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def cmd_synth(args, cfg: dict, fingerprint: str) -> int:
    spec = SceneSpec(
        width=cfg["width"],
        height=cfg["height"],
        count_min=cfg["count_min"],
        count_max=cfg["count_max"],
        radius_min=cfg["radius_min"],
        radius_max=cfg["radius_max"],
        background=cfg["background"],
        glare_probability=cfg["glare_probability"],
        glare_intensity=cfg["glare_intensity"],
        min_separation=cfg["min_separation"],
        seed=cfg["seed"],
    )
    out_dir = Path(cfg["out"])
    truths = generate_dataset(spec, cfg["size"], out_dir, jobs=cfg["jobs"])
    _write_manifest(out_dir, "synth", cfg, fingerprint)
    print(f"wrote {len(truths)} scenes to {out_dir}", file=sys.stderr)
    return EXIT_OK


def _parse_split(raw) -> tuple[float, float, float]:
    if isinstance(raw, str):
        parts = raw.split(",")
    else:
        parts = list(raw)
    if len(parts) != 3:
        raise ConfigError(f"split needs three comma-separated values, got {raw!r}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"split values must be numbers, got {raw!r}") from None
    total = sum(vals)
    if total <= 0:
        raise ConfigError(f"split values must sum to a positive number, got {raw!r}")
    return tuple(v / total for v in vals)


def _split_items(items, split, seed: int):
    spec = SplitSpec(*split, seed=seed)
    by_path = {truth.image_path: (img, truth) for img, truth in items}
    train_t, val_t, test_t = make_splits([t for _, t in items], spec)
    pick = lambda ts: [by_path[t.image_path] for t in ts]
    return pick(train_t), pick(val_t), pick(test_t)


def cmd_train(args, cfg: dict, fingerprint: str) -> int:
    root, csv_name = _resolve_dataset(args.dataset)
    items = load_dataset(root, csv_name, channels=cfg["in_channels"])
    train_set, val_set, test_set = _split_items(items, _parse_split(cfg["split"]), cfg["seed"])
    del test_set  # held out; eval scores it from the same split seed

    config = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        patch_size=cfg["patch_size"],
        learning_rate=cfg["learning_rate"],
        kernel=_kernel_from(cfg),
        scale=cfg["scale"],
        seed=cfg["seed"],
        patience=cfg["patience"],
        patches_per_image=cfg["patches_per_image"],
        object_biased=cfg["object_biased"],
        flip_augment=cfg["flip_augment"],
    )
    model_config = UNetConfig(depth=cfg["depth"], base_channels=cfg["base_channels"],
                              in_channels=cfg["in_channels"])

    def report(row):
        print(f"epoch {row.epoch}: train_loss {row.train_loss:.5f} "
              f"val_rmse {row.val_rmse:.3f} val_mae {row.val_mae:.3f}", file=sys.stderr)

    model, logs = train(train_set, val_set, config, model_config=model_config, on_epoch=report)
    model.meta["config_fingerprint"] = fingerprint
    model.meta["kernel_mode"] = config.kernel.mode
    out = Path(cfg["out"])
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    log_path = Path(cfg["log"]) if cfg["log"] else out.with_suffix(out.suffix + ".log.csv")
    with open(log_path, "w", newline="") as fh:
        write_training_log(logs, fh, fingerprint)
    print(f"checkpoint {out}, log {log_path}", file=sys.stderr)
    return EXIT_OK


def _parse_references(pairs) -> dict[str, tuple[float, float]] | None:
    if not pairs:
        return None
    refs = {}
    for pair in pairs:
        name, eq, values = pair.partition("=")
        parts = values.split(",") if eq else []
        if not name or len(parts) != 2:
            raise ConfigError(f"--reference expects name=rmse,mae, got {pair!r}")
        try:
            refs[name] = (float(parts[0]), float(parts[1]))
        except ValueError:
            raise ConfigError(f"--reference values must be numbers, got {pair!r}") from None
    return refs


def cmd_eval(args, cfg: dict, fingerprint: str) -> int:
    oracle = bool(cfg["oracle"])
    if args.checkpoint is None and not oracle:
        raise ValidationError("eval needs a checkpoint unless --oracle is given")

    model = None
    if args.checkpoint is not None:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise ValidationError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        for key in ("depth", "base_channels", "in_channels"):
            if cfg[key] is not None and cfg[key] != getattr(model.config, key):
                raise CheckpointError(
                    f"checkpoint has {key}={getattr(model.config, key)}, "
                    f"requested {key}={cfg[key]}")

    root, csv_name = _resolve_dataset(args.dataset)
    channels = model.config.in_channels if model else (cfg["in_channels"] or 1)
    items = load_dataset(root, csv_name, channels=channels)

    kernel = _kernel_from(cfg)
    report = evaluate(model, items, kernel=kernel, oracle=oracle,
                      config_fingerprint=fingerprint)
    print(compare_report(report, _parse_references(args.reference)), file=sys.stderr)

    text = report.to_json() + "\n"
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)

    if cfg["heatmap_dir"]:
        hm_dir = Path(cfg["heatmap_dir"])
        hm_dir.mkdir(parents=True, exist_ok=True)
        for image, truth in items:
            if oracle:
                dm = ground_truth_map(truth, kernel)
            else:
                _, dm = predict_count(model, image)
            render_heatmap(dm, hm_dir / f"{Path(truth.image_path).stem}.png")
    return EXIT_OK


def cmd_predict(args, cfg: dict, fingerprint: str) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ValidationError(f"image not found: {image_path}")
    model = load_checkpoint(ckpt)
    image = load_image(image_path, channels=model.config.in_channels)
    count, dm = predict_count(model, image)
    display = f"{count:.2f}"
    if args.json:
        payload = {
            "image": str(image_path),
            "count": float(display),
            "count_raw": count,
            "config_fingerprint": fingerprint,
            "checkpoint_fingerprint": model.meta.get("config_fingerprint", ""),
        }
        print(json.dumps(payload, sort_keys=True))
    else:
        print(display)
    if cfg["heatmap"]:
        render_heatmap(dm, cfg["heatmap"])
    return EXIT_OK


def _add_shared_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help=f"JSON config file (or ${ENV_CONFIG})")
    sub.add_argument("--seed", type=int, help=f"master RNG seed (or ${ENV_SEED})")
    sub.add_argument("--jobs", type=int, help="worker process cap for parallel stages")
    sub.add_argument("--sigma", type=float, help="constant kernel sigma in pixels")
    sub.add_argument("--adaptive", action=argparse.BooleanOptionalAction, default=None,
                     help="use geometry-adaptive kernel spread")
    sub.add_argument("--k", type=int, help="neighbor count for adaptive spread")
    sub.add_argument("--sigma0-sq", type=float, help="adaptive variance scale sigma0^2")
    sub.add_argument("--scale", type=float, help="density multiplier used as regression target")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densecount",
        description="Count objects in overhead imagery via dot-annotated density regression.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("make-density", help="render ground-truth density maps from a dot CSV")
    p.add_argument("annotations", help="dot CSV file")
    p.add_argument("--out", help="output directory for .dmap files")
    p.add_argument("--check", action="store_true", default=None,
                   help="verify count conservation per image; nonzero exit on violation")
    p.add_argument("--heatmaps", action="store_true", default=None,
                   help="also render grayscale heatmap PNGs")
    _add_shared_flags(p)

    p = commands.add_parser("synth", help="generate a synthetic dot-annotated dataset")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--size", type=int, help="number of scenes")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--count-min", type=int)
    p.add_argument("--count-max", type=int)
    p.add_argument("--radius-min", type=float)
    p.add_argument("--radius-max", type=float)
    p.add_argument("--background", choices=BACKGROUND_MODES)
    p.add_argument("--glare-probability", type=float)
    p.add_argument("--glare-intensity", type=float)
    p.add_argument("--min-separation", type=float)
    _add_shared_flags(p)

    p = commands.add_parser("train", help="train the density regressor on a dataset directory")
    p.add_argument("dataset", help="dataset directory with dots.csv, or a dot CSV path")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--log", help="training log CSV path (default: <out>.log.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    p.add_argument("--patches-per-image", type=int)
    p.add_argument("--object-biased", action=argparse.BooleanOptionalAction, default=None,
                   help="place at least half of the patches on a dot")
    p.add_argument("--flip-augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--split", help="train,val,test weights (normalized)")
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--in-channels", type=int, choices=(1, 3))
    _add_shared_flags(p)

    p = commands.add_parser("eval", help="score predicted counts on an annotated set")
    p.add_argument("checkpoint", nargs="?", help="trained checkpoint (optional with --oracle)")
    p.add_argument("dataset", help="dataset directory with dots.csv, or a dot CSV path")
    p.add_argument("--out", help="write the metrics report JSON here instead of stdout")
    p.add_argument("--oracle", action="store_true", default=None,
                   help="score ground-truth density maps instead of model predictions")
    p.add_argument("--reference", action="append",
                   help="named reference metrics, e.g. aed=0.890,0.490 (repeatable)")
    p.add_argument("--heatmap-dir", help="write per-image predicted heatmap PNGs here")
    p.add_argument("--depth", type=int, help="audit the checkpoint against this depth")
    p.add_argument("--base-channels", type=int)
    p.add_argument("--in-channels", type=int, choices=(1, 3))
    _add_shared_flags(p)

    p = commands.add_parser("predict", help="predict the count for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--json", action="store_true", help="emit a JSON record instead of plain text")
    p.add_argument("--heatmap", help="write the predicted density heatmap PNG here")
    _add_shared_flags(p)

    return parser


_HANDLERS = {
    "make-density": cmd_make_density,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, fingerprint = resolve_config(args, args.command)
        return _HANDLERS[args.command](args, cfg, fingerprint)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AnnotationParseError, FormatError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DensecountError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
