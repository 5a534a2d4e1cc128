"""Command-line front end: prepare, train, despeckle, evaluate, grid.

Exit codes are a stable scripting contract: 0 success, 1 usage or
configuration problems, 2 data problems (missing/corrupt inputs), 3
numeric divergence during training. All commands honor --seed and produce
byte-identical primary outputs for identical invocations; timing values
are the only exception.

The environment variable DESPECKLE_THREADS caps the evaluation worker
pool; when absent the hardware default is used.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSpec, extract_patches, load_patchsets, normalize, denormalize, save_patchsets
from .errors import (
    ConfigError,
    DespeckleError,
    DivergenceError,
    NumericError,
)
from .losses import LossWeights
from .metrics import (
    MetricsReport,
    enl,
    m_index_proxy,
    mse,
    ratio_homogeneity,
    select_homogeneous_blocks,
    snr_db,
    ssim,
)
from .network import (
    Model,
    NetworkConfig,
    PRESETS,
    despeckle as run_model,
    grid_audit,
    load_checkpoint,
    resolve_preset,
)
from .rasters import read_raster, supported, write_raster
from .training import train


@dataclass
class ExperimentConfig:
    """Serializable experiment description; the config file mirrors these
    field names exactly."""

    dataset: dict = field(default_factory=dict)
    network: dict | None = None
    preset: str | None = None
    loss_weights: dict = field(default_factory=dict)
    epochs: int = 130
    lr: float = 3e-4
    batch_size: int = 128
    seed: int = 0
    output_dir: str = "runs"


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config fields {sorted(unknown)}")
    return ExperimentConfig(**payload)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _pick(flag_value, config_value, default):
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    return default


def _max_workers() -> int:
    env = os.environ.get("DESPECKLE_THREADS")
    if env is None or env == "":
        return os.cpu_count() or 1
    try:
        n = int(env)
    except ValueError as e:
        raise ConfigError(f"DESPECKLE_THREADS must be an integer, got {env!r}") from e
    if n < 1:
        raise ConfigError(f"DESPECKLE_THREADS must be >= 1, got {n}")
    return n


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")


def _list_rasters(directory) -> list[str]:
    if not os.path.isdir(directory):
        raise ConfigError(f"{directory} is not a directory")
    return sorted(n for n in os.listdir(directory) if supported(os.path.join(directory, n)))


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    ds = dict(config.dataset)
    if args.source is not None:
        ds["source_dir"] = args.source
    if "source_dir" not in ds:
        raise ConfigError("prepare needs --source or a dataset.source_dir config entry")
    for flag, key in (
        ("patch_size", "patch_size"),
        ("train_count", "train_patches"),
        ("val_count", "val_patches"),
        ("test_count", "test_patches"),
        ("stride", "stride"),
    ):
        value = getattr(args, flag)
        if value is not None:
            ds[key] = value
    ds["seed"] = _pick(args.seed, ds.get("seed"), config.seed)
    spec = DatasetSpec(**ds)

    sets = extract_patches(spec)
    manifest = sets.manifest
    total = sum(manifest["counts"].values())
    if total == 0:
        if manifest["source_images"] == 0:
            print("no source images", file=sys.stderr)
        else:
            print("no patches produced", file=sys.stderr)
        return 2
    save_patchsets(sets, args.output)
    print(f"prepared {args.output}: " + ", ".join(f"{s}={manifest['counts'][s]}" for s in ("train", "val", "test")))
    print(f"divisor={manifest['divisor']!r} skipped_too_small={manifest['skipped_too_small']} unreadable={len(manifest['unreadable'])}")
    for line in manifest["unreadable"]:
        print(f"unreadable: {line}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train / grid
# ---------------------------------------------------------------------------

def _network_from_args(args, config: ExperimentConfig, seed: int) -> tuple[NetworkConfig, str | None]:
    preset_name = _pick(getattr(args, "preset", None), config.preset, None)
    if preset_name is not None:
        preset = resolve_preset(preset_name)
        return NetworkConfig(depth=preset.depth, width=preset.width, seed=seed), preset.name
    net = dict(config.network or {})
    if getattr(args, "depth", None) is not None:
        net["depth"] = args.depth
    if getattr(args, "width", None) is not None:
        net["width"] = args.width
    if getattr(args, "kernel", None) is not None:
        net["kernel"] = args.kernel
    if not net:
        preset = resolve_preset("m1t")
        return NetworkConfig(depth=preset.depth, width=preset.width, seed=seed), preset.name
    net.setdefault("depth", 10)
    net.setdefault("width", 32)
    net["seed"] = seed
    return NetworkConfig(**net), None


def _weights_from_args(args, config: ExperimentConfig) -> LossWeights:
    fields = dict(config.loss_weights)
    if getattr(args, "lambda_edge", None) is not None:
        fields["lambda_edge"] = args.lambda_edge
    if getattr(args, "lambda_kl", None) is not None:
        fields["lambda_kl"] = args.lambda_kl
    return LossWeights(**fields)


def _run_training(args, config: ExperimentConfig, out_dir: str, net_config: NetworkConfig, preset_name: str | None) -> int:
    sets = load_patchsets(args.data)
    if sets.train.shape[0] == 0 or sets.val.shape[0] == 0:
        raise ConfigError(f"{args.data}: prepared dataset needs nonempty train and val splits")
    weights = _weights_from_args(args, config)
    epochs = _pick(args.epochs, None, config.epochs)
    lr = _pick(args.lr, None, config.lr)
    batch_size = _pick(args.batch_size, None, config.batch_size)
    seed = net_config.seed
    looks = args.looks if args.looks is not None else 1
    divisor = sets.manifest.get("divisor", 1.0)

    os.makedirs(out_dir, exist_ok=True)
    _write_json(
        os.path.join(out_dir, "config.json"),
        {
            "dataset": {"data_dir": os.path.abspath(args.data), "divisor": divisor},
            "network": asdict(net_config),
            "preset": preset_name,
            "loss_weights": asdict(weights),
            "epochs": epochs,
            "lr": lr,
            "batch_size": batch_size,
            "seed": seed,
            "looks": looks,
            "output_dir": os.path.abspath(out_dir),
        },
    )
    model = Model(net_config)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    try:
        log = train(
            model,
            sets.train,
            sets.val,
            weights,
            looks=looks,
            epochs=epochs,
            lr=lr,
            batch_size=batch_size,
            seed=seed,
            out_dir=out_dir,
            checkpoint_meta={"divisor": divisor},
        )
    except DivergenceError as e:
        _write_jsonl(log_path, getattr(e, "log", []))
        raise
    _write_jsonl(log_path, log)
    if log:
        last = log[-1]
        print(
            f"{out_dir}: epoch {last['epoch']} val_mse={last['val_mse']:.6g} "
            f"val_kl={last['val_kl']:.6g} val_edge={last['val_edge']:.6g}"
        )
    else:
        print(f"{out_dir}: 0 epochs, initial checkpoint written")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    seed = _pick(args.seed, None, config.seed)
    net_config, preset_name = _network_from_args(args, config, seed)
    out_dir = _pick(args.output, None, config.output_dir)
    return _run_training(args, config, out_dir, net_config, preset_name)


def cmd_grid(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    seed = _pick(args.seed, None, config.seed)
    out_root = _pick(args.output, None, config.output_dir)
    os.makedirs(out_root, exist_ok=True)

    audit = grid_audit()
    _write_json(os.path.join(out_root, "grid_audit.json"), audit)
    with open(os.path.join(out_root, "grid_audit.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(audit[0].keys()))
        writer.writeheader()
        writer.writerows(audit)
    print("param audit: published counts differ from direct enumeration; see grid_audit.csv")

    if args.presets == "all":
        names = list(PRESETS)
    else:
        names = [resolve_preset(p).name for p in args.presets.split(",") if p.strip()]
    if args.audit_only:
        return 0
    if args.data is None:
        raise ConfigError("grid training requires --data (or use --audit-only)")
    for name in names:
        preset = resolve_preset(name)
        net_config = NetworkConfig(depth=preset.depth, width=preset.width, seed=seed)
        code = _run_training(args, config, os.path.join(out_root, name), net_config, name)
        if code != 0:
            return code
    return 0


# ---------------------------------------------------------------------------
# despeckle
# ---------------------------------------------------------------------------

def _resolve_divisor(flag_value, meta: dict, info, arr) -> float:
    if flag_value is not None:
        return float(flag_value)
    if "divisor" in meta:
        return float(meta["divisor"])
    if info.maxval is not None:
        return float(info.maxval)
    top = float(np.max(arr)) if arr.size else 0.0
    return top if top > 0 else 1.0


def cmd_despeckle(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model.eval()
    arr, info = read_raster(args.input)
    divisor = _resolve_divisor(args.divisor, ckpt.meta, info, arr)
    norm = normalize(arr, divisor).astype(np.float32)

    t0 = time.perf_counter()
    out = run_model(model, norm[None, None])
    seconds = time.perf_counter() - t0

    estimate = denormalize(out.data[0, 0], divisor)
    write_raster(args.output, estimate, info)
    print(f"{args.input} -> {args.output} ({info.width}x{info.height}) inference_seconds={seconds:.4f}")

    timing_path = args.timing_csv or (str(args.output) + ".timing.csv")
    new_file = not os.path.exists(timing_path)
    with open(timing_path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(("image", "width", "height", "seconds"))
        writer.writerow((os.path.basename(str(args.input)), info.width, info.height, f"{seconds:.6f}"))
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _despeckle_array(model: Model, raw: np.ndarray, divisor: float) -> np.ndarray:
    norm = normalize(raw, divisor).astype(np.float32)
    out = run_model(model, norm[None, None])
    return denormalize(out.data[0, 0], divisor)


def _evaluate_reference_one(model, path, seed, index, looks, divisor_flag):
    arr, info = read_raster(path)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6, index]))
    noise = rng.standard_exponential(size=(looks,) + arr.shape).sum(axis=0) / looks
    noisy = arr * noise
    divisor = _resolve_divisor(divisor_flag, {}, info, arr)
    estimate = _despeckle_array(model, noisy, divisor)
    rng_hint = info.maxval if info.maxval is not None else max(float(arr.max()), 1e-12)
    return {
        "ssim": ssim(estimate, arr, rng_hint),
        "snr_db": snr_db(estimate, arr),
        "mse": mse(estimate, arr),
    }


def _evaluate_noreference_one(model, path, looks, divisor_flag, meta):
    arr, info = read_raster(path)
    divisor = _resolve_divisor(divisor_flag, meta, info, arr)
    estimate = _despeckle_array(model, arr, divisor)
    blocks = select_homogeneous_blocks(arr, looks)
    block_enls = [enl(estimate, b) for b in blocks]
    return {
        "enl": float(np.median(block_enls)),
        "homogeneity": ratio_homogeneity(arr, estimate, looks),
        "m_index_proxy": m_index_proxy(arr, estimate, looks),
    }


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model.eval()
    looks = args.looks if args.looks is not None else int(ckpt.meta.get("looks", 1))
    seed = args.seed if args.seed is not None else 0

    if args.mode == "reference":
        if args.clean_dir is None:
            raise ConfigError("reference mode requires --clean-dir")
        directory = args.clean_dir
    else:
        if args.noisy_dir is None:
            raise ConfigError("noreference mode requires --noisy-dir")
        directory = args.noisy_dir
    names = _list_rasters(directory)
    if not names:
        print("no source images", file=sys.stderr)
        return 2

    report = MetricsReport(
        mode=args.mode,
        metadata={
            "model_id": model.config.model_id,
            "dataset_id": os.path.basename(os.path.abspath(directory)),
            "checkpoint": os.path.basename(str(args.checkpoint)),
            "seed": seed,
            "looks": looks,
        },
    )

    def job(item):
        index, name = item
        path = os.path.join(directory, name)
        if args.mode == "reference":
            return _evaluate_reference_one(model, path, seed, index, looks, args.divisor)
        return _evaluate_noreference_one(model, path, looks, args.divisor, ckpt.meta)

    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        results = list(pool.map(job, enumerate(names)))
    for name, values in zip(names, results):
        report.add(name, **values)

    os.makedirs(args.output, exist_ok=True)
    report.write_csv(os.path.join(args.output, "report.csv"))
    report.write_json(os.path.join(args.output, "report.json"))
    agg = report.aggregates()
    print(f"{args.mode} metrics over {len(names)} images: " + ", ".join(f"{k}={v:.6g}" for k, v in agg.items()))
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def _add_common_train_flags(p: _Parser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lambda-edge", type=float, default=None)
    p.add_argument("--lambda-kl", type=float, default=None)
    p.add_argument("--looks", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="despeckle", description="SAR despeckling toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("prepare", help="extract normalized patches from source rasters")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--source", help="source raster directory")
    p.add_argument("--output", required=True, help="prepared dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--train-count", dest="train_count", type=int, default=None)
    p.add_argument("--val-count", dest="val_count", type=int, default=None)
    p.add_argument("--test-count", dest="test_count", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one network on a prepared dataset")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--output", default=None, help="run output directory")
    p.add_argument("--preset", default=None, help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--kernel", type=int, default=None)
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("despeckle", help="run a checkpoint on one raster")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--divisor", type=float, default=None, help="intensity scale override")
    p.add_argument("--timing-csv", default=None, help="timing report path (default: <output>.timing.csv)")
    p.set_defaults(func=cmd_despeckle)

    p = sub.add_parser("evaluate", help="compute quality metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=("reference", "noreference"))
    p.add_argument("--clean-dir", default=None, help="clean rasters (reference mode)")
    p.add_argument("--noisy-dir", default=None, help="noisy rasters (noreference mode)")
    p.add_argument("--output", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--looks", type=int, default=None)
    p.add_argument("--divisor", type=float, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="audit and train the preset grid")
    p.add_argument("--data", help="prepared dataset directory")
    p.add_argument("--output", default=None)
    p.add_argument("--presets", default="all", help="'all' or comma-separated preset names")
    p.add_argument("--audit-only", action="store_true", help="write the parameter audit and stop")
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        parser.print_help()
        return 1
    try:
        result = args.func(args)
        return 0 if result is None else int(result)
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DespeckleError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
