"""Command-line entry point: train / eval / inspect / compare / augment-preview.

Experiment files are strict JSON (unknown keys rejected) with sections
``model``, ``train``, ``augment``, ``data``, ``output``; any leaf can be
overridden with repeatable ``--set section.key=value`` flags. Outputs land
in a per-run directory named by config hash + timestamp under the output
root, so runs never silently overwrite each other.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_io
from .augment import AugmentConfig, fit_pca_basis
from .evaluation import evaluate
from .model import (BranchedNetConfig, block_topology, build_branched_net,
                    count_parameters, layer_counts)
from .training import (TrainConfig, history_csv, timings_csv, train)


class ConfigError(ValueError):
    pass


_SECTIONS = ("model", "train", "augment", "data", "output")


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{section}': {', '.join(unknown)}")


def _dataclass_section(section: str, given: dict, cls):
    allowed = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, given, allowed)
    try:
        return cls(**given)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


@dataclasses.dataclass
class ExperimentConfig:
    model: BranchedNetConfig
    train: TrainConfig
    augment: AugmentConfig
    data: dict
    output_dir: str
    raw: dict

    def fingerprint(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_DATA_KEYS = {
    "synthetic": {"kind", "num_classes", "train_samples_per_class",
                  "test_samples_per_class", "image_size", "noise_std", "seed"},
    "cifar10": {"kind", "dir", "train_files", "test_files"},
}


def _parse_data_section(given: dict) -> dict:
    kind = given.get("kind")
    if kind not in _DATA_KEYS:
        raise ConfigError(
            f"section 'data': kind must be one of {sorted(_DATA_KEYS)}, got {kind!r}")
    _check_keys("data", given, _DATA_KEYS[kind])
    return dict(given)


def parse_experiment(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    _check_keys("<top level>", raw, set(_SECTIONS))
    for section in ("model", "train", "data"):
        if section not in raw:
            raise ConfigError(f"missing required section '{section}'")

    model = _dataclass_section("model", raw["model"], BranchedNetConfig)

    train_section = dict(raw["train"])
    train_section.setdefault("num_classes", model.num_classes)
    train_cfg = _dataclass_section("train", train_section, TrainConfig)
    if train_cfg.num_classes != model.num_classes:
        raise ConfigError(
            f"train.num_classes ({train_cfg.num_classes}) != "
            f"model.num_classes ({model.num_classes})")

    augment_section = dict(raw.get("augment", {}))
    augment_section.setdefault("crop_height", model.input_height)
    augment_section.setdefault("crop_width", model.input_width)
    augment = _dataclass_section("augment", augment_section, AugmentConfig)
    if augment.pca_basis is not None:
        raise ConfigError("augment.pca_basis is fitted from data, not configured")

    data = _parse_data_section(raw["data"])

    output = dict(raw.get("output", {}))
    _check_keys("output", output, {"dir"})

    return ExperimentConfig(model=model, train=train_cfg, augment=augment,
                            data=data, output_dir=output.get("dir", "runs"), raw=raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply --set section.key=value pairs (values parsed as JSON when
    possible, else kept as strings) before strict validation."""
    out = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, _, text = item.partition("=")
        parts = dotted.split(".")
        if len(parts) < 2:
            raise ConfigError(f"--set path must be section.key, got {dotted!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-object value")
        node[parts[-1]] = value
    return out


def load_experiment(path, overrides: list[str]) -> ExperimentConfig:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise ConfigError(f"config file not found: {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_experiment(apply_overrides(raw, overrides))


# ---------------------------------------------------------------------------
# data and run-dir helpers

def build_datasets(data_cfg: dict) -> tuple[data_io.Dataset, data_io.Dataset]:
    if data_cfg["kind"] == "synthetic":
        spec_train = data_io.SyntheticSpec(
            num_classes=data_cfg.get("num_classes", 10),
            samples_per_class=data_cfg.get("train_samples_per_class", 50),
            image_size=data_cfg.get("image_size", 32),
            noise_std=data_cfg.get("noise_std", 8.0))
        spec_test = dataclasses.replace(
            spec_train, samples_per_class=data_cfg.get("test_samples_per_class", 20))
        seed = data_cfg.get("seed", 1234)
        return (data_io.generate_synthetic(spec_train, seed, split="train"),
                data_io.generate_synthetic(spec_test, seed + 1, split="test"))
    directory = data_cfg["dir"]
    return (data_io.load_cifar10_binary(directory, data_cfg.get("train_files"), split="train"),
            data_io.load_cifar10_binary(directory, data_cfg.get("test_files"), split="test"))


def fit_augment_statistics(augment: AugmentConfig,
                           train_set: data_io.Dataset) -> AugmentConfig:
    """Fill channel means and the PCA basis from the training set when the
    config leaves them unset."""
    updated = dataclasses.replace(augment)
    if updated.enable_normalize and updated.channel_means is None:
        pixels = train_set.images.astype(np.float64).reshape(-1, 3)
        updated.channel_means = pixels.mean(axis=0)
    if updated.enable_pca and updated.pca_basis is None:
        updated.pca_basis = fit_pca_basis(train_set.images)
    return updated


def _validate_shapes(cfg: ExperimentConfig, train_set: data_io.Dataset) -> None:
    h, w = train_set.images.shape[1:3]
    if cfg.augment.enable_crop:
        if (cfg.augment.crop_height, cfg.augment.crop_width) != \
                (cfg.model.input_height, cfg.model.input_width):
            raise ConfigError(
                f"augment crop {cfg.augment.crop_height}x{cfg.augment.crop_width} "
                f"!= model input {cfg.model.input_height}x{cfg.model.input_width}")
        if cfg.augment.crop_height > h or cfg.augment.crop_width > w:
            raise ConfigError(
                f"crop {cfg.augment.crop_height}x{cfg.augment.crop_width} exceeds "
                f"source images {h}x{w}")
    elif (h, w) != (cfg.model.input_height, cfg.model.input_width):
        raise ConfigError(
            f"source images {h}x{w} != model input "
            f"{cfg.model.input_height}x{cfg.model.input_width} (and crop is disabled)")
    if train_set.num_classes != cfg.model.num_classes:
        raise ConfigError(
            f"data num_classes {train_set.num_classes} != model.num_classes "
            f"{cfg.model.num_classes}")


def make_run_dir(root, fingerprint: str) -> Path:
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{fingerprint}-{stamp}"
    candidate = base
    counter = 2
    while candidate.exists():
        candidate = base.with_name(f"{base.name}-{counter}")
        counter += 1
    candidate.mkdir(parents=True)
    return candidate


def _dtype_for(precision: str):
    return np.float64 if precision == "ref" else np.float32


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = load_experiment(args.config, args.set)
    train_set, test_set = build_datasets(cfg.data)
    _validate_shapes(cfg, train_set)
    augment = fit_augment_statistics(cfg.augment, train_set)
    net = build_branched_net(cfg.model, seed=cfg.train.seed,
                             dtype=_dtype_for(args.precision))

    run_dir = make_run_dir(args.out or cfg.output_dir, cfg.fingerprint())
    print(f"run directory: {run_dir}")
    checkpoint, history = train(net, train_set, cfg.train, augment,
                                eval_dataset=test_set, workers=args.workers,
                                log=print)
    (run_dir / "history.csv").write_text(history_csv(history, cfg.model.num_branches))
    (run_dir / "timings.csv").write_text(timings_csv(history))
    data_io.save_checkpoint(run_dir / "final.ckpt", checkpoint)
    if history.eval_reports:
        report = history.eval_reports[-1]
        (run_dir / "report.csv").write_text(report.to_csv())
        (run_dir / "report.txt").write_text(report.render_text() + "\n")
        print(report.render_text())
    return 0


def cmd_eval(args) -> int:
    checkpoint = data_io.load_checkpoint(args.checkpoint)
    cfg = load_experiment(args.config, args.set)
    for fld in dataclasses.fields(BranchedNetConfig):
        got = getattr(cfg.model, fld.name)
        want = getattr(checkpoint.model_config, fld.name)
        if got != want:
            raise ConfigError(
                f"config model.{fld.name}={got!r} does not match checkpoint "
                f"({want!r})")
    from .training import restore_network
    net, _ = restore_network(checkpoint)
    _, test_set = build_datasets(cfg.data)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.dump_probs:
        report, branch_probs = evaluate(net, test_set,
                                        augment_config=checkpoint.augment_config,
                                        dump_probs=True)
        for br, probs in enumerate(branch_probs):
            header = ",".join(f"class_{k}" for k in range(probs.shape[1]))
            rows = [",".join(repr(float(v)) for v in row) for row in probs]
            (out_dir / f"probs_branch_{br + 1}.csv").write_text(
                header + "\n" + "\n".join(rows) + "\n")
    else:
        report = evaluate(net, test_set, augment_config=checkpoint.augment_config)
    print(report.render_text())
    (out_dir / "eval_report.csv").write_text(report.to_csv())
    return 0


def cmd_inspect(args) -> int:
    cfg = load_experiment(args.config, args.set)
    topo = block_topology(cfg.model)
    layers = layer_counts(cfg.model)
    report = count_parameters(cfg.model)
    print(f"stages: {list(cfg.model.stage_blocks)} x widths {list(cfg.model.stage_widths)}"
          f"  ({'bottleneck' if cfg.model.bottleneck else 'basic'} blocks)")
    print(f"branch point: after block {cfg.model.branch_after_block}"
          f" of {cfg.model.total_blocks}; branches: {cfg.model.num_branches}")
    print(f"blocks: shared {topo.shared_blocks}, per-branch {topo.per_branch_blocks},"
          f" materialized {topo.total_blocks_materialized}")
    print(f"conv layers (single path): {layers.conv_layers};"
          f" weighted layers: {layers.weighted_layers}")
    print(f"parameters: stem {report.stem_params:,}, shared {report.shared_params:,},"
          f" per-branch {[f'{v:,}' for v in report.per_branch_params]},"
          f" heads {[f'{v:,}' for v in report.head_params]}")
    print(f"total parameters: {report.total_params:,}")
    print(f"equivalent independent ensemble: "
          f"{report.equivalent_independent_ensemble_params:,}")
    print(f"sharing ratio: {report.sharing_ratio:.6f}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_experiment(args.config, args.set)
    total = cfg.model.total_blocks
    if args.branch_points:
        points = sorted({int(tok) for tok in args.branch_points.split(",")})
    else:
        points = list(range(total + 1))
    bad = [b for b in points if not 0 <= b <= total]
    if bad:
        raise ConfigError(f"branch points out of range [0, {total}]: {bad}")
    lines = ["branch_after_block,total_params,sharing_ratio,materialized_blocks"]
    for b in points:
        variant = dataclasses.replace(cfg.model, branch_after_block=b)
        report = count_parameters(variant)
        topo = block_topology(variant)
        lines.append(f"{b},{report.total_params},{report.sharing_ratio!r},"
                     f"{topo.total_blocks_materialized}")
    csv_text = "\n".join(lines) + "\n"
    print(csv_text, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "compare.csv").write_text(csv_text)
    return 0


def cmd_augment_preview(args) -> int:
    cfg = load_experiment(args.config, args.set)
    image = data_io.read_ppm(args.image)
    augment = cfg.augment
    if augment.enable_pca and augment.pca_basis is None:
        augment = dataclasses.replace(augment, pca_basis=fit_pca_basis([image]))
    out_dir = Path(args.out or "preview")
    if args.count > 0:
        out_dir.mkdir(parents=True, exist_ok=True)
        data_io.write_ppm(out_dir / "original.ppm", image)
    from .augment import RngStream, augment_pipeline
    for i in range(args.count):
        stream = RngStream(global_seed=cfg.train.seed, epoch=0, sample_index=i)
        # dump pre-normalization pixels: PPM is 8-bit, normalized tensors are not
        preview = augment_pipeline(image, augment, stream, skip_normalize=True)
        data_io.write_ppm(out_dir / f"augment{i:03d}.ppm", preview)
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="experiment JSON file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config value, e.g. train.total_epochs=1")
    parser.add_argument("--workers", type=int, default=1,
                        help="augmentation fan-out; never affects results")
    parser.add_argument("--precision", choices=("ref", "fast"), default="ref",
                        help="ref = float64 (bit-reproducible), fast = float32")
    parser.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchnet",
        description="Branched residual networks: shared trunk, independent "
                    "branches, label-smoothed training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--dump-probs", action="store_true",
                   help="also write per-branch probability matrices as CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="print topology and parameter report")
    _add_common(p)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("compare", help="sweep branch points, print CSV")
    _add_common(p)
    p.add_argument("--branch-points", default=None,
                   help="comma-separated block indices (default: all)")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("augment-preview", help="dump augmented PPM variants")
    _add_common(p)
    p.add_argument("--image", required=True, help="input PPM (P6) image")
    p.add_argument("--count", type=int, default=8, help="number of variants")
    p.set_defaults(fn=cmd_augment_preview)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
