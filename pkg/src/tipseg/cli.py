"""Command-line entry point for reproducible runs.

Subcommands: gen-data, train, eval, predict, stats, baseline. Behavior is
driven by a JSON run config (all keys optional, unknown keys rejected)
plus flag overrides; flags win. Every run directory receives a frozen,
fully resolved copy of its config.

Exit codes: 0 success, 2 configuration error, 3 missing input,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from tipseg.augment import AugmentConfig
from tipseg.errors import (ConfigurationError, DataValidationError,
                           DegenerateInputError, MissingInputError, NumericalError)
from tipseg.imgdata import (GrayImage, SynthConfig, load_sample, load_samples,
                            load_split, synth_dataset)
from tipseg.lossmetrics import (confusion, format_report, metrics,
                                metrics_csv_header, metrics_csv_row, otsu_threshold)
from tipseg.model import (BACKBONE_PRESETS, DecoderSpec, ModelSpec, build_model,
                          load_weights, model_preset, save_weights, spec_to_dict,
                          stats_csv, stats_table, stats_text)
from tipseg.trainer import (TrainConfig, evaluate, export_history, predict,
                            render_overlay, train)

ENV_DATA_DIR = "TIPSEG_DATA_DIR"
DEFAULT_MODEL_PRESET = "reduced"
STATS_DEFAULT_MODELS = "resnet34,resnet50,resnet101,resnext101_32x48d"


def _build_dataclass(cls, data: dict, context: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown} in config section {context!r}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list) and isinstance(known[name].default, tuple):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def _resolve_model_spec(section: dict) -> ModelSpec:
    allowed = {"preset", "num_classes", "input_size", "in_channels", "decoder"}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown} in config section 'model'")
    preset = section.get("preset", DEFAULT_MODEL_PRESET)
    decoder = None
    if "decoder" in section:
        decoder = _build_dataclass(DecoderSpec, section["decoder"], "model.decoder")
    return model_preset(
        preset,
        num_classes=section.get("num_classes", 9),
        input_size=section.get("input_size", 224),
        in_channels=section.get("in_channels"),
        decoder=decoder,
    )


class RunConfig:
    """Fully resolved run configuration (defaults + file + flag overrides)."""

    SECTIONS = ("synth", "augment", "model", "train", "data_dir", "run_dir")

    def __init__(self, raw: dict):
        unknown = sorted(set(raw) - set(self.SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown top-level config key(s) {unknown}")
        self.synth = _build_dataclass(SynthConfig, raw.get("synth", {}), "synth")
        self.augment = _build_dataclass(AugmentConfig, raw.get("augment", {}), "augment")
        self.model_section = dict(raw.get("model", {}))
        self.model = _resolve_model_spec(self.model_section)
        self.train = _build_dataclass(TrainConfig, raw.get("train", {}), "train")
        self.data_dir = raw.get("data_dir") or os.environ.get(ENV_DATA_DIR)
        self.run_dir = raw.get("run_dir")
        self.synth.validate()
        self.augment.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return {
            "synth": asdict(self.synth),
            "augment": asdict(self.augment),
            "model": {**self.model_section,
                      "preset": self.model_section.get("preset", DEFAULT_MODEL_PRESET),
                      "resolved_spec": spec_to_dict(self.model)},
            "train": {k: v for k, v in asdict(self.train).items() if k != "model"},
            "data_dir": self.data_dir,
            "run_dir": self.run_dir,
        }


def load_run_config(path: str | None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {p} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must contain a JSON object")
    return RunConfig(raw)


def _freeze_config(cfg: RunConfig, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _require_data_dir(cfg: RunConfig, flag_value: str | None) -> Path:
    value = flag_value or cfg.data_dir
    if value is None:
        raise ConfigurationError(
            f"no data directory: pass --data-dir, set config data_dir, or export {ENV_DATA_DIR}")
    path = Path(value)
    if not path.is_dir():
        raise MissingInputError(f"data directory {path} does not exist")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.synth.seed = args.seed
        cfg.synth.validate()
    out = Path(args.out or cfg.data_dir or os.environ.get(ENV_DATA_DIR, "data"))
    split = synth_dataset(cfg.synth, args.n_train, args.n_val, args.n_test, out)
    print(f"wrote {len(split.train)} train / {len(split.val)} val / "
          f"{len(split.test)} test samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.aug is not None:
        cfg.train.aug = args.aug
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.train.validate()
    data_dir = _require_data_dir(cfg, args.data_dir)
    cfg.data_dir = str(data_dir)
    cfg.train.data_dir = str(data_dir)
    run_dir = Path(args.run_dir or cfg.run_dir or "run")
    cfg.run_dir = str(run_dir)
    _freeze_config(cfg, run_dir)

    split = load_split(data_dir)
    model = build_model(cfg.model, seed=cfg.train.seed)
    aug_cfg = cfg.augment
    aug_cfg.preset = cfg.train.aug
    model, history = train(model, split, cfg.train, aug_cfg=aug_cfg, run_dir=run_dir)
    export_history(history, run_dir / "history.csv")
    save_weights(model, run_dir / "ckpt_final")

    eval_model = model
    if (run_dir / "ckpt_best").exists():
        eval_model = load_weights(run_dir / "ckpt_best")
    lines = [metrics_csv_header()]
    if split.test:
        report = evaluate(eval_model, load_samples(data_dir, split.test))
        lines.append(metrics_csv_row("model", report))
        print(format_report("model", report))
    (run_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
    final = history.records[-1].train_loss if history.records else float("nan")
    print(f"trained {cfg.train.epochs} epochs (aug={cfg.train.aug}); "
          f"final train loss {final:.4f}; artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise MissingInputError(f"checkpoint {ckpt} does not exist")
    cfg = load_run_config(args.config)
    data_dir = _require_data_dir(cfg, args.data_dir)
    split = load_split(data_dir)
    ids = split.part(args.split)
    if not ids:
        raise MissingInputError(f"split {args.split!r} is empty")
    model = load_weights(ckpt)
    report = evaluate(model, load_samples(data_dir, ids))
    text = metrics_csv_header() + "\n" + metrics_csv_row("model", report) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(format_report("model", report))
    print(text, end="")
    return 0


def cmd_predict(args) -> int:
    ckpt = Path(args.ckpt)
    image_path = Path(args.image)
    for p in (ckpt, image_path):
        if not p.exists():
            raise MissingInputError(f"{p} does not exist")
    model = load_weights(ckpt)
    image = GrayImage(np.asarray(Image.open(image_path).convert("L")))
    mask = predict(model, image)
    out_mask = Path(args.out_mask or image_path.with_suffix(".mask.png"))
    Image.fromarray(mask.labels, mode="L").save(out_mask)
    print(f"wrote mask {out_mask} (classes present: {sorted(np.unique(mask.labels))})")
    if args.overlay:
        overlay = render_overlay(image, mask)
        Image.fromarray(overlay, mode="RGB").save(args.overlay)
        print(f"wrote overlay {args.overlay}")
    return 0


def cmd_stats(args) -> int:
    names = [n.strip() for n in args.models.split(",") if n.strip()]
    for name in names:
        if name not in BACKBONE_PRESETS:
            raise ConfigurationError(
                f"unknown model preset {name!r}; available: {sorted(BACKBONE_PRESETS)}")
    rows = stats_table([(name, model_preset(name)) for name in names])
    print(stats_text(rows), end="")
    if args.csv:
        Path(args.csv).write_text(stats_csv(rows))
        print(f"wrote {args.csv}")
    return 0


def cmd_baseline(args) -> int:
    cfg = load_run_config(args.config)
    data_dir = _require_data_dir(cfg, args.data_dir)
    split = load_split(data_dir)
    ids = split.part(args.split)
    if not ids:
        raise MissingInputError(f"split {args.split!r} is empty")
    totals = None
    skipped = 0
    for sid in ids:
        sample = load_sample(data_dir, sid)
        try:
            pred = otsu_threshold(sample.image)
        except DegenerateInputError as e:
            skipped += 1
            print(f"warning: skipping {sid}: {e}", file=sys.stderr)
            continue
        truth = (sample.mask.labels > 0).astype(np.uint8)
        c = confusion(pred.labels, truth, num_classes=2)
        totals = c if totals is None else totals + c
    if totals is None:
        raise MissingInputError(f"no usable samples in split {args.split!r}")
    report = metrics(totals)
    text = metrics_csv_header() + "\n" + metrics_csv_row("otsu", report) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(format_report("otsu", report))
    print(text, end="")
    if skipped:
        print(f"skipped {skipped} degenerate image(s)", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tipseg",
        description="Fingertip segmentation: synthetic data, training, evaluation, "
                    "model accounting, and the Otsu baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with splits")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", help="output directory (default: config/env data dir)")
    p.add_argument("--n-train", type=int, default=1788)
    p.add_argument("--n-val", type=int, default=224)
    p.add_argument("--n-test", type=int, default=224)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--aug", choices=("none", "minimal", "full"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data-dir")
    p.add_argument("--out", help="metrics CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-mask")
    p.add_argument("--overlay", help="write a class-colored overlay PNG")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("stats", help="analytic parameter/MAC table for model presets")
    p.add_argument("--models", default=STATS_DEFAULT_MODELS)
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("baseline", help="Otsu hand-vs-background baseline on a split")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data-dir")
    p.add_argument("--out", help="metrics CSV output path")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (MissingInputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
