"""Batch command-line surface for the segmentation pipeline.

Verbs: prepare-data, train, evaluate, predict, audit-params. Exit codes:
0 success, 1 runtime failure, 2 configuration or usage error. Every command
is deterministic under a fixed seed.
"""

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import yaml
from PIL import Image

from .data import (
    SPLITTABLE_DATASETS,
    TEST_ONLY_DATASETS,
    Sample,
    SplitSpec,
    augment_offline,
    load_dataset,
    load_image,
    load_mask,
    preprocess_image,
    save_sample,
    split_samples,
    write_split_manifest,
)
from .encoder import EncoderConfig
from .exceptions import CheckpointError, ConfigError
from .metrics import evaluate, format_metrics_table, segmentation_loss
from .model import (
    ModelConfig,
    build_model,
    count_parameters,
    format_audit,
    load_checkpoint,
)
from .trainer import TrainConfig, train, write_history_csv

# parameter budgets of common baselines, printed for context in the audit
REFERENCE_BASELINES = (
    ("U-Net", 15_683_713),
    ("U-Net++", 9_042_177),
    ("PraNet", 30_328_272),
)

_TOP_KEYS = {"seed", "data", "model", "train", "split"}
_DATA_KEYS = {"root", "train_datasets", "test_datasets"}
_MODEL_KEYS = {"reduce_channels", "se_ratio", "decoder_out_channels", "input_size", "encoder", "seed"}
_ENCODER_KEYS = {"init", "seed", "truncation", "trainable", "weights_path"}
_TRAIN_KEYS = {"epochs", "batch_size", "optimizer", "learning_rate", "early_stop_metric",
               "patience", "seed", "checkpoint_dir"}
_SPLIT_KEYS = {"ratios", "seed", "splittable"}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data_root: Optional[Path]
    train_datasets: Tuple[str, ...]
    test_datasets: Tuple[str, ...]
    model: ModelConfig
    train: TrainConfig
    split: SplitSpec


def _reject_unknown(prefix: str, section: dict, allowed: set) -> None:
    for key in section:
        if key not in allowed:
            dotted = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"unknown config key {dotted!r}")


def _section(raw: dict, name: str, allowed: set) -> dict:
    section = raw.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    _reject_unknown(name, section, allowed)
    return dict(section)


def _normalize_size(value) -> Tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return (int(value[0]), int(value[1]))
    raise ConfigError(f"input_size must be an int or a [h, w] pair, got {value!r}")


def load_run_config(path, seed_override: Optional[int] = None,
                    epochs_override: Optional[int] = None) -> RunConfig:
    """Parse and validate a YAML run config; flags override file values.

    Unknown keys are rejected; the top-level seed funnels into every
    subsection that does not set its own.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _reject_unknown("", raw, _TOP_KEYS)

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)

    data_sec = _section(raw, "data", _DATA_KEYS)
    data_root = data_sec.get("root")
    if data_root is not None:
        data_root = Path(data_root)
        if not data_root.is_dir():
            raise ConfigError(f"data.root does not exist: {data_root}")
    train_datasets = tuple(data_sec.get("train_datasets", SPLITTABLE_DATASETS))
    test_datasets = tuple(data_sec.get("test_datasets", TEST_ONLY_DATASETS))

    model_sec = _section(raw, "model", _MODEL_KEYS)
    enc_sec = model_sec.pop("encoder", None) or {}
    if not isinstance(enc_sec, dict):
        raise ConfigError("config section 'model.encoder' must be a mapping")
    _reject_unknown("model.encoder", enc_sec, _ENCODER_KEYS)
    weights_path = enc_sec.get("weights_path")
    if weights_path is not None and not Path(weights_path).is_file():
        raise ConfigError(f"model.encoder.weights_path does not exist: {weights_path}")
    encoder_cfg = EncoderConfig(
        init=enc_sec.get("init", "random"),
        seed=int(enc_sec.get("seed", seed)),
        truncation=enc_sec.get("truncation", "stage7-slim"),
        trainable=bool(enc_sec.get("trainable", True)),
        weights_path=weights_path,
    )
    model_cfg = ModelConfig(
        reduce_channels=int(model_sec.get("reduce_channels", 64)),
        se_ratio=int(model_sec.get("se_ratio", 16)),
        decoder_out_channels=int(model_sec.get("decoder_out_channels", 64)),
        input_size=_normalize_size(model_sec.get("input_size", (224, 224))),
        encoder=encoder_cfg,
        seed=int(model_sec.get("seed", seed)),
    )

    train_sec = _section(raw, "train", _TRAIN_KEYS)
    train_cfg = TrainConfig(
        epochs=int(train_sec.get("epochs", 40)) if epochs_override is None else int(epochs_override),
        batch_size=int(train_sec.get("batch_size", 4)),
        optimizer=train_sec.get("optimizer", "adam"),
        learning_rate=float(train_sec.get("learning_rate", 1e-4)),
        early_stop_metric=train_sec.get("early_stop_metric", "val_loss"),
        patience=int(train_sec.get("patience", 7)),
        seed=int(train_sec.get("seed", seed)),
        checkpoint_dir=train_sec.get("checkpoint_dir", "checkpoints"),
    )

    split_sec = _section(raw, "split", _SPLIT_KEYS)
    split_spec = SplitSpec(
        ratios=tuple(split_sec.get("ratios", (0.80, 0.10, 0.10))),
        seed=int(split_sec.get("seed", seed)),
        splittable=tuple(split_sec.get("splittable", SPLITTABLE_DATASETS)),
    )

    return RunConfig(
        seed=seed,
        data_root=data_root,
        train_datasets=train_datasets,
        test_datasets=test_datasets,
        model=model_cfg,
        train=train_cfg,
        split=split_spec,
    )


def cmd_prepare_data(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    samples = []
    for name in args.datasets:
        corpus = load_dataset(root, name)
        print(f"{name}: {len(corpus)} samples")
        samples.extend(corpus)
    spec = SplitSpec(seed=args.seed, splittable=tuple(args.datasets))
    train_set, val_set, test_set = split_samples(samples, spec)
    augmented = augment_offline(train_set, args.seed)

    manifest_path = out / "split_manifest.txt"
    write_split_manifest(manifest_path, train_set, val_set, test_set)
    cache_dir = out / "train_aug"
    for s in augmented:
        save_sample(s, cache_dir / "images", cache_dir / "masks")

    counts = {
        "seed": args.seed,
        "datasets": {name: sum(1 for s in samples if s.source == name) for name in args.datasets},
        "train": len(train_set),
        "train_augmented": len(augmented),
        "val": len(val_set),
        "test": len(test_set),
    }
    (out / "counts.json").write_text(json.dumps(counts, indent=2, sort_keys=True), encoding="utf-8")
    print(f"train {len(train_set)} -> augmented {len(augmented)}")
    print(f"val {len(val_set)}")
    print(f"test {len(test_set)}")
    print(f"manifest: {manifest_path}")
    print(f"augmented cache: {cache_dir}")
    return 0


def _print_audit_banner(model) -> "ParameterAudit":
    audit = count_parameters(model)
    print(format_audit(audit))
    context = " | ".join(f"{n} {c:,}" for n, c in REFERENCE_BASELINES)
    print(f"baseline budgets: {context}")
    return audit


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed, epochs_override=args.epochs)
    model = build_model(cfg.model)
    _print_audit_banner(model)

    if args.dry_run:
        h, w = cfg.model.input_size
        gen = torch.Generator().manual_seed(cfg.seed)
        images = torch.randn(2, 3, h, w, generator=gen)
        masks = (torch.rand(2, 1, h, w, generator=gen) > 0.5).float()
        model.train()
        loss = segmentation_loss(model(images), masks)
        loss.backward()
        print(f"dry run ok: forward/backward complete, loss {float(loss):.4f}")
        return 0

    if cfg.data_root is None:
        raise ConfigError("config is missing data.root (required unless --dry-run)")
    samples = []
    for name in cfg.train_datasets:
        samples.extend(load_dataset(cfg.data_root, name))
    train_set, val_set, _test_set = split_samples(samples, cfg.split)
    augmented = augment_offline(train_set, cfg.split.seed)
    print(f"training on {len(augmented)} samples (augmented from {len(train_set)}), "
          f"validating on {len(val_set)}")

    best_path, history = train(model, augmented, val_set, cfg.train)
    history_path = Path(cfg.train.checkpoint_dir) / "history.csv"
    write_history_csv(history_path, history)
    best = min(history, key=lambda row: row["val_loss"])
    print(f"best epoch {best['epoch']}: val_loss {best['val_loss']:.4f}, "
          f"val_dice {best['val_dice']:.4f}")
    print(f"checkpoint: {best_path}")
    print(f"history: {history_path}")
    return 0


def _load_eval_samples(args, name: str):
    samples = load_dataset(args.root, name)
    if args.split == "test":
        if name not in SPLITTABLE_DATASETS:
            return samples  # test-only corpora are used whole
        _, _, test_set = split_samples(samples, SplitSpec(seed=args.seed))
        return test_set
    return samples


def cmd_evaluate(args) -> int:
    model, _manifest = load_checkpoint(args.checkpoint)
    size = model.config.input_size
    reports = []
    for name in args.dataset:
        samples = _load_eval_samples(args, name)
        reports.append(evaluate(model, samples, threshold=args.threshold,
                                size=size, dataset=name))
    print(format_metrics_table(reports))
    if args.out:
        payload = [json.loads(r.to_json()) for r in reports]
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True),
                                  encoding="utf-8")
        print(f"metrics: {args.out}")
    return 0


def _to_panel(array: np.ndarray) -> Image.Image:
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    return Image.fromarray(array.astype(np.uint8))


def _denormalized_input(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    return np.asarray(Image.fromarray(image).resize((size[1], size[0]), Image.BILINEAR))


def cmd_predict(args) -> int:
    model, _manifest = load_checkpoint(args.checkpoint)
    size = model.config.input_size
    model.eval()
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        raise ConfigError(f"images directory does not exist: {images_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks_dir = Path(args.masks) if args.masks else None

    files = sorted(p for p in images_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"))
    if not files:
        raise ConfigError(f"no images found under {images_dir}")
    written = 0
    for path in files:
        try:
            image = load_image(path)
        except Exception as exc:
            print(f"warning: skipping unreadable image {path}: {exc}", file=sys.stderr)
            continue
        with torch.no_grad():
            prob = model(preprocess_image(image, size)[None])[0, 0].numpy()
        prob_png = np.round(prob * 255.0).astype(np.uint8)
        mask_png = ((prob > args.threshold) * 255).astype(np.uint8)
        Image.fromarray(prob_png).save(out / f"{path.stem}_prob.png")
        Image.fromarray(mask_png).save(out / f"{path.stem}_mask.png")

        panels = [_to_panel(_denormalized_input(image, size))]
        if masks_dir is not None:
            gt_path = next((masks_dir / f"{path.stem}{ext}"
                            for ext in (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
                            if (masks_dir / f"{path.stem}{ext}").is_file()), None)
            if gt_path is not None:
                gt = preprocess_mask_panel(load_mask(gt_path), size)
                panels.append(_to_panel(gt))
        panels.append(_to_panel(mask_png))
        strip = Image.new("RGB", (sum(p.width for p in panels), size[0]))
        x = 0
        for p in panels:
            strip.paste(p, (x, 0))
            x += p.width
        strip.save(out / f"{path.stem}_overlay.png")
        written += 1
    if written == 0:
        print("error: no input image could be read", file=sys.stderr)
        return 1
    print(f"wrote {written} prediction(s) to {out}")
    return 0


def preprocess_mask_panel(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-resized {0,255} ground-truth panel for overlays."""
    img = Image.fromarray((mask * 255).astype(np.uint8))
    return np.asarray(img.resize((size[1], size[0]), Image.NEAREST))


def cmd_audit_params(args) -> int:
    cfg = load_run_config(args.config)
    # parameter counts do not depend on weight values, so the audit always
    # builds with random init and never needs a pretrained weight source
    model_cfg = dataclasses.replace(
        cfg.model, encoder=dataclasses.replace(cfg.model.encoder, init="random"))
    model = build_model(model_cfg)
    audit = _print_audit_banner(model)
    mismatches = audit.mismatches()
    if mismatches:
        for c in mismatches:
            print(f"error: component {c.name}: closed-form {c.closed_form} != "
                  f"introspected {c.introspected}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="effiseg",
        description="Polyp segmentation pipeline: data preparation, training, "
                    "evaluation, prediction, and parameter auditing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="split corpora and build the augmented training cache")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for manifest and cache")
    p.add_argument("--datasets", nargs="+", default=list(SPLITTABLE_DATASETS))
    p.set_defaults(handler=cmd_prepare_data)

    p = sub.add_parser("train", help="train per the run config")
    p.add_argument("--config", required=True)
    p.add_argument("--dry-run", action="store_true",
                   help="build the model, run one forward/backward, exit")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="Dice/IoU of a checkpoint on datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", action="append", required=True,
                   help="dataset name under --root (repeatable)")
    p.add_argument("--root", required=True)
    p.add_argument("--split", choices=["all", "test"], default="all",
                   help="evaluate the whole corpus or its seeded test split")
    p.add_argument("--seed", type=int, default=0, help="split seed for --split test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None, help="write metrics JSON here")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("predict", help="write probability maps, masks, and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--masks", default=None, help="optional ground-truth mask directory")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("audit-params", help="closed-form vs introspected parameter audit")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=cmd_audit_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


def cli_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli_entry()
