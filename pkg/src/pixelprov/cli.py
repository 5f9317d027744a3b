"""Command-line entry point wiring forging, training, evaluation, robustness
sweeps, and ablation grids behind reproducible config-driven commands.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Values in a JSON config file (--config) override command-line flags, and every
run writes the resolved configuration to output_dir/config_snapshot.json.
Environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from . import datapipe, evalkit, forge, trainer
from .datapipe import Manifest, ManifestError
from .forge import FormatError, SourceCategory
from .model import DetectorNet, EncoderConfig, load_checkpoint
from .trainer import LossWeights, NumericsError, TrainConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _parse_weights(text: str) -> LossWeights:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated loss weights (cls,seg_ai,seg_ma)")
    return LossWeights(*parts)


def _resolve(ns: argparse.Namespace) -> dict:
    """Flags merged with the JSON config file; file values take precedence."""
    resolved = {k: v for k, v in vars(ns).items() if k not in ("func", "config")}
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            overrides = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as e:
            raise ValueError(f"config file {config_path} is not valid JSON: {e}") from None
        if not isinstance(overrides, dict):
            raise ValueError("config file must contain a JSON object")
        for key, value in overrides.items():
            if key not in resolved:
                raise ValueError(f"unknown config key '{key}'")
            resolved[key] = value
    return resolved


def _write_snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **resolved}
    (out_dir / "config_snapshot.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )


def _build_model(cfg: dict) -> DetectorNet:
    kwargs = dict(
        attn_variant=cfg["attn_variant"],
        attention_mode=cfg["attention_mode"],
    )
    enc = EncoderConfig.toy(**kwargs) if cfg["toy"] else EncoderConfig(**kwargs)
    torch.manual_seed(int(cfg["seed"]))
    model = DetectorNet(enc)
    if cfg.get("dtype") == "float64":
        model = model.double()
    return model


def _train_config(cfg: dict) -> TrainConfig:
    crop = int(cfg["crop_size"])
    policy = None
    if not cfg["no_augment"]:
        policy = datapipe.AugmentPolicy(
            flip_prob=float(cfg["aug_flip_prob"]),
            blur_prob=float(cfg["aug_blur_prob"]),
            jitter_prob=float(cfg["aug_jitter_prob"]),
            jpeg_prob=float(cfg["aug_jpeg_prob"]),
        )
    return TrainConfig(
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        epoch_fraction=float(cfg["epoch_fraction"]),
        early_stop_delta=float(cfg["early_stop_delta"]),
        early_stop_patience=int(cfg["early_stop_patience"]),
        max_epochs=int(cfg["epochs"]),
        seed=int(cfg["seed"]),
        loss_weights=cfg["weights"] if isinstance(cfg["weights"], LossWeights)
        else _parse_weights(cfg["weights"]),
        crop_size=None if crop == 0 else crop,
        augment_policy=policy,
        val_fraction=float(cfg["val_fraction"]),
        dtype=cfg["dtype"],
    )


# --- commands -----------------------------------------------------------------


def cmd_forge(ns: argparse.Namespace) -> int:
    cfg = _resolve(ns)
    input_dir = Path(cfg["input_dir"])
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    out_dir = Path(cfg["output_dir"])
    _write_snapshot(out_dir, "forge", cfg)
    ops = tuple(op.strip() for op in cfg["ops"].split(",") if op.strip())
    manifest = forge.forge_dataset(
        input_dir,
        out_dir,
        ops=ops,
        n=cfg["n"],
        jpeg_quality=int(cfg["jpeg_quality"]),
        seed=int(cfg["seed"]),
        include_real=cfg["include_real"],
        split=cfg["split"],
    )
    print(f"wrote {len(manifest)} samples to {out_dir}")
    for category, count in sorted(manifest.category_counts().items()):
        print(f"  {category}: {count}")
    return 0


def cmd_train(ns: argparse.Namespace) -> int:
    cfg = _resolve(ns)
    out_dir = Path(cfg["output_dir"])
    _write_snapshot(out_dir, "train", cfg)
    manifest = Manifest.load(cfg["manifest"])
    model = _build_model(cfg)
    metrics = trainer.fit(model, manifest, _train_config(cfg), out_dir)
    last = metrics[-1]
    print(f"trained {len(metrics)} epochs; final loss {last['loss']:.4f}, "
          f"val_acc {last['val_acc']:.4f}")
    print(f"metrics: {out_dir / 'metrics.jsonl'}")
    return 0


def _eval_split(manifest: Manifest) -> Manifest:
    for split in ("test", "val", "train"):
        sub = manifest.subset(split)
        if len(sub):
            return sub
    raise ManifestError("manifest has no records to evaluate")


def cmd_eval(ns: argparse.Namespace) -> int:
    cfg = _resolve(ns)
    out_dir = Path(cfg["output_dir"])
    _write_snapshot(out_dir, "eval", cfg)
    model, _ = load_checkpoint(cfg["checkpoint"])
    manifest = _eval_split(Manifest.load(cfg["manifest"]))
    crop = int(cfg["crop_size"])
    config = TrainConfig(batch_size=int(cfg["batch_size"]),
                         crop_size=None if crop == 0 else crop)
    qualities = _parse_int_list(cfg["qualities"]) if cfg["qualities"] else None
    report = evalkit.per_source_report(
        model, manifest, config,
        align_quality=int(cfg["align_quality"]),
        qualities=qualities,
    )
    formats = [f.strip() for f in cfg["formats"].split(",") if f.strip()]
    written = evalkit.emit_report(report, formats, out_dir)
    print(f"overall accuracy: {report.overall_accuracy:.4f}")
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_sweep(ns: argparse.Namespace) -> int:
    cfg = _resolve(ns)
    out_dir = Path(cfg["output_dir"])
    _write_snapshot(out_dir, "sweep", cfg)
    model, _ = load_checkpoint(cfg["checkpoint"])
    manifest = _eval_split(Manifest.load(cfg["manifest"]))
    crop = int(cfg["crop_size"])
    config = TrainConfig(batch_size=int(cfg["batch_size"]),
                         crop_size=None if crop == 0 else crop)
    qualities = _parse_int_list(cfg["qualities"])
    report = evalkit.per_source_report(model, manifest, config,
                                       align_quality=int(cfg["align_quality"]),
                                       qualities=qualities)
    formats = [f.strip() for f in cfg["formats"].split(",") if f.strip()]
    written = evalkit.emit_report(report, formats, out_dir)
    for q, acc in report.robustness_curve:
        print(f"quality {q:>3d}: accuracy {acc:.4f}")
    for path in written:
        print(f"wrote {path}")
    return 0


_WEIGHT_GRID = ((2, 1, 1), (2, 3, 1), (2, 1, 2), (2, 2, 1))

_ATTENTION_GRID = ("none", "forward", "dual", "reverse")

_DATASET_GRID = (
    ("inpaint", {SourceCategory.INPAINT}),
    ("inpaint+blended", {SourceCategory.INPAINT, SourceCategory.INPAINT_BLENDED}),
    ("inpaint+copymove_splicing",
     {SourceCategory.INPAINT, SourceCategory.COPY_MOVE, SourceCategory.SPLICING}),
    ("all", {SourceCategory.INPAINT, SourceCategory.INPAINT_BLENDED,
             SourceCategory.COPY_MOVE, SourceCategory.SPLICING}),
)

DEFAULT_GRIDS = ("heads", "labels", "weights", "attention")


def ablation_cells(grids) -> list[tuple[str, str, dict]]:
    """Expand grid names into (grid, cell, overrides) rows."""
    cells = []
    for grid in grids:
        if grid == "heads":
            combos = (("cls", (0.0, 0.0)), ("cls+maniseg", (0.0, 1.0)),
                      ("cls+aiseg", (2.0, 0.0)), ("cls+maniseg+aiseg", (2.0, 1.0)))
            for name, (w_ai, w_ma) in combos:
                cells.append((grid, name,
                              {"loss_weights": LossWeights(2.0, w_ai, w_ma)}))
        elif grid == "labels":
            cells.append((grid, "none",
                          {"drop_categories": {SourceCategory.COPY_MOVE,
                                               SourceCategory.SPLICING}}))
            for cm, sp in ((1, 1), (0, 1), (1, 0), (0, 0)):
                cells.append((grid, f"cm{cm}_sp{sp}",
                              {"label_overrides": {"copy_move": cm, "splicing": sp}}))
        elif grid == "weights":
            for w in _WEIGHT_GRID:
                name = "-".join(str(x) for x in w)
                cells.append((grid, name, {"loss_weights": LossWeights(*map(float, w))}))
        elif grid == "attention":
            for mode in _ATTENTION_GRID:
                cells.append((grid, mode, {"attention_mode": mode}))
        elif grid == "datasets":
            for name, keep in _DATASET_GRID:
                cells.append((grid, name,
                              {"keep_categories": keep | {SourceCategory.REAL}}))
        elif grid == "default":
            cells.append((grid, "default", {}))
        else:
            raise ValueError(f"unknown grid key '{grid}'")
    return cells


def _filter_train(manifest: Manifest, drop=None, keep=None) -> Manifest:
    records = []
    for r in manifest.records:
        if r.split == "train":
            if drop is not None and r.category in drop:
                continue
            if keep is not None and r.category not in keep:
                continue
        records.append(r)
    return Manifest(records=records, root=manifest.root)


def cmd_ablate(ns: argparse.Namespace) -> int:
    cfg = _resolve(ns)
    out_dir = Path(cfg["output_dir"])
    _write_snapshot(out_dir, "ablate", cfg)
    manifest = Manifest.load(cfg["manifest"])
    base_config = _train_config(cfg)
    if not any(r.split == "val" for r in manifest.records):
        manifest = datapipe.with_val_holdout(manifest, base_config.val_fraction,
                                             base_config.seed)
    eval_manifest = _eval_split(manifest)

    grids = [g.strip() for g in cfg["grids"].split(",") if g.strip()]
    cells = ablation_cells(grids)

    rows = []
    for grid, cell, overrides in cells:
        cell_manifest = _filter_train(manifest,
                                      drop=overrides.get("drop_categories"),
                                      keep=overrides.get("keep_categories"))
        config = dataclasses.replace(
            base_config,
            loss_weights=overrides.get("loss_weights", base_config.loss_weights),
            label_overrides=overrides.get("label_overrides", {}),
        )
        cell_cfg = dict(cfg)
        cell_cfg["attention_mode"] = overrides.get("attention_mode",
                                                   cfg["attention_mode"])
        model = _build_model(cell_cfg)
        trainer.fit(model, cell_manifest, config, out_dir=None)
        acc = evalkit.accuracy_at_quality(model, eval_manifest, config,
                                          int(cfg["align_quality"]))
        rows.append((grid, cell, acc))
        print(f"[{grid}] {cell}: accuracy {acc:.4f}")

    table = "grid\tcell\taccuracy\n" + "".join(
        f"{g}\t{c}\t{a!r}\n" for g, c, a in rows
    )
    (out_dir / "ablation.tsv").write_text(table, encoding="utf-8")
    print(f"wrote {out_dir / 'ablation.tsv'} ({len(rows)} cells)")
    return 0


# --- parser ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="pixelprov",
                     description="AI-generated-image detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None,
                       help="JSON config file; values override flags")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--output-dir", dest="output_dir", required=True)

    p = sub.add_parser("forge", help="synthesize a forged dataset from real images")
    add_common(p)
    p.add_argument("--input-dir", dest="input_dir", required=True)
    p.add_argument("--ops", default="copymove,splice,blend,inpaint",
                   help="comma list of copymove,splice,blend,inpaint")
    p.add_argument("--n", type=int, default=None,
                   help="number of forged samples (default: one pass per op)")
    p.add_argument("--jpeg-quality", dest="jpeg_quality", type=int, default=96)
    p.add_argument("--include-real", dest="include_real", action="store_true",
                   help="also emit an aligned authentic sample per source image")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_forge)

    def add_train_like(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
        p.add_argument("--learning-rate", dest="learning_rate", type=float, default=1e-4)
        p.add_argument("--epoch-fraction", dest="epoch_fraction", type=float, default=0.10)
        p.add_argument("--early-stop-delta", dest="early_stop_delta", type=float, default=0.01)
        p.add_argument("--early-stop-patience", dest="early_stop_patience", type=int, default=5)
        p.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.05)
        p.add_argument("--weights", default="2,2,1",
                       help="loss weights: cls,seg_ai,seg_ma")
        p.add_argument("--crop-size", dest="crop_size", type=int, default=512,
                       help="training/eval crop (0 disables cropping)")
        p.add_argument("--no-augment", dest="no_augment", action="store_true")
        p.add_argument("--aug-flip-prob", dest="aug_flip_prob", type=float, default=0.5)
        p.add_argument("--aug-blur-prob", dest="aug_blur_prob", type=float, default=0.5)
        p.add_argument("--aug-jitter-prob", dest="aug_jitter_prob", type=float, default=0.3)
        p.add_argument("--aug-jpeg-prob", dest="aug_jpeg_prob", type=float, default=0.3)
        p.add_argument("--toy", action="store_true", help="toy-scale model config")
        p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
        p.add_argument("--attn-variant", dest="attn_variant", default="spatial_kv",
                       choices=("spatial_kv", "literal_token"))
        p.add_argument("--attention-mode", dest="attention_mode", default="reverse",
                       choices=("none", "forward", "dual", "reverse"))

    p = sub.add_parser("train", help="train a detector from a manifest")
    add_common(p)
    add_train_like(p)
    p.add_argument("--epochs", type=int, default=100)
    p.set_defaults(func=cmd_train)

    def add_eval_like(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
        p.add_argument("--crop-size", dest="crop_size", type=int, default=512)
        p.add_argument("--align-quality", dest="align_quality", type=int, default=96)

    p = sub.add_parser("eval", help="evaluate a checkpoint, per-source report")
    add_common(p)
    add_eval_like(p)
    p.add_argument("--qualities", default="",
                   help="optional comma list to add a robustness curve")
    p.add_argument("--formats", default="text-table,delimited",
                   help="comma list of text-table,delimited,plot")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="JPEG-degradation robustness sweep")
    add_common(p)
    add_eval_like(p)
    p.add_argument("--qualities",
                   default=",".join(str(q) for q in evalkit.DEFAULT_SWEEP_QUALITIES))
    p.add_argument("--formats", default="text-table,delimited,plot")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train/eval one cell per ablation-grid row")
    add_common(p)
    add_train_like(p)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--grids", default=",".join(DEFAULT_GRIDS),
                   help="comma list of heads,labels,weights,attention,datasets,default")
    p.add_argument("--align-quality", dest="align_quality", type=int, default=96)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return ns.func(ns)
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ManifestError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
