"""Accuracy and segmentation metrics, per-source reports, and JPEG-degradation
robustness sweeps.

Evaluation always routes images through format alignment (JPEG re-encode,
default quality 96) before the center crop, matching the training condition;
a robustness sweep simply varies that quality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datapipe, trainer
from .datapipe import Manifest, Sample
from .forge import SourceCategory, decode_jpeg, jpeg_align
from .model import DetectorNet
from .trainer import TrainConfig

# Published full-scale results for context in report headers; desk-scale runs
# are not expected to approach them.
REFERENCE_NOTES = (
    "full-scale reference (not reproducible at desk scale): GenImage avg accuracy 95.1",
    "stated gain over prior best: 5.8% (a 5.4% figure also appears in the same source)",
)


@dataclass
class EvalReport:
    per_source_accuracy: dict[str, float]
    per_source_counts: dict[str, int]
    overall_accuracy: float
    seg_f1_ai: float
    seg_f1_ma: float
    robustness_curve: list[tuple[int, float]] = field(default_factory=list)
    notes: tuple[str, ...] = REFERENCE_NOTES


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches between two equal-length binary sequences."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("cannot compute accuracy of an empty sequence")
    return float((predictions == labels).mean())


def seg_metrics(logit_map: np.ndarray, target_mask: np.ndarray,
                threshold: float = 0.5) -> tuple[float, float]:
    """Pixel F1 and IoU of the thresholded sigmoid prediction.

    Defined as (1.0, 1.0) when prediction and target are both empty.
    """
    logit_map = np.asarray(logit_map, dtype=np.float64)
    target_mask = np.asarray(target_mask)
    if logit_map.shape != target_mask.shape:
        raise ValueError(
            f"logit map shape {logit_map.shape} != target shape {target_mask.shape}"
        )
    prob = 1.0 / (1.0 + np.exp(-logit_map))
    pred = prob >= threshold
    target = target_mask.astype(bool)
    tp = int(np.logical_and(pred, target).sum())
    fp = int(np.logical_and(pred, ~target).sum())
    fn = int(np.logical_and(~pred, target).sum())
    if tp + fp + fn == 0:
        return 1.0, 1.0
    iou = tp / (tp + fp + fn)
    f1 = 2 * tp / (2 * tp + fp + fn)
    return float(f1), float(iou)


def degrade(image: np.ndarray, quality: int) -> np.ndarray:
    """Round-trip an image through JPEG at the given quality."""
    return decode_jpeg(jpeg_align(image, quality))


def _eval_samples(manifest: Manifest, config: TrainConfig,
                  quality: int | None) -> list[Sample]:
    samples = []
    for record in manifest.records:
        sample = datapipe.load_sample(record, manifest.root)
        if quality is not None:
            sample = datapipe.Sample(
                image=degrade(sample.image, quality),
                mask_mani=sample.mask_mani,
                mask_ai=sample.mask_ai,
                cls_label=sample.cls_label,
                category=sample.category,
            )
        samples.append(trainer.eval_transform(sample, config))
    return samples


def predict_labels(model: DetectorNet, manifest: Manifest, config: TrainConfig,
                   quality: int | None = 96) -> np.ndarray:
    """Predicted image-level labels after degrade-at-quality and center crop."""
    samples = _eval_samples(manifest, config, quality)
    probs = trainer.predict_proba(model, samples, config)
    return (probs >= 0.5).astype(int)


def accuracy_at_quality(model: DetectorNet, manifest: Manifest,
                        config: TrainConfig, quality: int | None) -> float:
    preds = predict_labels(model, manifest, config, quality)
    labels = [r.cls_label for r in manifest.records]
    return accuracy(preds, labels)


def robustness_sweep(model: DetectorNet, manifest: Manifest,
                     qualities: Sequence[int],
                     config: TrainConfig | None = None) -> list[tuple[int, float]]:
    """Accuracy after re-encoding every evaluation image at each JPEG quality.

    Points come back in input order; each is an independent evaluation with no
    smoothing.
    """
    config = config or TrainConfig()
    for q in qualities:
        if not 1 <= q <= 100:
            raise ValueError(f"sweep quality {q} outside [1, 100]")
    return [(int(q), accuracy_at_quality(model, manifest, config, int(q)))
            for q in qualities]


DEFAULT_SWEEP_QUALITIES = (100, 96, 90, 80, 70, 60, 50)


def per_source_report(model: DetectorNet, manifest: Manifest,
                      config: TrainConfig | None = None,
                      align_quality: int | None = 96,
                      qualities: Sequence[int] | None = None) -> EvalReport:
    """Balanced per-source accuracies plus segmentation quality.

    Each generated source is scored together with an equal count of authentic
    samples (manifest order) when any are available; overall accuracy is the
    sample-weighted mean over the per-source evaluation sets.
    """
    config = config or TrainConfig()
    if len(manifest) == 0:
        raise ValueError("cannot evaluate an empty manifest")
    samples = _eval_samples(manifest, config, align_quality)
    probs = trainer.predict_proba(model, samples, config)
    preds = (probs >= 0.5).astype(int)
    labels = np.array([r.cls_label for r in manifest.records])

    real_idx = [i for i, r in enumerate(manifest.records)
                if r.category is SourceCategory.REAL]
    by_source: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        if r.category is not SourceCategory.REAL:
            by_source.setdefault(r.category.value, []).append(i)

    per_acc: dict[str, float] = {}
    per_count: dict[str, int] = {}
    if not by_source:
        # Authentic-only manifest: report the single real row.
        per_acc["real"] = accuracy(preds[real_idx], labels[real_idx])
        per_count["real"] = len(real_idx)
    for source, idxs in sorted(by_source.items()):
        if not idxs:
            warnings.warn(f"source '{source}' has no samples; omitted")
            continue
        paired = idxs + real_idx[: len(idxs)]
        per_acc[source] = accuracy(preds[paired], labels[paired])
        per_count[source] = len(paired)

    total = sum(per_count.values())
    overall = sum(per_acc[s] * per_count[s] for s in per_acc) / total

    f1_ai, f1_ma = _mean_seg_f1(model, samples, config)

    curve = []
    if qualities:
        curve = robustness_sweep(model, manifest, qualities, config)
    return EvalReport(
        per_source_accuracy=per_acc,
        per_source_counts=per_count,
        overall_accuracy=float(overall),
        seg_f1_ai=f1_ai,
        seg_f1_ma=f1_ma,
        robustness_curve=curve,
    )


def _mean_seg_f1(model: DetectorNet, samples: Sequence[Sample],
                 config: TrainConfig) -> tuple[float, float]:
    import torch

    model.eval()
    f1s_ai, f1s_ma = [], []
    with torch.no_grad():
        for b in range(0, len(samples), config.batch_size):
            chunk = samples[b : b + config.batch_size]
            x, mani, ai, _ = trainer.to_batch(chunk, config.torch_dtype(), config.device)
            bundle = model(x)
            for j in range(len(chunk)):
                f1, _ = seg_metrics(bundle.mask_ai_logits[j].cpu().numpy(),
                                    ai[j].cpu().numpy())
                f1s_ai.append(f1)
                f1, _ = seg_metrics(bundle.mask_mani_logits[j].cpu().numpy(),
                                    mani[j].cpu().numpy())
                f1s_ma.append(f1)
    return float(np.mean(f1s_ai)), float(np.mean(f1s_ma))


# --- report emission ---------------------------------------------------------

_FORMATS = ("text-table", "delimited", "plot")


def report_to_text(report: EvalReport) -> str:
    lines = ["evaluation report", "=" * 17]
    lines += [f"note: {n}" for n in report.notes]
    lines.append("")
    lines.append(f"{'source':<20} {'accuracy':>9} {'samples':>8}")
    for source in report.per_source_accuracy:
        lines.append(f"{source:<20} {report.per_source_accuracy[source]:>9.4f} "
                     f"{report.per_source_counts[source]:>8d}")
    lines.append(f"{'overall':<20} {report.overall_accuracy:>9.4f}")
    lines.append("")
    lines.append(f"seg F1 (AI head):   {report.seg_f1_ai:.4f}")
    lines.append(f"seg F1 (mani head): {report.seg_f1_ma:.4f}")
    lines.append("")
    if report.robustness_curve:
        lines.append("robustness (jpeg quality -> accuracy):")
        for q, acc in report.robustness_curve:
            lines.append(f"  {q:>3d} -> {acc:.4f}")
    else:
        lines.append("robustness curve: (none)")
    return "\n".join(lines) + "\n"


def report_to_delimited(report: EvalReport) -> str:
    rows = []
    for n in report.notes:
        rows.append(f"note\t{n}")
    for source in report.per_source_accuracy:
        rows.append(f"source\t{source}\t{report.per_source_accuracy[source]!r}"
                    f"\t{report.per_source_counts[source]}")
    rows.append(f"overall\t{report.overall_accuracy!r}")
    rows.append(f"seg_f1\tai\t{report.seg_f1_ai!r}")
    rows.append(f"seg_f1\tmani\t{report.seg_f1_ma!r}")
    for q, acc in report.robustness_curve:
        rows.append(f"robustness\t{q}\t{acc!r}")
    return "\n".join(rows) + "\n"


def parse_delimited(text: str) -> EvalReport:
    """Inverse of `report_to_delimited`."""
    per_acc: dict[str, float] = {}
    per_count: dict[str, int] = {}
    overall = None
    f1_ai = f1_ma = None
    curve: list[tuple[int, float]] = []
    notes: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        fields = line.split("\t")
        kind = fields[0]
        if kind == "note":
            notes.append(fields[1])
        elif kind == "source":
            per_acc[fields[1]] = float(fields[2])
            per_count[fields[1]] = int(fields[3])
        elif kind == "overall":
            overall = float(fields[1])
        elif kind == "seg_f1":
            if fields[1] == "ai":
                f1_ai = float(fields[2])
            else:
                f1_ma = float(fields[2])
        elif kind == "robustness":
            curve.append((int(fields[1]), float(fields[2])))
        else:
            raise ValueError(f"unknown report row kind '{kind}'")
    if overall is None or f1_ai is None or f1_ma is None:
        raise ValueError("incomplete delimited report")
    return EvalReport(
        per_source_accuracy=per_acc,
        per_source_counts=per_count,
        overall_accuracy=overall,
        seg_f1_ai=f1_ai,
        seg_f1_ma=f1_ma,
        robustness_curve=curve,
        notes=tuple(notes),
    )


def _plot_curve(report: EvalReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qualities = [q for q, _ in report.robustness_curve]
    accs = [a for _, a in report.robustness_curve]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(qualities, accs, marker="o")
    ax.set_xlabel("JPEG quality")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.invert_xaxis()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(report: EvalReport, formats: Sequence[str],
                out_dir: str | Path) -> list[Path]:
    """Write the report in the requested formats; returns the files created."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt not in _FORMATS:
            raise ValueError(f"unknown report format '{fmt}', expected one of {_FORMATS}")
        if fmt == "text-table":
            path = out_dir / "report.txt"
            path.write_text(report_to_text(report), encoding="utf-8")
            written.append(path)
        elif fmt == "delimited":
            path = out_dir / "report.tsv"
            path.write_text(report_to_delimited(report), encoding="utf-8")
            written.append(path)
        elif fmt == "plot":
            if not report.robustness_curve:
                continue  # nothing to draw; the text table records the absence
            path = out_dir / "robustness.png"
            _plot_curve(report, path)
            written.append(path)
    return written
