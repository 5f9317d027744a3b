"""Loss assembly, the optimization loop, and early stopping.

Every head trains with binary cross-entropy; the per-term weights generalize
the single balancing hyperparameter so ablation rows like (2, 3, 1) are
expressible. Training is deterministic for a fixed seed and single-worker
loading.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import datapipe
from .datapipe import AugmentPolicy, Manifest, Sample, derive_seed
from .model import DetectorNet, save_checkpoint


class NumericsError(RuntimeError):
    """Non-finite loss; carries the batch index and per-term losses."""

    def __init__(self, batch_index: int, components: dict[str, float]):
        self.batch_index = batch_index
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at batch {batch_index} ({parts})")


@dataclass
class LossWeights:
    """Per-term weights (classification, AI mask, manipulation mask).

    Defaults (2, 2, 1); `from_alpha(a)` gives the single-knob form
    (a, a, 1).
    """

    w_cls: float = 2.0
    w_seg_ai: float = 2.0
    w_seg_ma: float = 1.0

    def __post_init__(self):
        for name in ("w_cls", "w_seg_ai", "w_seg_ma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def from_alpha(cls, alpha: float) -> "LossWeights":
        return cls(w_cls=alpha, w_seg_ai=alpha, w_seg_ma=1.0)


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epoch_fraction: float = 0.10
    early_stop_delta: float = 0.01
    early_stop_patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    crop_size: int | None = 512
    crop_pad: int = 1
    augment_policy: AugmentPolicy | None = field(default_factory=AugmentPolicy)
    val_fraction: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    dtype: str = "float32"
    device: str = "cpu"
    # Classification-label overrides per category value, for label ablations.
    label_overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        positives = ("batch_size", "learning_rate", "epoch_fraction",
                     "early_stop_delta", "early_stop_patience", "max_epochs")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def seg_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy computed from logits (numerically stable)."""
    if logits.shape != target.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != target shape {tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def total_loss(l_cls, l_seg_ai, l_seg_ma, weights: LossWeights):
    return weights.w_cls * l_cls + weights.w_seg_ai * l_seg_ai + weights.w_seg_ma * l_seg_ma


def early_stop_check(history: Sequence[float], delta: float = 0.01,
                     patience: int = 5) -> str:
    """'stop' once `patience` consecutive epochs fail to beat the best value
    seen so far by more than `delta`, else 'continue'."""
    if len(history) == 0:
        raise ValueError("history is empty")
    best = history[0]
    streak = 0
    for value in history[1:]:
        if value > best + delta:
            streak = 0
        else:
            streak += 1
        best = max(best, value)
    return "stop" if streak >= patience else "continue"


def to_batch(samples: Sequence[Sample], dtype: torch.dtype = torch.float32,
             device: str = "cpu", label_overrides: dict[str, int] | None = None):
    """Stack samples into model-ready tensors; images scaled to [-1, 1]."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    images = (images / 255.0 - 0.5) / 0.5
    x = torch.from_numpy(images).permute(0, 3, 1, 2).to(dtype=dtype, device=device)
    mani = torch.from_numpy(np.stack([s.mask_mani for s in samples])).to(dtype=dtype, device=device)
    ai = torch.from_numpy(np.stack([s.mask_ai for s in samples])).to(dtype=dtype, device=device)
    labels = [
        (label_overrides or {}).get(s.category.value, s.cls_label)
        for s in samples
    ]
    cls = torch.tensor(labels, dtype=dtype, device=device)
    return x, mani, ai, cls


def _epoch_samples(dataset: Manifest | Sequence[Sample], config: TrainConfig,
                   epoch: int) -> list[Sample]:
    """Subsampled, cropped, augmented samples for one epoch, deterministically."""
    epoch_seed = derive_seed(config.seed, 7, epoch)
    if isinstance(dataset, Manifest):
        sub = datapipe.epoch_subsample(dataset, config.epoch_fraction, epoch_seed)
        raw = [datapipe.load_sample(r, sub.root) for r in sub.records]
    else:
        n = len(dataset)
        if n == 0:
            raise ValueError("empty dataset")
        k = math.ceil(config.epoch_fraction * n)
        order = np.random.default_rng(epoch_seed).permutation(n)[:k]
        raw = [dataset[i] for i in order]

    out = []
    for i, sample in enumerate(raw):
        if config.crop_size is not None:
            sample = datapipe.random_crop(sample, config.crop_size, config.crop_pad,
                                          seed=derive_seed(config.seed, 11, epoch, i))
        if config.augment_policy is not None:
            sample = datapipe.augment(sample, config.augment_policy,
                                      seed=derive_seed(config.seed, 13, epoch, i))
        out.append(sample)
    return out


def train_step(model: DetectorNet, optimizer, samples: Sequence[Sample],
               config: TrainConfig, batch_index: int = 0) -> dict[str, float]:
    """One forward/backward/update on a batch; returns per-term losses."""
    x, mani, ai, cls = to_batch(samples, config.torch_dtype(), config.device,
                                config.label_overrides)
    bundle = model(x)
    l_cls = seg_loss(bundle.cls_logit, cls)
    l_ai = seg_loss(bundle.mask_ai_logits, ai)
    l_ma = seg_loss(bundle.mask_mani_logits, mani)
    loss = total_loss(l_cls, l_ai, l_ma, config.loss_weights)

    components = {
        "loss": loss.detach().item(), "loss_cls": l_cls.detach().item(),
        "loss_seg_ai": l_ai.detach().item(), "loss_seg_ma": l_ma.detach().item(),
    }
    if not math.isfinite(components["loss"]):
        raise NumericsError(batch_index, components)

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    with torch.no_grad():
        pred = (torch.sigmoid(bundle.cls_logit) >= 0.5).to(cls.dtype)
        components["acc"] = float((pred == cls).float().mean())
    return components


def train_epoch(model: DetectorNet, dataset: Manifest | Sequence[Sample],
                config: TrainConfig, optimizer, epoch: int = 0) -> dict[str, float]:
    """Train over one subsampled epoch; returns sample-weighted mean metrics."""
    samples = _epoch_samples(dataset, config, epoch)
    model.train()
    sums = {"loss": 0.0, "loss_cls": 0.0, "loss_seg_ai": 0.0, "loss_seg_ma": 0.0,
            "acc": 0.0}
    n = 0
    for b in range(0, len(samples), config.batch_size):
        batch = samples[b : b + config.batch_size]
        stats = train_step(model, optimizer, batch, config, batch_index=b // config.batch_size)
        for k in sums:
            sums[k] += stats[k] * len(batch)
        n += len(batch)
    metrics = {k: v / n for k, v in sums.items()}
    metrics["epoch"] = epoch
    metrics["n_samples"] = n
    return metrics


def predict_proba(model: DetectorNet, samples: Sequence[Sample],
                  config: TrainConfig | None = None,
                  batch_size: int | None = None) -> np.ndarray:
    """Image-level probability of being AI-generated, one float per sample."""
    config = config or TrainConfig()
    batch_size = batch_size or config.batch_size
    model.eval()
    probs = []
    with torch.no_grad():
        for b in range(0, len(samples), batch_size):
            x, _, _, _ = to_batch(samples[b : b + batch_size], config.torch_dtype(),
                                  config.device)
            bundle = model(x)
            probs.append(torch.sigmoid(bundle.cls_logit).cpu().numpy())
    return np.concatenate(probs)


def eval_transform(sample: Sample, config: TrainConfig) -> Sample:
    if config.crop_size is None:
        return sample
    return datapipe.center_crop(sample, config.crop_size, config.crop_pad)


def validation_accuracy(model: DetectorNet, manifest: Manifest,
                        config: TrainConfig) -> float:
    samples = [eval_transform(datapipe.load_sample(r, manifest.root), config)
               for r in manifest.records]
    probs = predict_proba(model, samples, config)
    labels = np.array([r.cls_label for r in manifest.records])
    return float(((probs >= 0.5).astype(int) == labels).mean())


def metrics_line(metrics: dict) -> str:
    return json.dumps({k: metrics[k] for k in sorted(metrics)})


def fit(model: DetectorNet, manifest: Manifest, config: TrainConfig,
        out_dir: str | Path | None = None) -> list[dict]:
    """Full training loop with per-epoch checkpoints and early stopping.

    Uses the manifest's val split for the stopping metric, holding one out per
    category when the manifest has none. Writes `metrics.jsonl`,
    `checkpoint_last.pt`, and `checkpoint_best.pt` under `out_dir`.
    """
    if not any(r.split == "val" for r in manifest.records):
        manifest = datapipe.with_val_holdout(manifest, config.val_fraction, config.seed)
    train_split = manifest.subset("train")
    val_split = manifest.subset("val")
    if len(train_split) == 0:
        raise ValueError("manifest has no training records")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("", encoding="utf-8")

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 betas=config.adam_betas)
    history: list[float] = []
    all_metrics: list[dict] = []
    best_acc = -1.0
    for epoch in range(config.max_epochs):
        metrics = train_epoch(model, train_split, config, optimizer, epoch)
        if len(val_split) > 0:
            metrics["val_acc"] = validation_accuracy(model, val_split, config)
        else:
            metrics["val_acc"] = metrics["acc"]
        history.append(metrics["val_acc"])
        all_metrics.append(metrics)

        if out_dir is not None:
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(metrics_line(metrics) + "\n")
            save_checkpoint(model, out_dir / "checkpoint_last.pt",
                            extra={"epoch": epoch, "val_acc": metrics["val_acc"]})
            if metrics["val_acc"] > best_acc:
                best_acc = metrics["val_acc"]
                save_checkpoint(model, out_dir / "checkpoint_best.pt",
                                extra={"epoch": epoch, "val_acc": metrics["val_acc"]})

        if early_stop_check(history, config.early_stop_delta,
                            config.early_stop_patience) == "stop":
            break
    return all_metrics
