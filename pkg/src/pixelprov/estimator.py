"""Scikit-learn style front end for the detector.

`AIImageDetector` wraps model construction and the training loop behind the
usual fit/predict/predict_proba/score surface so it composes with pipelines,
grid search, and `clone`. Array inputs are batches of HxWx3 uint8 images;
alternatively `fit` accepts a manifest (object or path) for the file-backed
path with epoch subsampling, validation holdout, and early stopping.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import trainer
from .datapipe import Manifest, Sample
from .forge import SourceCategory
from .model import DetectorNet, EncoderConfig
from .trainer import LossWeights, TrainConfig


def check_images(X) -> np.ndarray:
    """Validate a batch of images: (n, H, W, 3) uint8 with 32-divisible sides."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.dtype != np.uint8:
        raise ValueError(f"expected uint8 images, got dtype {X.dtype}")
    n, h, w, _ = X.shape
    if n == 0:
        raise ValueError("empty image batch")
    if h % 32 or w % 32:
        raise ValueError(f"image sides must be divisible by 32, got {h}x{w}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    if y is None:
        raise ValueError("y is required when fitting on arrays")
    y = np.asarray(y).astype(int)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0 = authentic, 1 = AI-generated)")
    return y


def check_masks(masks, X: np.ndarray, name: str) -> np.ndarray:
    n, h, w, _ = X.shape
    if masks is None:
        return np.zeros((n, h, w), dtype=np.uint8)
    masks = np.asarray(masks)
    if masks.shape != (n, h, w):
        raise ValueError(f"{name} must have shape {(n, h, w)}, got {masks.shape}")
    if not np.isin(masks, (0, 1)).all():
        raise ValueError(f"{name} values must be in {{0, 1}}")
    return masks.astype(np.uint8)


def _samples_from_arrays(X, y, masks_mani, masks_ai) -> list[Sample]:
    samples = []
    for i in range(len(X)):
        category = SourceCategory.INPAINT_BLENDED if y[i] == 1 else SourceCategory.REAL
        samples.append(Sample(
            image=X[i],
            mask_mani=masks_mani[i],
            mask_ai=masks_ai[i],
            cls_label=int(y[i]),
            category=category,
        ))
    return samples


class AIImageDetector(BaseEstimator, ClassifierMixin):
    """Dual-decoder detector with reverse cross-attention, sklearn style.

    Defaults are the toy-scale configuration so array-based fits stay CPU
    friendly; pass the desk-scale channel widths for larger runs.
    """

    def __init__(
        self,
        stage_channels=(16, 32, 64, 128),
        stage_depths=(1, 1, 1, 1),
        attention_heads=(1, 2, 4, 8),
        decoder_channels=64,
        attn_variant="spatial_kv",
        attention_mode="reverse",
        loss_weights=(2.0, 2.0, 1.0),
        batch_size=16,
        learning_rate=1e-4,
        max_epochs=10,
        epoch_fraction=1.0,
        early_stop_delta=0.01,
        early_stop_patience=5,
        crop_size=None,
        augment=False,
        seed=0,
        device="cpu",
        dtype="float32",
    ):
        self.stage_channels = stage_channels
        self.stage_depths = stage_depths
        self.attention_heads = attention_heads
        self.decoder_channels = decoder_channels
        self.attn_variant = attn_variant
        self.attention_mode = attention_mode
        self.loss_weights = loss_weights
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.epoch_fraction = epoch_fraction
        self.early_stop_delta = early_stop_delta
        self.early_stop_patience = early_stop_patience
        self.crop_size = crop_size
        self.augment = augment
        self.seed = seed
        self.device = device
        self.dtype = dtype

    # -- config assembly --------------------------------------------------

    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            stage_channels=tuple(self.stage_channels),
            stage_depths=tuple(self.stage_depths),
            attention_heads=tuple(self.attention_heads),
            decoder_channels=self.decoder_channels,
            attn_variant=self.attn_variant,
            attention_mode=self.attention_mode,
        )

    def _train_config(self) -> TrainConfig:
        from .datapipe import AugmentPolicy

        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epoch_fraction=self.epoch_fraction,
            early_stop_delta=self.early_stop_delta,
            early_stop_patience=self.early_stop_patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
            loss_weights=LossWeights(*self.loss_weights),
            crop_size=self.crop_size,
            augment_policy=AugmentPolicy() if self.augment else None,
            dtype=self.dtype,
            device=self.device,
        )

    # -- estimator surface -------------------------------------------------

    def fit(self, X, y=None, masks_mani=None, masks_ai=None):
        """Train from scratch on images + labels, or on a manifest.

        X may be a (n, H, W, 3) uint8 array (y required, masks optional) or a
        `Manifest` / path to a manifest file (y ignored).
        """
        torch.manual_seed(self.seed)
        config = self._train_config()
        self.model_ = DetectorNet(self._encoder_config())
        if config.dtype == "float64":
            self.model_ = self.model_.double()
        self.classes_ = np.array([0, 1])

        if isinstance(X, (Manifest, str, Path)):
            manifest = X if isinstance(X, Manifest) else Manifest.load(X)
            self.history_ = trainer.fit(self.model_, manifest, config)
            return self

        X = check_images(X)
        y = check_labels(y, len(X))
        masks_mani = check_masks(masks_mani, X, "masks_mani")
        masks_ai = check_masks(masks_ai, X, "masks_ai")
        samples = _samples_from_arrays(X, y, masks_mani, masks_ai)

        optimizer = torch.optim.Adam(self.model_.parameters(), lr=config.learning_rate,
                                     betas=config.adam_betas)
        self.history_ = [
            trainer.train_epoch(self.model_, samples, config, optimizer, epoch)
            for epoch in range(config.max_epochs)
        ]
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this detector is not fitted; call fit first")

    def _predict_samples(self, X) -> list[Sample]:
        X = check_images(X)
        zeros = np.zeros(X.shape[:3], dtype=np.uint8)
        return _samples_from_arrays(X, np.zeros(len(X), dtype=int), zeros, zeros)

    def predict_proba(self, X) -> np.ndarray:
        """Column-stacked probabilities for (authentic, AI-generated)."""
        self._require_fitted()
        probs = trainer.predict_proba(self.model_, self._predict_samples(X),
                                      self._train_config())
        return np.column_stack([1.0 - probs, probs])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def predict_masks(self, X) -> dict[str, np.ndarray]:
        """Per-pixel probabilities from both heads, keyed 'ai' and 'mani'."""
        self._require_fitted()
        config = self._train_config()
        samples = self._predict_samples(X)
        self.model_.eval()
        ai_maps, mani_maps = [], []
        with torch.no_grad():
            for b in range(0, len(samples), config.batch_size):
                x, _, _, _ = trainer.to_batch(samples[b : b + config.batch_size],
                                              config.torch_dtype(), config.device)
                bundle = self.model_(x)
                ai_maps.append(torch.sigmoid(bundle.mask_ai_logits).cpu().numpy())
                mani_maps.append(torch.sigmoid(bundle.mask_mani_logits).cpu().numpy())
        return {"ai": np.concatenate(ai_maps), "mani": np.concatenate(mani_maps)}
