import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelprov.datapipe import Manifest, SampleRecord
from pixelprov.forge import SourceCategory
from pixelprov.model import DetectorNet, EncoderConfig
from pixelprov.trainer import (
    LossWeights,
    NumericsError,
    TrainConfig,
    early_stop_check,
    fit,
    seg_loss,
    to_batch,
    total_loss,
    train_epoch,
    train_step,
)
from synthsets import separable_set, write_corpus


def bce_reference(logits: np.ndarray, targets: np.ndarray) -> float:
    """Brute-force per-element binary cross-entropy mean."""
    total = 0.0
    for logit, target in zip(logits.ravel(), targets.ravel()):
        p = 1.0 / (1.0 + math.exp(-logit))
        total += -(target * math.log(p) + (1 - target) * math.log(1 - p))
    return total / logits.size


class TestSegLoss:
    def test_confident_correct_prediction_near_zero(self):
        logits = torch.full((8, 8), 30.0)
        target = torch.ones(8, 8)
        assert seg_loss(logits, target).item() < 1e-9

    def test_zero_logits_give_ln2(self):
        for target in (torch.zeros(4, 4), torch.ones(4, 4),
                       (torch.rand(4, 4) > 0.5).float()):
            loss = seg_loss(torch.zeros(4, 4), target).item()
            assert abs(loss - math.log(2)) < 1e-7

    def test_matches_brute_force_oracle(self, rng):
        logits = rng.normal(0, 3, (4, 4))
        target = (rng.random((4, 4)) > 0.5).astype(float)
        ours = seg_loss(torch.tensor(logits), torch.tensor(target)).item()
        assert abs(ours - bce_reference(logits, target)) < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            seg_loss(torch.zeros(4, 4), torch.zeros(4, 5))


class TestTotalLoss:
    def test_alpha_two_arithmetic(self):
        value = total_loss(0.5, 0.3, 0.2, LossWeights.from_alpha(2.0))
        assert abs(value - 1.8) < 1e-12

    def test_zero_components(self):
        assert total_loss(0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_default_weights(self):
        w = LossWeights()
        assert (w.w_cls, w.w_seg_ai, w.w_seg_ma) == (2.0, 2.0, 1.0)

    @pytest.mark.parametrize("row", [(2, 1, 1), (2, 3, 1), (2, 1, 2), (2, 2, 1)])
    def test_ablation_weight_rows_accepted(self, row):
        w = LossWeights(*map(float, row))
        assert total_loss(1.0, 1.0, 1.0, w) == sum(row)

    def test_unit_vectors_extract_coefficients(self):
        w = LossWeights(2.0, 3.0, 0.5)
        assert total_loss(1, 0, 0, w) == 2.0
        assert total_loss(0, 1, 0, w) == 3.0
        assert total_loss(0, 0, 1, w) == 0.5

    def test_permutation_invariant_under_equal_weights(self):
        w = LossWeights(1.5, 1.5, 1.5)
        assert total_loss(0.1, 0.2, 0.3, w) == total_loss(0.3, 0.1, 0.2, w)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
    @settings(max_examples=50, deadline=None)
    def test_linearity_property(self, a, b, c):
        w = LossWeights(2.0, 2.0, 1.0)
        assert total_loss(a, b, c, w) == 2.0 * a + 2.0 * b + 1.0 * c

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 2.0, 1.0)


def early_stop_replay(history, delta, patience):
    """Independent restatement: stop iff each of the last `patience` epochs
    failed to beat the running best of everything before it by > delta."""
    n = len(history)
    if n < patience + 1:
        return "continue"
    window = range(n - patience, n)
    for j in window:
        if history[j] > max(history[:j]) + delta:
            return "continue"
    return "stop"


class TestEarlyStop:
    def test_flat_history_stops_after_five(self):
        history = [0.80, 0.805, 0.807, 0.806, 0.808, 0.809]
        assert early_stop_check(history, 0.01, 5) == "stop"
        assert early_stop_check(history[:5], 0.01, 5) == "continue"

    def test_improving_history_continues(self):
        assert early_stop_check([0.5, 0.6, 0.7], 0.01, 5) == "continue"

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            early_stop_check([], 0.01, 5)

    def test_randomized_histories_match_replay(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            history = list(rng.uniform(0.4, 1.0, size=rng.integers(1, 15)))
            assert early_stop_check(history, 0.01, 5) == \
                early_stop_replay(history, 0.01, 5), history

    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=20),
           st.integers(1, 6))
    @settings(max_examples=100, deadline=None)
    def test_replay_property(self, history, patience):
        assert early_stop_check(history, 0.01, patience) == \
            early_stop_replay(history, 0.01, patience)


def tiny_config(**overrides):
    base = dict(batch_size=8, learning_rate=1e-4, epoch_fraction=1.0,
                crop_size=None, augment_policy=None, max_epochs=2, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainStep:
    def test_defaults_match_contract(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 16
        assert cfg.learning_rate == 1e-4
        assert cfg.epoch_fraction == 0.10
        assert cfg.early_stop_delta == 0.01
        assert cfg.early_stop_patience == 5

    def test_loss_decreases_on_fixed_batch(self):
        samples = separable_set(seed=0, n=8, size=64)
        torch.manual_seed(0)
        model = DetectorNet(EncoderConfig.toy())
        cfg = tiny_config()
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        losses = [train_step(model, opt, samples, cfg)["loss"] for _ in range(50)]
        assert losses[-1] < losses[0]

    def test_zero_learning_rate_keeps_parameters(self):
        samples = separable_set(seed=0, n=4, size=64)
        torch.manual_seed(0)
        model = DetectorNet(EncoderConfig.toy())
        cfg = tiny_config(learning_rate=1e-30)  # config forbids exactly 0
        opt = torch.optim.Adam(model.parameters(), lr=0.0)
        before = {n: p.clone() for n, p in model.named_parameters()}
        train_step(model, opt, samples, cfg)
        for n, p in model.named_parameters():
            assert torch.equal(before[n], p), n

    def test_nan_loss_aborts_with_diagnostics(self):
        samples = separable_set(seed=0, n=4, size=64)
        torch.manual_seed(0)
        model = DetectorNet(EncoderConfig.toy())
        with torch.no_grad():
            model.classifier.weight.fill_(float("nan"))
        cfg = tiny_config()
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        with pytest.raises(NumericsError) as exc:
            train_step(model, opt, samples, cfg, batch_index=3)
        assert exc.value.batch_index == 3
        assert "loss_cls" in exc.value.components

    def test_label_overrides_change_targets(self):
        samples = separable_set(seed=0, n=4, size=64)
        _, _, _, cls = to_batch(samples)
        overridden = {"inpaint_blended": 0}
        _, _, _, cls2 = to_batch(samples, label_overrides=overridden)
        assert cls.sum() > 0 and cls2.sum() == 0


class TestTrainEpoch:
    def test_visits_ceil_of_fraction(self, tmp_path):
        write_corpus(tmp_path, n=1, size=64, seed=0)
        records = [SampleRecord("src_000.png", None, None, 0, SourceCategory.REAL, "train")
                   for _ in range(50)]
        manifest = Manifest(records=records, root=tmp_path)
        torch.manual_seed(0)
        model = DetectorNet(EncoderConfig.tiny())
        cfg = tiny_config(epoch_fraction=0.1, batch_size=4)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        metrics = train_epoch(model, manifest, cfg, opt, epoch=0)
        assert metrics["n_samples"] == 5

    def test_reproducible_loss_trajectory_float64(self):
        def run():
            samples = separable_set(seed=3, n=16, size=64)
            torch.manual_seed(1)
            model = DetectorNet(EncoderConfig.tiny()).double()
            cfg = tiny_config(dtype="float64", batch_size=4, seed=5)
            opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
            losses = []
            for step in range(10):
                batch = samples[(step * 4) % 16 : (step * 4) % 16 + 4]
                losses.append(train_step(model, opt, batch, cfg)["loss"])
            return losses

        assert run() == run()


class TestFit:
    def test_fit_writes_metrics_and_checkpoints(self, tmp_path):
        samples_dir = tmp_path / "corpus"
        samples_dir.mkdir()
        write_corpus(samples_dir, n=4, size=64, seed=0)
        from pixelprov.forge import forge_dataset

        manifest = forge_dataset(samples_dir, tmp_path / "data",
                                 ops=("blend",), n=8, seed=0, include_real=True)
        torch.manual_seed(0)
        model = DetectorNet(EncoderConfig.tiny())
        cfg = tiny_config(max_epochs=2, val_fraction=0.25, batch_size=4)
        metrics = fit(model, manifest, cfg, tmp_path / "run")
        assert len(metrics) == 2
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert (tmp_path / "run" / "checkpoint_last.pt").exists()
        assert (tmp_path / "run" / "checkpoint_best.pt").exists()
        assert all("val_acc" in m for m in metrics)

    def test_early_stopping_halts_training(self, tmp_path):
        from PIL import Image

        samples = separable_set(seed=0, n=8, size=64)
        for i, s in enumerate(samples):
            Image.fromarray(s.image).save(tmp_path / f"{i}.png")
        records = [
            SampleRecord(f"{i}.png", None, None, 0, SourceCategory.REAL, "train")
            for i in range(len(samples))
        ]
        records[0] = SampleRecord("0.png", None, None, 0, SourceCategory.REAL, "val")
        manifest = Manifest(records=records, root=tmp_path)

        torch.manual_seed(0)
        model = DetectorNet(EncoderConfig.tiny())
        cfg = tiny_config(max_epochs=30, learning_rate=1e-12,
                          early_stop_patience=3, batch_size=4)
        metrics = fit(model, manifest, cfg)
        # lr ~ 0 keeps val accuracy flat, so training stops after 1 + patience
        assert len(metrics) == 1 + cfg.early_stop_patience
