import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelprov.datapipe import Manifest
from pixelprov.evalkit import (
    EvalReport,
    accuracy,
    accuracy_at_quality,
    emit_report,
    parse_delimited,
    per_source_report,
    report_to_delimited,
    report_to_text,
    robustness_sweep,
    seg_metrics,
)
from pixelprov.forge import forge_dataset
from pixelprov.model import DetectorNet, EncoderConfig
from pixelprov.trainer import TrainConfig
from synthsets import write_corpus


class TestAccuracy:
    def test_perfect_and_inverted(self):
        labels = [0, 1, 1, 0, 1]
        assert accuracy(labels, labels) == 1.0
        assert accuracy([1 - x for x in labels], labels) == 0.0

    def test_matches_counting_oracle(self, rng):
        preds = rng.integers(0, 2, 200)
        labels = rng.integers(0, 2, 200)
        count = sum(1 for p, l in zip(preds, labels) if p == l)
        assert accuracy(preds, labels) == count / 200

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            accuracy([0, 1], [0])

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)),
                    min_size=1, max_size=50))
    @settings(max_examples=50, deadline=None)
    def test_complement_property(self, pairs):
        preds = [p for p, _ in pairs]
        labels = [l for _, l in pairs]
        flipped = [1 - p for p in preds]
        assert accuracy(preds, labels) + accuracy(flipped, labels) == 1.0


class TestSegMetrics:
    def big(self, mask):  # logits that sigmoid to ~0/1
        return np.where(mask, 30.0, -30.0)

    def test_perfect_prediction(self, rng):
        target = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        f1, iou = seg_metrics(self.big(target), target)
        assert f1 == 1.0 and iou == 1.0

    def test_disjoint_equal_areas(self):
        target = np.zeros((8, 8), np.uint8)
        target[:2] = 1
        pred = np.zeros((8, 8), np.uint8)
        pred[6:] = 1
        f1, iou = seg_metrics(self.big(pred), target)
        assert f1 == 0.0 and iou == 0.0

    def test_both_empty_defined_as_one(self):
        zeros = np.zeros((4, 4), np.uint8)
        assert seg_metrics(self.big(zeros), zeros) == (1.0, 1.0)

    def test_matches_confusion_count_oracle(self, rng):
        logits = rng.normal(0, 4, (8, 8))
        target = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        f1, iou = seg_metrics(logits, target)
        tp = fp = fn = 0
        for y in range(8):
            for x in range(8):
                p = 1.0 / (1.0 + np.exp(-logits[y, x])) >= 0.5
                t = bool(target[y, x])
                tp += p and t
                fp += p and not t
                fn += (not p) and t
        assert f1 == 2 * tp / (2 * tp + fp + fn)
        assert iou == tp / (tp + fp + fn)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            seg_metrics(np.zeros((4, 4)), np.zeros((4, 5)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_f1_iou_identity(self, seed):
        r = np.random.default_rng(seed)
        logits = r.normal(0, 3, (6, 6))
        target = (r.random((6, 6)) > 0.4).astype(np.uint8)
        f1, iou = seg_metrics(logits, target)
        assert abs(f1 - 2 * iou / (1 + iou)) < 1e-12


@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory):
    """Tiny forged manifest plus an untrained toy model."""
    root = tmp_path_factory.mktemp("evalkit")
    corpus = root / "corpus"
    corpus.mkdir()
    write_corpus(corpus, n=4, size=64, seed=0)
    manifest = forge_dataset(corpus, root / "data", ops=("blend", "copymove"),
                             n=6, seed=0, include_real=True)
    torch.manual_seed(0)
    model = DetectorNet(EncoderConfig.tiny())
    config = TrainConfig(batch_size=4, crop_size=None)
    return model, manifest, config


class TestRobustnessSweep:
    def test_matches_per_image_replay(self, eval_setup):
        from pixelprov import datapipe, trainer
        from pixelprov.evalkit import degrade

        model, manifest, config = eval_setup
        qualities = [96, 70]
        curve = robustness_sweep(model, manifest, qualities, config)
        assert [q for q, _ in curve] == qualities
        for quality, acc in curve:
            correct = 0
            for record in manifest.records:
                sample = datapipe.load_sample(record, manifest.root)
                degraded = degrade(sample.image, quality)
                prob = trainer.predict_proba(
                    model,
                    [datapipe.Sample(degraded, sample.mask_mani, sample.mask_ai,
                                     sample.cls_label, sample.category)],
                    config,
                )[0]
                correct += int(prob >= 0.5) == record.cls_label
            assert acc == correct / len(manifest.records)

    def test_quality_96_equals_aligned_baseline(self, eval_setup):
        model, manifest, config = eval_setup
        curve = dict(robustness_sweep(model, manifest, [96], config))
        assert curve[96] == accuracy_at_quality(model, manifest, config, 96)

    def test_repeat_sweeps_identical(self, eval_setup):
        model, manifest, config = eval_setup
        a = robustness_sweep(model, manifest, [90, 60], config)
        b = robustness_sweep(model, manifest, [90, 60], config)
        assert a == b

    def test_bad_quality_rejected(self, eval_setup):
        model, manifest, config = eval_setup
        with pytest.raises(ValueError):
            robustness_sweep(model, manifest, [0], config)


class TestPerSourceReport:
    def test_group_by_matches_oracle(self, eval_setup):
        from pixelprov.evalkit import predict_labels

        model, manifest, config = eval_setup
        report = per_source_report(model, manifest, config, align_quality=96)

        preds = predict_labels(model, manifest, config, quality=96)
        labels = [r.cls_label for r in manifest.records]
        real_idx = [i for i, r in enumerate(manifest.records)
                    if r.category.value == "real"]
        for source in report.per_source_accuracy:
            idxs = [i for i, r in enumerate(manifest.records)
                    if r.category.value == source]
            paired = idxs + real_idx[: len(idxs)]
            expected = sum(preds[i] == labels[i] for i in paired) / len(paired)
            assert report.per_source_accuracy[source] == expected
            assert report.per_source_counts[source] == len(paired)

    def test_overall_is_weighted_mean(self, eval_setup):
        model, manifest, config = eval_setup
        report = per_source_report(model, manifest, config)
        weighted = sum(report.per_source_accuracy[s] * report.per_source_counts[s]
                       for s in report.per_source_accuracy)
        assert abs(report.overall_accuracy - weighted / sum(report.per_source_counts.values())) < 1e-12

    def test_ratios_in_unit_interval(self, eval_setup):
        model, manifest, config = eval_setup
        report = per_source_report(model, manifest, config)
        values = [report.overall_accuracy, report.seg_f1_ai, report.seg_f1_ma,
                  *report.per_source_accuracy.values()]
        assert all(0.0 <= v <= 1.0 for v in values)

    def test_single_source_equals_overall(self, eval_setup):
        model, manifest, config = eval_setup
        only = Manifest(records=[r for r in manifest.records
                                 if r.category.value == "inpaint_blended"],
                        root=manifest.root)
        report = per_source_report(model, only, config)
        assert list(report.per_source_accuracy) == ["inpaint_blended"]
        assert report.per_source_accuracy["inpaint_blended"] == report.overall_accuracy

    def test_real_only_manifest_reports_real_row(self, eval_setup):
        model, manifest, config = eval_setup
        only = Manifest(records=[r for r in manifest.records
                                 if r.category.value == "real"],
                        root=manifest.root)
        report = per_source_report(model, only, config)
        assert list(report.per_source_accuracy) == ["real"]


class TestReportEmission:
    def sample_report(self, with_curve=True):
        return EvalReport(
            per_source_accuracy={"copy_move": 0.5, "inpaint_blended": 0.75},
            per_source_counts={"copy_move": 4, "inpaint_blended": 8},
            overall_accuracy=2 / 3,
            seg_f1_ai=0.123456789,
            seg_f1_ma=0.9,
            robustness_curve=[(96, 0.75), (50, 0.5)] if with_curve else [],
        )

    def test_delimited_round_trip_lossless(self):
        report = self.sample_report()
        assert parse_delimited(report_to_delimited(report)) == report

    def test_round_trip_without_curve(self):
        report = self.sample_report(with_curve=False)
        assert parse_delimited(report_to_delimited(report)) == report

    def test_text_table_carries_reference_numbers(self):
        text = report_to_text(self.sample_report())
        assert "95.1" in text and "5.8%" in text and "5.4%" in text

    def test_empty_curve_noted_in_text_and_plot_omitted(self, tmp_path):
        report = self.sample_report(with_curve=False)
        written = emit_report(report, ["text-table", "plot"], tmp_path)
        assert written == [tmp_path / "report.txt"]
        assert "(none)" in (tmp_path / "report.txt").read_text()

    def test_plot_written_when_curve_present(self, tmp_path):
        report = self.sample_report()
        written = emit_report(report, ["plot"], tmp_path)
        assert written == [tmp_path / "robustness.png"]
        assert (tmp_path / "robustness.png").stat().st_size > 0

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unknown report format"):
            emit_report(self.sample_report(), ["csv"], tmp_path)
