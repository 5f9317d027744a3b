import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pixelprov.estimator import AIImageDetector, check_images, check_labels, check_masks
from pixelprov.forge import forge_dataset
from synthsets import separable_set, write_corpus


def arrays_from_set(samples):
    X = np.stack([s.image for s in samples])
    y = np.array([s.cls_label for s in samples])
    mani = np.stack([s.mask_mani for s in samples])
    ai = np.stack([s.mask_ai for s in samples])
    return X, y, mani, ai


@pytest.fixture(scope="module")
def fitted():
    X, y, mani, ai = arrays_from_set(separable_set(seed=0, n=16, size=64))
    det = AIImageDetector(max_epochs=3, batch_size=8, seed=0)
    det.fit(X, y, masks_mani=mani, masks_ai=ai)
    return det, X, y


class TestValidationHelpers:
    def test_check_images_accepts_valid(self, rng):
        X = rng.integers(0, 256, (2, 64, 64, 3), dtype=np.uint8)
        assert check_images(X).shape == (2, 64, 64, 3)

    @pytest.mark.parametrize("bad,match", [
        (np.zeros((2, 64, 64), np.uint8), "shape"),
        (np.zeros((2, 64, 64, 3), np.float32), "uint8"),
        (np.zeros((0, 64, 64, 3), np.uint8), "empty"),
        (np.zeros((2, 60, 64, 3), np.uint8), "divisible"),
    ])
    def test_check_images_rejects(self, bad, match):
        with pytest.raises(ValueError, match=match):
            check_images(bad)

    def test_check_labels(self):
        assert check_labels([0, 1, 1], 3).tolist() == [0, 1, 1]
        with pytest.raises(ValueError):
            check_labels(None, 3)
        with pytest.raises(ValueError):
            check_labels([0, 2, 1], 3)
        with pytest.raises(ValueError):
            check_labels([0, 1], 3)

    def test_check_masks_default_zeros(self, rng):
        X = rng.integers(0, 256, (2, 32, 32, 3), dtype=np.uint8)
        masks = check_masks(None, X, "masks_mani")
        assert masks.shape == (2, 32, 32) and not masks.any()
        with pytest.raises(ValueError, match="masks_ai"):
            check_masks(np.zeros((2, 16, 16)), X, "masks_ai")


class TestSklearnContract:
    def test_get_set_params_round_trip(self):
        det = AIImageDetector(learning_rate=3e-4, decoder_channels=32)
        params = det.get_params()
        assert params["learning_rate"] == 3e-4
        det.set_params(batch_size=4)
        assert det.batch_size == 4

    def test_clone_preserves_params(self):
        det = AIImageDetector(attention_mode="dual", seed=7)
        twin = clone(det)
        assert twin.get_params() == det.get_params()

    def test_fit_does_not_mutate_init_params(self, fitted):
        det, _, _ = fitted
        assert det.max_epochs == 3 and det.seed == 0

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            AIImageDetector().predict(np.zeros((1, 64, 64, 3), np.uint8))


class TestFitPredict:
    def test_predict_shapes_and_range(self, fitted):
        det, X, y = fitted
        proba = det.predict_proba(X)
        assert proba.shape == (len(X), 2)
        assert np.allclose(proba.sum(axis=1), 1.0)
        preds = det.predict(X)
        assert set(np.unique(preds)) <= {0, 1}
        assert det.score(X, y) >= 0.5

    def test_predict_masks(self, fitted):
        det, X, _ = fitted
        maps = det.predict_masks(X[:2])
        assert set(maps) == {"ai", "mani"}
        assert maps["ai"].shape == (2, 64, 64)
        assert (maps["ai"] >= 0).all() and (maps["ai"] <= 1).all()

    def test_history_recorded(self, fitted):
        det, _, _ = fitted
        assert len(det.history_) == 3
        assert "loss" in det.history_[0]

    def test_fit_from_manifest_path(self, tmp_path):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        write_corpus(corpus, n=3, size=64, seed=1)
        forge_dataset(corpus, tmp_path / "data", ops=("blend",), n=4, seed=0,
                      include_real=True)
        det = AIImageDetector(max_epochs=1, batch_size=4, crop_size=None)
        det.fit(str(tmp_path / "data" / "manifest.tsv"))
        assert hasattr(det, "model_")
        X = np.zeros((1, 64, 64, 3), np.uint8)
        assert det.predict(X).shape == (1,)

    def test_seed_reproducibility(self):
        X, y, mani, ai = arrays_from_set(separable_set(seed=2, n=8, size=64))
        a = AIImageDetector(max_epochs=1, batch_size=4, seed=3).fit(X, y, mani, ai)
        b = AIImageDetector(max_epochs=1, batch_size=4, seed=3).fit(X, y, mani, ai)
        assert np.array_equal(a.predict_proba(X), b.predict_proba(X))
