"""scikit-learn contract of the translator estimators."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from xmsynth.errors import DimensionError, ValidationError
from xmsynth.estimators import CycleGANTranslator, Pix2PixTranslator, VAETranslator, check_images

FAST = dict(epochs=1, base_channels=4, latent_dim=8)
ESTIMATORS = [Pix2PixTranslator, CycleGANTranslator, VAETranslator]


class TestCheckImages:
    def test_adds_channel_axis(self):
        assert check_images(np.zeros((2, 16, 16))).shape == (2, 1, 16, 16)

    @pytest.mark.parametrize(
        "x,err",
        [
            (np.zeros((16, 16)), DimensionError),
            (np.zeros((0, 1, 16, 16)), ValidationError),
            (np.zeros((1, 1, 16, 8)), DimensionError),
            (np.full((1, 1, 16, 16), 1.5), ValidationError),
            (np.full((1, 1, 16, 16), np.nan), ValidationError),
        ],
    )
    def test_rejects(self, x, err):
        with pytest.raises(err):
            check_images(x)

    def test_size_and_channel_expectations(self):
        with pytest.raises(DimensionError):
            check_images(np.zeros((1, 1, 16, 16)), image_size=64)
        with pytest.raises(DimensionError):
            check_images(np.zeros((1, 3, 16, 16)), in_channels=1)


@pytest.mark.parametrize("cls", ESTIMATORS)
class TestContract:
    def test_params_round_trip(self, cls):
        est = cls(lr=1e-3, seed=4)
        params = est.get_params()
        assert params["lr"] == 1e-3 and params["seed"] == 4
        assert clone(est).get_params() == params

    def test_train_config_carries_kind(self, cls):
        cfg = cls(**FAST).train_config()
        assert cfg.kind == cls._kind and cfg.epochs == 1

    def test_invalid_hyperparameter_rejected_at_fit(self, cls, small_pairs):
        with pytest.raises(ValidationError):
            cls(epochs=0).fit(*small_pairs)

    def test_predict_before_fit(self, cls, small_pairs):
        with pytest.raises(NotFittedError):
            cls().predict(small_pairs[0])

    def test_fit_predict_score(self, cls, small_pairs):
        x, y = small_pairs
        est = cls(**FAST).fit(x, y)
        pred = est.predict(x[:4])
        assert pred.shape == (4, 1, 64, 64) and np.all(np.abs(pred) <= 1)
        np.testing.assert_array_equal(est.transform(x[:4]), pred)
        assert -1.0 <= est.score(x[:4], y[:4]) <= 1.0
        assert len(est.history_) == 2


class TestPairing:
    @pytest.mark.parametrize("cls", [Pix2PixTranslator, VAETranslator])
    def test_paired_models_need_equal_counts(self, cls, small_pairs):
        with pytest.raises(DimensionError):
            cls(**FAST).fit(small_pairs[0], small_pairs[1][:10])

    def test_cyclegan_accepts_unequal_pools(self, small_pairs):
        est = CycleGANTranslator(**FAST).fit(small_pairs[0], small_pairs[1][:10])
        assert est.predict(small_pairs[0][:2]).shape == (2, 1, 64, 64)

    def test_same_seed_same_predictions(self, small_pairs):
        x, y = small_pairs
        a = Pix2PixTranslator(**FAST, seed=3).fit(x, y).predict(x[:2])
        b = Pix2PixTranslator(**FAST, seed=3).fit(x, y).predict(x[:2])
        np.testing.assert_array_equal(a, b)
