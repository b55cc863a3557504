"""scikit-learn style wrappers around the three trainers.

>>> est = Pix2PixTranslator(epochs=5, image_size=64, in_channels=1, base_channels=16)
>>> est.fit(t1_images, t2_images).predict(t1_test)          # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionError, ValidationError
from .metrics import SSIMParams, denormalize, metric_ssim
from .training import TrainConfig, train_cyclegan, train_pix2pix, train_vae


def check_images(X, name: str = "X", image_size: int = None, in_channels: int = None) -> np.ndarray:
    """Validate a stack of normalized images and return it as (N, C, S, S) float32.

    A 3-D input (N, S, S) gains a singleton channel axis. Values must be
    finite and lie in [-1, 1].
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise DimensionError(f"{name} must be (N, C, S, S) or (N, S, S), got shape {X.shape}")
    if len(X) == 0:
        raise ValidationError(f"{name} is empty")
    if X.shape[2] != X.shape[3]:
        raise DimensionError(f"{name} images must be square, got {X.shape[2:]}")
    if image_size is not None and X.shape[2] != image_size:
        raise DimensionError(f"{name} images are {X.shape[2]} px, estimator expects {image_size}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise DimensionError(f"{name} has {X.shape[1]} channels, estimator expects {in_channels}")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains non-finite values")
    if X.min() < -1.0 or X.max() > 1.0:
        raise ValidationError(f"{name} must be normalized to [-1, 1]")
    return X


class _Translator(TransformerMixin, BaseEstimator):
    _kind = ""

    def __init__(
        self,
        epochs=30,
        batch_size=16,
        lr=2e-4,
        beta1=0.5,
        beta2=0.999,
        lambda_l1=100.0,
        lambda_cyc=10.0,
        lambda_id=5.0,
        kl_weight=1.0,
        image_size=64,
        in_channels=1,
        base_channels=16,
        latent_dim=128,
        seed=0,
        deterministic=True,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.lambda_l1 = lambda_l1
        self.lambda_cyc = lambda_cyc
        self.lambda_id = lambda_id
        self.kl_weight = kl_weight
        self.image_size = image_size
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.latent_dim = latent_dim
        self.seed = seed
        self.deterministic = deterministic

    def train_config(self) -> TrainConfig:
        return TrainConfig(kind=self._kind, **self.get_params()).validate()

    def _inputs(self, X, name="X"):
        return check_images(X, name, self.image_size, self.in_channels)

    def _fit(self, X, y):
        raise NotImplementedError

    def fit(self, X, y):
        """Train from scratch on source images ``X`` and target images ``y``."""
        self.bundle_, self.history_ = self._fit(self._inputs(X), self._inputs(y, "y"))
        return self

    def predict(self, X) -> np.ndarray:
        """Synthesize target images in [-1, 1] (eval-mode, deterministic)."""
        check_is_fitted(self, "bundle_")
        return self.bundle_.translate(self._inputs(X))

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y, sample_weight=None) -> float:
        """Mean SSIM between predictions and ``y`` after denormalization."""
        pred = self.predict(X)
        y = self._inputs(y, "y")
        if len(y) != len(pred):
            raise DimensionError(f"score: {len(pred)} predictions vs {len(y)} targets")
        scores = np.array([metric_ssim(denormalize(p), denormalize(t), SSIMParams()) for p, t in zip(pred, y)])
        return float(np.average(scores, weights=sample_weight))


class Pix2PixTranslator(_Translator):
    """Conditional GAN with a U-Net generator and PatchGAN discriminator."""

    _kind = "pix2pix"

    def _fit(self, X, y):
        if len(X) != len(y):
            raise DimensionError(f"paired training needs equal counts, got {len(X)} and {len(y)}")
        return train_pix2pix((X, y), self.train_config())


class CycleGANTranslator(_Translator):
    """Two generators trained on unpaired pools; ``y`` may differ in length from ``X``."""

    _kind = "cyclegan"

    def _fit(self, X, y):
        return train_cyclegan(X, y, self.train_config())


class VAETranslator(_Translator):
    """Encoder-decoder trained with reconstruction plus KL regularization."""

    _kind = "vae"

    def _fit(self, X, y):
        if len(X) != len(y):
            raise DimensionError(f"paired training needs equal counts, got {len(X)} and {len(y)}")
        return train_vae((X, y), self.train_config())
