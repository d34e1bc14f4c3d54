"""scikit-learn compatible wrapper around training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .data import AugmentConfig, ImageRecord, NoiseConfig, preprocess, split_dataset
from .engine import TrainConfig, train
from .model import ModelConfig
from .objectives import psnr_standard
from .validation import check_images, check_pair


class ResUNetDenoiser(TransformerMixin, BaseEstimator):
    """Residual U-Net denoiser trained on clean images.

    ``fit`` receives clean images in [0, 1] and synthesises its own noisy
    inputs (Gaussian, one sigma per image drawn from
    ``[sigma_min, sigma_max]``). ``transform`` / ``predict`` map noisy
    images to denoised ones. Images whose size differs from
    ``(height, width)`` are zero-padded or resized first.

    Parameters
    ----------
    epochs, learning_rate, alpha, batch_size : training schedule; ``alpha``
        weights the perceptual term of the loss.
    depth, channels, height, width : network geometry.
    sigma_min, sigma_max : noise-level range used during training.
    augment : apply random rotation/translation to training images.
    validation_fraction : share of ``X`` held out for best-epoch selection.
    random_state : seeds initialisation, splitting, noise and augmentation.
    """

    def __init__(self, epochs=300, learning_rate=1e-4, alpha=0.8, batch_size=8, depth=3,
                 channels=(32, 64, 128), height=200, width=400, sigma_min=0.02, sigma_max=0.5,
                 augment=True, validation_fraction=0.15, keep_best_on_val=True, random_state=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.batch_size = batch_size
        self.depth = depth
        self.channels = channels
        self.height = height
        self.width = width
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.keep_best_on_val = keep_best_on_val
        self.random_state = random_state

    def _train_config(self):
        seed = int(self.random_state or 0)
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            alpha=self.alpha,
            batch_size=self.batch_size,
            seed=seed,
            keep_best_on_val=self.keep_best_on_val,
            model=ModelConfig(self.height, self.width, self.depth, tuple(self.channels), seed=seed),
            noise=NoiseConfig(self.sigma_min, self.sigma_max, seed=seed),
            augment=AugmentConfig(seed=seed) if self.augment else None,
        )

    def _to_model_dims(self, X):
        dims = (self.height, self.width)
        if X.shape[1:3] == dims:
            return X
        return np.concatenate([preprocess(ImageRecord("x", img[..., 0]), dims).pixels for img in X], axis=0)

    def fit(self, X, y=None):
        """Train on clean images ``X``; ``y`` is ignored."""
        X = check_images(X)
        cfg = self._train_config()
        X = self._to_model_dims(X)
        records = [ImageRecord(f"img-{i:06d}", X[i:i + 1]) for i in range(len(X))]
        vf = float(self.validation_fraction)
        split = split_dataset(records, (1.0 - vf, vf, 0.0), rng=cfg.seed)
        if not split.val:
            raise ValueError(f"validation_fraction={vf} leaves no validation images out of {len(X)}")
        self.checkpoint_, self.history_ = train(split, records, cfg)
        self.model_ = self.checkpoint_.to_model()
        self.n_images_seen_ = len(X)
        return self

    def transform(self, X):
        """Denoise ``X``; returns an array with the same rank as the input."""
        check_is_fitted(self, "model_")
        squeeze = np.asarray(X).ndim == 3
        X = self._to_model_dims(check_images(X))
        out = np.concatenate([self.model_.predict(X[i:i + self.batch_size])
                              for i in range(0, len(X), self.batch_size)], axis=0)
        return out[..., 0] if squeeze else out

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean peak PSNR (dB) of ``transform(X)`` against clean ``y``."""
        X, y = check_pair(X, y)
        y = self._to_model_dims(y)
        pred = self.transform(X)
        return float(np.mean([psnr_standard(t, p) for t, p in zip(y, pred)]))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint):
        cfg = ckpt.model_config
        est = cls(depth=cfg.depth, channels=cfg.channels, height=cfg.input_height, width=cfg.input_width)
        est.checkpoint_ = ckpt
        est.model_ = ckpt.to_model()
        return est
