"""scikit-learn style front end for training and inference."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import SegSample
from .degconv import DegConfig
from .metrics import miou
from .net import ModelConfig, build_model
from .training import TrainConfig, fit, predict_proba
from .transmixer import TransMixerConfig
from .validation import check_images, check_masks


class CrackSegmenter(BaseEstimator):
    """Pixelwise crack segmenter.

    ``fit(X, y)`` takes images ``[N, 3, H, W]`` in [0, 1] and binary masks
    ``[N, H, W]`` or ``[N, 1, H, W]``. ``predict`` returns ``{0, 1}`` masks
    ``[N, H, W]`` at ``threshold``; ``score`` is the two-class mIoU.

    Examples
    --------
    >>> seg = CrackSegmenter(epochs=1).fit(images, masks)   # doctest: +SKIP
    >>> seg.predict(images).shape                            # doctest: +SKIP
    (N, 64, 64)
    """

    def __init__(self, widths=(8, 16, 32, 64), state_dim: int = 4, gamma: float = 0.5,
                 heads: int = 1, local_pool: str = "max", n_bins: int = 180, cell=(8, 8),
                 use_degconv: bool = True, fusion: str = "srf", architecture: str = "mixercseg",
                 epochs: int = 50, lr: float = 5e-4, weight_decay: float = 0.01, batch: int = 1,
                 threshold: float = 0.5, random_state: int = 0) -> None:
        self.widths = widths
        self.state_dim = state_dim
        self.gamma = gamma
        self.heads = heads
        self.local_pool = local_pool
        self.n_bins = n_bins
        self.cell = cell
        self.use_degconv = use_degconv
        self.fusion = fusion
        self.architecture = architecture
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch = batch
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self, size) -> ModelConfig:
        return ModelConfig(
            widths=tuple(self.widths), state_dim=self.state_dim,
            transmixer=TransMixerConfig(gamma=self.gamma, heads=self.heads, local_pool=self.local_pool),
            deg=DegConfig(n_bins=self.n_bins, cell=tuple(self.cell)),
            input_size=tuple(size), use_degconv=self.use_degconv, fusion=self.fusion,
            architecture=self.architecture,
        ).validate()

    def fit(self, X, y, X_val=None, y_val=None) -> "CrackSegmenter":
        images = check_images(X)
        masks = check_masks(y, images)
        train = [SegSample(im, m, str(i)) for i, (im, m) in enumerate(zip(images, masks))]
        val = []
        if X_val is not None:
            vi = check_images(X_val)
            val = [SegSample(im, m, str(i)) for i, (im, m) in enumerate(zip(vi, check_masks(y_val, vi)))]
        self.config_ = self._model_config(images.shape[-2:])
        self.model_ = build_model(self.config_, seed=self.random_state)
        cfg = TrainConfig(epochs=self.epochs, batch=self.batch, lr=self.lr, weight_decay=self.weight_decay)
        result = fit(self.model_, train, val or train, cfg, seed=self.random_state)
        self.history_ = result.log
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, dtype=self.model_.dtype)
        return np.stack([predict_proba(self.model_, im) for im in images])

    def predict(self, X, threshold: Optional[float] = None) -> np.ndarray:
        t = self.threshold if threshold is None else threshold
        return (self.predict_proba(X) >= t).astype(np.uint8)

    def score(self, X, y) -> float:
        images = check_images(X)
        masks = check_masks(y, images)[:, 0]
        return miou(list(self.predict_proba(images)), list(masks), self.threshold)
