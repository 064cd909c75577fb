"""scikit-learn style facade over the training and inference functions.

``BridgeSegmenter.fit(X_mri, y_mri, target_images=X_ct)`` trains translation
and segmentation; ``predict``/``predict_proba``/``predict_uncertainty`` run
MC-dropout segmentation on CT-like images and ``transform`` translates
MRI-like images into synthetic CT. Arrays are ``(n, H, W)`` stacks in [-1, 1].
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bridge import translate_tensor
from .exceptions import ArgumentError
from .metrics import dice
from .phantom import CT_WINDOW, normalize
from .segment import mc_predict
from .training import TrainConfig, fit_e2e, fit_two_stage
from .validation import as_tensor, check_image_stack, check_mask


class BridgeSegmenter(BaseEstimator):
    """Unpaired MRI -> CT translation plus CT segmentation without CT labels.

    Parameters mirror :class:`TrainConfig`; ``mc_passes``, ``threshold`` and
    ``dropout_rate`` control inference.
    """

    def __init__(self, mode="E2E", epochs=15, lr=2e-4, seed=0, seg_arch="R2AUNET",
                 fg_weight=30.0, recurrence_steps=2, n_steps=5, tau=0.01,
                 lambda_sb=1.0, lambda_reg=1.0, dropout_rate=0.5, mc_passes=10,
                 threshold=0.5, seg_augment=True):
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.seg_arch = seg_arch
        self.fg_weight = fg_weight
        self.recurrence_steps = recurrence_steps
        self.n_steps = n_steps
        self.tau = tau
        self.lambda_sb = lambda_sb
        self.lambda_reg = lambda_reg
        self.dropout_rate = dropout_rate
        self.mc_passes = mc_passes
        self.threshold = threshold
        self.seg_augment = seg_augment

    def _config(self):
        return TrainConfig(
            mode=self.mode, epochs=self.epochs, lr=self.lr, seed=self.seed,
            seg_arch=self.seg_arch, fg_weight=self.fg_weight,
            recurrence_steps=self.recurrence_steps,
            schedule={"N": self.n_steps, "tau": self.tau},
            weights={"lambda_sb": self.lambda_sb, "lambda_reg": self.lambda_reg},
            dropout_rate=self.dropout_rate, seg_augment=self.seg_augment)

    def fit(self, X, y, target_images=None):
        """Train on labeled MRI stack ``X``/``y`` and unlabeled CT stack ``target_images``."""
        if target_images is None:
            raise ArgumentError("target_images (unlabeled CT stack) is required")
        config = self._config()
        divisor = 2 ** config.seg_depth
        X = check_image_stack(X, "X", divisor)
        T = check_image_stack(target_images, "target_images", divisor)
        y = np.stack([check_mask(m, "y") for m in np.asarray(y)])
        if y.shape != X.shape:
            raise ArgumentError(f"y shape {y.shape} does not match X shape {X.shape}")
        if T.shape[1:] != X.shape[1:]:
            raise ArgumentError(f"target image size {T.shape[1:]} differs from {X.shape[1:]}")
        fit = fit_e2e if config.mode == "E2E" else fit_two_stage
        self.models_, self.record_ = fit(X, y.astype(np.float32), T, config)
        self.config_ = config
        self.image_shape_ = X.shape[1:]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "models_")
        X = check_image_stack(X, "X")
        if X.shape[1:] != self.image_shape_:
            raise ArgumentError(f"expected images of size {self.image_shape_}, got {X.shape[1:]}")
        return X

    def _bundles(self, X):
        return [mc_predict(x, self.models_.segmenter, passes=self.mc_passes,
                           dropout_rate=self.dropout_rate, threshold=self.threshold,
                           seed=self.seed + i) for i, x in enumerate(self._check_X(X))]

    def predict_proba(self, X):
        return np.stack([b.mean_prob for b in self._bundles(X)])

    def predict(self, X):
        return np.stack([b.mask for b in self._bundles(X)])

    def predict_uncertainty(self, X):
        return np.stack([b.variance for b in self._bundles(X)])

    def transform(self, X):
        """Synthetic CT for an MRI stack."""
        X = self._check_X(X)
        schedule = self.config_.make_schedule()
        return np.stack([
            translate_tensor(as_tensor(x), self.models_.generator, schedule,
                             seed=self.seed + i).numpy()[0, 0]
            for i, x in enumerate(X)])

    def score(self, X, y):
        """Mean slice DSC of the thresholded prediction."""
        pred = self.predict(X)
        return float(np.mean([dice(p, m) for p, m in zip(pred, np.asarray(y))]))


class WindowNormalizer(TransformerMixin, BaseEstimator):
    """Clamp raw intensities to ``[lo, hi]`` and map affinely to [-1, 1]."""

    def __init__(self, lo=CT_WINDOW[0], hi=CT_WINDOW[1]):
        self.lo = lo
        self.hi = hi

    def fit(self, X=None, y=None):
        if not self.lo < self.hi:
            raise ArgumentError(f"window lower bound {self.lo} must be below {self.hi}")
        self.window_ = (float(self.lo), float(self.hi))
        return self

    def transform(self, X):
        check_is_fitted(self, "window_")
        X = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(X)):
            raise ArgumentError("X contains non-finite values")
        lo, hi = self.window_
        return normalize(np.clip(X, lo, hi), lo, hi)

    def inverse_transform(self, X):
        check_is_fitted(self, "window_")
        lo, hi = self.window_
        return (np.asarray(X, dtype=np.float64) + 1.0) * (hi - lo) / 2.0 + lo
