"""scikit-learn style wrappers around the training loop.

TeacherClassifier fits a cnn or inn network; CivtClassifier fits a
transformer/mixer student, optionally advised by fitted teachers.  Both
follow the estimator contract: constructor stores hyper-parameters
verbatim, ``fit`` learns ``classes_`` from y (labels may be arbitrary
ints), and ``predict``/``predict_proba`` map back to the original
labels.  X is a stack of images, either (n, C, H, W) or flattened
(n, C*H*W).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .data import Dataset, batches, normalize
from .tensor import Tensor, no_grad, softmax_rows
from .train import _forward_tokens, train_run


def as_image_batch(X, channels: int, image_size: int) -> np.ndarray:
    """Validate X into a float32 (n, C, H, W) stack."""
    X = check_array(X, allow_nd=True, dtype=np.float32)
    want = (channels, image_size, image_size)
    flat = channels * image_size * image_size
    if X.ndim == 2:
        if X.shape[1] != flat:
            raise ValueError(
                f"flattened X has {X.shape[1]} features, expected {flat} "
                f"for {want} images")
        return X.reshape(-1, *want)
    if X.ndim == 4:
        if X.shape[1:] != want:
            raise ValueError(f"X has image shape {X.shape[1:]}, expected {want}")
        return X
    raise ValueError(f"X must be 2-d or 4-d, got ndim={X.ndim}")


class _ImageClassifier(BaseEstimator, ClassifierMixin):
    """Shared fit/predict plumbing; subclasses provide the run config."""

    def _run_config(self, n_classes: int) -> RunConfig:
        raise NotImplementedError

    def _teacher_models(self) -> list:
        return []

    def fit(self, X, y):
        X = as_image_batch(X, self.channels, self.image_size)
        y = np.asarray(y)
        check_classification_targets(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes to fit")
        cfg = self._run_config(int(self.classes_.size))
        result = train_run(cfg, teachers=self._teacher_models(),
                           data=(Dataset(X, y_idx.astype(np.int64)), None))
        self.model_ = result.model
        self.history_ = result.history
        self.norm_mean_ = result.norm_mean
        self.norm_std_ = result.norm_std
        self.n_features_in_ = X[0].size
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = as_image_batch(X, self.channels, self.image_size)
        out = []
        for idx in batches(X.shape[0], 256, 0, 0, shuffle=False):
            x = Tensor(normalize(X[idx], self.norm_mean_, self.norm_std_))
            with no_grad():
                out.append(_forward_tokens(self.model_, x).class_logits.data)
        return np.concatenate(out)

    def predict(self, X):
        logits = self._logits(X)  # fitted-state check happens here
        return self.classes_[np.argmax(logits, axis=-1)]

    def predict_proba(self, X):
        return softmax_rows(Tensor(self._logits(X))).data


class TeacherClassifier(_ImageClassifier):
    """Residual conv ('cnn') or involution ('inn') image classifier."""

    def __init__(self, family: str = "cnn", image_size: int = 32,
                 channels: int = 3, stage_widths: tuple = (16, 32, 64, 128),
                 blocks_per_stage: int = 1, gn_groups: int = 8,
                 inv_kernel: int = 7, inv_groups: int = 2, inv_reduction: int = 4,
                 epochs: int = 8, batch_size: int = 128, lr: float = 1e-3,
                 min_lr: float = 1e-5, warmup_epochs: float = 2.0,
                 weight_decay: float = 0.05, augment: str = "crop",
                 mixup_alpha: float = 0.0, random_state: int = 0):
        self.family = family
        self.image_size = image_size
        self.channels = channels
        self.stage_widths = stage_widths
        self.blocks_per_stage = blocks_per_stage
        self.gn_groups = gn_groups
        self.inv_kernel = inv_kernel
        self.inv_groups = inv_groups
        self.inv_reduction = inv_reduction
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.min_lr = min_lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.augment = augment
        self.mixup_alpha = mixup_alpha
        self.random_state = random_state

    def _run_config(self, n_classes: int) -> RunConfig:
        if self.family not in ("cnn", "inn"):
            raise ValueError(f"TeacherClassifier family must be cnn or inn, got {self.family}")
        return RunConfig(
            family=self.family, image_size=self.image_size, channels=self.channels,
            classes=n_classes, stage_widths=tuple(self.stage_widths),
            blocks_per_stage=self.blocks_per_stage, gn_groups=self.gn_groups,
            inv_kernel=self.inv_kernel, inv_groups=self.inv_groups,
            inv_reduction=self.inv_reduction, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, min_lr=self.min_lr,
            warmup_epochs=self.warmup_epochs, weight_decay=self.weight_decay,
            augment=self.augment, mixup_alpha=self.mixup_alpha, mode="none",
            seed=self.random_state,
        )


class CivtClassifier(_ImageClassifier):
    """Transformer (one or three tokens) or mixer student.

    ``teachers`` is a sequence of fitted TeacherClassifier instances (or
    bare models with a ``.spec``); how many are needed depends on
    ``mode``.
    """

    def __init__(self, family: str = "civt", image_size: int = 32,
                 channels: int = 3, width: int = 64, depth: int = 4,
                 heads: int = 2, patch: int = 4, mixer_token_hidden: int = 0,
                 mode: str = "cross_bias", teachers: tuple = (),
                 lambda0: float = 1.0, lambda1: float = 1.0, lambda2: float = 1.0,
                 tau1: float = 1.0, tau2: float = 1.0,
                 epochs: int = 8, batch_size: int = 128, lr: float = 1e-3,
                 min_lr: float = 1e-5, warmup_epochs: float = 2.0,
                 weight_decay: float = 0.05, augment: str = "crop",
                 mixup_alpha: float = 0.0, random_state: int = 0):
        self.family = family
        self.image_size = image_size
        self.channels = channels
        self.width = width
        self.depth = depth
        self.heads = heads
        self.patch = patch
        self.mixer_token_hidden = mixer_token_hidden
        self.mode = mode
        self.teachers = teachers
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.tau1 = tau1
        self.tau2 = tau2
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.min_lr = min_lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.augment = augment
        self.mixup_alpha = mixup_alpha
        self.random_state = random_state

    def _teacher_models(self) -> list:
        models = []
        for t in self.teachers:
            if hasattr(t, "model_"):
                models.append(t.model_)
            elif hasattr(t, "spec"):
                models.append(t)
            else:
                raise ValueError(
                    "teachers must be fitted TeacherClassifier instances or models")
        return models

    def _run_config(self, n_classes: int) -> RunConfig:
        if self.family not in ("civt", "transformer", "mixer"):
            raise ValueError(
                f"CivtClassifier family must be civt, transformer or mixer, "
                f"got {self.family}")
        return RunConfig(
            family=self.family, image_size=self.image_size, channels=self.channels,
            classes=n_classes, width=self.width, depth=self.depth, heads=self.heads,
            patch=self.patch, mixer_token_hidden=self.mixer_token_hidden,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            min_lr=self.min_lr, warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay, augment=self.augment,
            mixup_alpha=self.mixup_alpha, mode=self.mode, lambda0=self.lambda0,
            lambda1=self.lambda1, lambda2=self.lambda2, tau1=self.tau1,
            tau2=self.tau2, seed=self.random_state,
        )
