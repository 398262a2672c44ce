"""Classification and distillation losses.

The combined objective is a weighted sum of a hard-label cross-entropy
and one temperature-scaled KL term per teacher,

    lambda0 * CE + sum_i lambda_i * tau_i^2 * KL(teacher_i || student),

where each KL compares softened distributions (logits divided by tau_i)
and is scaled by tau_i^2 so its gradient magnitude stays comparable
across temperatures.  Teacher logits are constants: no gradient ever
flows into a teacher.

Routing differs by mode:

* ``none``        cross-entropy only
* ``single``      one teacher advises the class-token logits
* ``naive_multi`` every teacher advises the class-token logits
* ``cross_bias``  the conv token listens to the conv teacher and the
                  inv token to the involution teacher, while the class
                  token keeps the hard labels

Terms with a zero weight are skipped entirely, not multiplied by zero,
so disabling a term reproduces the smaller objective bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, log_softmax_rows
from .models import TokenLogits

MODES = ("none", "single", "naive_multi", "cross_bias")


@dataclass
class DistillConfig:
    mode: str = "cross_bias"
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau1: float = 1.0
    tau2: float = 1.0

    def validate(self) -> "DistillConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown distillation mode '{self.mode}' (choose from {MODES})")
        for name in ("lambda0", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("tau1", "tau2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        return self

    def teachers_required(self) -> int:
        return {"none": 0, "single": 1, "naive_multi": 2, "cross_bias": 2}[self.mode]


def _teacher_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy; targets are int labels or soft target rows."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B,K) logits, got {logits.shape}")
    b, k = logits.shape
    ls = log_softmax_rows(logits)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != b:
            raise ShapeError(f"{targets.shape[0]} labels for {b} logit rows")
        if not np.issubdtype(targets.dtype, np.integer):
            raise ShapeError(f"1-d targets must be ints, got dtype {targets.dtype}")
        if targets.min() < 0 or targets.max() >= k:
            raise ShapeError(f"label out of range [0, {k}): {targets.min()}..{targets.max()}")
        picked = ls[np.arange(b), targets]
        return -picked.mean()
    if targets.shape != (b, k):
        raise ShapeError(f"soft targets must be {(b, k)}, got {targets.shape}")
    return -(Tensor(targets.astype(ls.dtype)) * ls).sum(axis=-1).mean()


def kd_kl(student_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """tau^2-scaled mean KL(teacher || student) over softened rows.

    The teacher side is treated as data; both log-softmaxes go through
    the same routine, so identical logits give an exact zero.
    """
    t = _teacher_array(teacher_logits)
    if t.shape != student_logits.shape:
        raise ShapeError(
            f"teacher logits {t.shape} do not match student {student_logits.shape}")
    t_ls = log_softmax_rows(Tensor(t), temperature).data
    p_t = np.exp(t_ls)
    s_ls = log_softmax_rows(student_logits, temperature)
    per_row = (Tensor(p_t) * (Tensor(t_ls) - s_ls)).sum(axis=-1)
    return per_row.mean() * (temperature * temperature)


def naive_multi_loss(class_logits: Tensor, targets, teacher_logits: list,
                     cfg: DistillConfig):
    """All teachers advise the same logits; returns (loss, parts)."""
    parts = {}
    total = None

    def extend(term, weight, key):
        nonlocal total
        parts[key] = float(term.item()) if isinstance(term, Tensor) else float(term)
        piece = term * weight if weight != 1.0 else term
        total = piece if total is None else total + piece

    if cfg.lambda0 != 0.0:
        extend(cross_entropy(class_logits, targets), cfg.lambda0, "ce")
    weights = (cfg.lambda1, cfg.lambda2)
    taus = (cfg.tau1, cfg.tau2)
    for i, t in enumerate(teacher_logits):
        if i >= 2 or weights[i] == 0.0:
            continue
        extend(kd_kl(class_logits, t, taus[i]), weights[i], f"kl_{i}")
    if total is None:
        raise ConfigError("all loss terms have zero weight")
    return total, parts


def civt_loss(outputs: TokenLogits, targets, teacher_logits: list,
              cfg: DistillConfig):
    """Mode-routed training objective; returns (scalar loss, float parts).

    ``teacher_logits`` order for two-teacher modes is (conv teacher,
    involution teacher).
    """
    cfg.validate()
    need = cfg.teachers_required()
    if len(teacher_logits) != need:
        raise ConfigError(
            f"mode '{cfg.mode}' needs {need} teacher logit sets, got {len(teacher_logits)}")

    if cfg.mode in ("none", "single", "naive_multi"):
        return naive_multi_loss(outputs.class_logits, targets, list(teacher_logits), cfg)

    if outputs.conv_logits is None or outputs.inv_logits is None:
        raise ConfigError("cross_bias mode needs a three-token student")
    parts = {}
    total = None

    def extend(term, weight, key):
        nonlocal total
        parts[key] = float(term.item())
        piece = term * weight if weight != 1.0 else term
        total = piece if total is None else total + piece

    if cfg.lambda0 != 0.0:
        extend(cross_entropy(outputs.class_logits, targets), cfg.lambda0, "ce")
    if cfg.lambda1 != 0.0:
        extend(kd_kl(outputs.conv_logits, teacher_logits[0], cfg.tau1), cfg.lambda1, "kl_conv")
    if cfg.lambda2 != 0.0:
        extend(kd_kl(outputs.inv_logits, teacher_logits[1], cfg.tau2), cfg.lambda2, "kl_inv")
    if total is None:
        raise ConfigError("all loss terms have zero weight")
    return total, parts


def kl_similarity(p_logits, q_logits, temperature: float = 1.0) -> float:
    """Mean KL(softmax(p) || softmax(q)) between two logit sets (no graph)."""
    p = _teacher_array(p_logits)
    q = _teacher_array(q_logits)
    if p.shape != q.shape:
        raise ShapeError(f"logit sets differ in shape: {p.shape} vs {q.shape}")
    p_ls = log_softmax_rows(Tensor(p), temperature).data
    q_ls = log_softmax_rows(Tensor(q), temperature).data
    per_row = (np.exp(p_ls) * (p_ls - q_ls)).sum(axis=-1)
    return float(per_row.mean())
