"""Loss functions. Each returns ``(value, d value / d logits)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model_dsl import ShapeMismatch


@dataclass(frozen=True)
class LossKind:
    kind: str = "cross_entropy"
    temperature: float = 1.0

    KINDS = ("cross_entropy", "logit_l1", "kl_distill", "mse")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def parse(cls, value: str | dict | LossKind) -> LossKind:
        if isinstance(value, LossKind):
            return value
        if isinstance(value, str):
            return cls(value)
        return cls(value["kind"], float(value.get("temperature", 1.0)))


CROSS_ENTROPY = LossKind("cross_entropy")
LOGIT_L1 = LossKind("logit_l1")
MSE = LossKind("mse")


def kl_distill(temperature: float = 1.0) -> LossKind:
    return LossKind("kl_distill", temperature)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    n = logits.shape[0]
    logp = log_softmax(logits)
    if targets.ndim == 1:
        value = -logp[np.arange(n), targets].mean()
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
    else:
        value = -(targets * logp).sum(axis=1).mean()
        grad = np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets
    return float(value), grad / n


def logit_l1(logits: np.ndarray, targets: np.ndarray):
    diff = logits - targets
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def mse(logits: np.ndarray, targets: np.ndarray):
    if targets.ndim == 1:
        targets = targets.reshape(logits.shape)
    diff = logits - targets
    return float((diff**2).mean()), 2.0 * diff / diff.size


def distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float = 1.0) -> float:
    """Temperature-scaled KL(teacher || student), batch mean, times T^2."""
    return _kl(student_logits, teacher_logits, temperature)[0]


def _kl(student: np.ndarray, teacher: np.ndarray, t: float):
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"student {student.shape} and teacher {teacher.shape} logits differ in shape")
    if not t > 0:
        raise ValueError("temperature must be positive")
    n = student.shape[0]
    logq = log_softmax(student / t)
    logp = log_softmax(teacher / t)
    p = np.exp(logp)
    per_row = np.where(p > 0, p * (logp - logq), 0.0).sum(axis=1)
    value = float(per_row.mean()) * t * t
    grad = t * (np.exp(logq) - p) / n
    return value, grad


def compute_loss(loss: LossKind, logits: np.ndarray, targets: np.ndarray):
    if loss.kind == "cross_entropy":
        return cross_entropy(logits, targets)
    if targets.shape != logits.shape and not (loss.kind == "mse" and targets.size == logits.size):
        raise ShapeMismatch(f"{loss.kind} needs targets shaped like logits {logits.shape}, got {targets.shape}")
    if loss.kind == "logit_l1":
        return logit_l1(logits, targets)
    if loss.kind == "mse":
        return mse(logits, targets)
    return _kl(logits, targets, loss.temperature)
