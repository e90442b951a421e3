"""White-box adversarial example generation on log-mel features.

Both attacks follow the sign of the input gradient of the primary
cross-entropy loss (never the multitask composite) against an eval-mode
model.  The iterative attack projects onto the L-infinity ball around the
original input after every step; neither mutates the model or its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .model import Model

DEFAULT_EPSILON = 0.08


@dataclass(frozen=True)
class AttackParams:
    kind: str = "fgsm"  # or "bim"
    epsilon: float = DEFAULT_EPSILON
    bim_steps: int = 10
    bim_step_size: float | None = None  # None = epsilon / bim_steps

    def __post_init__(self):
        if self.kind not in ("fgsm", "bim"):
            raise ValidationError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be non-negative")
        if self.bim_steps < 1:
            raise ValidationError("bim needs at least one step")
        if self.bim_step_size is not None and self.bim_step_size <= 0:
            raise ValidationError("bim step size must be positive")

    @property
    def step_size(self) -> float:
        return self.bim_step_size if self.bim_step_size is not None \
            else self.epsilon / self.bim_steps


def _loss_input_grad(model: Model, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the primary cross entropy w.r.t. the raw input features."""
    x_t, _, seq = model.encode(x, requires_input_grad=True)
    logits, _ = model.classify_emotion(seq)
    loss = ad.softmax_cross_entropy(logits, targets)
    ad.backward(loss)
    grad = x_t.grad.copy()
    model.zero_grads()
    return grad


def _one_hot_targets(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(n_classes, dtype=np.float32)[labels]


def _enforce_budget(x_adv: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Nudge values one ulp toward x0 wherever float rounding overshot the ball,
    so max |x_adv - x0| <= epsilon holds exactly as measured."""
    over = np.abs(x_adv.astype(np.float64) - x0.astype(np.float64)) > epsilon
    while np.any(over):
        x_adv = np.where(over, np.nextafter(x_adv, x0), x_adv)
        over = np.abs(x_adv.astype(np.float64) - x0.astype(np.float64)) > epsilon
    return x_adv


def _sign_step(model: Model, x0: np.ndarray, x_k: np.ndarray, targets: np.ndarray,
               step: float, epsilon: float) -> np.ndarray:
    grad = _loss_input_grad(model, x_k, targets)
    moved = x_k + np.float32(step) * np.sign(grad, dtype=grad.dtype)
    clipped = np.clip(moved, x0 - np.float32(epsilon), x0 + np.float32(epsilon))
    return _enforce_budget(clipped, x0, epsilon)


def fgsm(model: Model, x: np.ndarray, labels: np.ndarray, epsilon: float = DEFAULT_EPSILON
         ) -> np.ndarray:
    """Single sign-gradient step of size epsilon away from the true class."""
    if epsilon < 0:
        raise ValidationError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float32)
    targets = _one_hot_targets(labels, model.config.n_classes)
    return _sign_step(model, x, x, targets, epsilon, epsilon)


def bim(model: Model, x: np.ndarray, labels: np.ndarray, epsilon: float = DEFAULT_EPSILON,
        steps: int = 10, step_size: float | None = None) -> np.ndarray:
    """Iterated sign-gradient steps projected onto the epsilon ball around x."""
    if epsilon < 0:
        raise ValidationError("epsilon must be non-negative")
    if steps < 1:
        raise ValidationError("bim needs at least one step")
    if step_size is None:
        step_size = epsilon / steps
    x = np.asarray(x, dtype=np.float32)
    targets = _one_hot_targets(labels, model.config.n_classes)
    x_adv = x
    for _ in range(steps):
        x_adv = _sign_step(model, x, x_adv, targets, step_size, epsilon)
    return x_adv


def attack(model: Model, x: np.ndarray, labels: np.ndarray, params: AttackParams
           ) -> np.ndarray:
    if params.kind == "fgsm":
        return fgsm(model, x, labels, params.epsilon)
    return bim(model, x, labels, params.epsilon, params.bim_steps, params.step_size)
