"""FGSM / PGD example generation and the adversarially trained objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .contrast import Ablation, ContrastContext, LossParts, contrast_terms, total_loss
from .numerics import ModelParams


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 0.3
    alpha: float = 0.01
    steps: int = 40
    lo: float = 0.0
    hi: float = 1.0
    random_start: bool = True

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lo > self.hi:
            raise ValueError("clamp range is empty")

    @classmethod
    def fgsm(cls, eps: float, lo: float = 0.0, hi: float = 1.0) -> AttackConfig:
        return cls(eps=eps, alpha=max(eps, 1e-12), steps=1, lo=lo, hi=hi, random_start=False)

    @classmethod
    def pgd(cls, eps: float, steps: int = 20, alpha: float | None = None,
            lo: float = 0.0, hi: float = 1.0) -> AttackConfig:
        # 2.5 * eps / steps lets the iterate reach the ball boundary from any start
        alpha = alpha if alpha is not None else max(2.5 * eps / steps, 1e-12)
        return cls(eps=eps, alpha=alpha, steps=steps, lo=lo, hi=hi, random_start=True)


def pgd_perturb(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    atk: AttackConfig,
    rng: np.random.Generator | None = None,
    objective: str = "ce",
    ctx: ContrastContext | None = None,
    ablation: Ablation = Ablation(),
) -> np.ndarray:
    """Projected sign-gradient ascent inside the l-inf ball of radius eps.

    ``objective`` is ``"ce"`` (cross-entropy) or ``"total"`` (cross-entropy
    plus the contrast terms of ``ctx``).  With ``steps=1``, ``alpha=eps``
    and no random start this is FGSM.
    """
    if atk.eps < 0:
        raise ValueError("eps must be >= 0")
    if objective not in ("ce", "total"):
        raise ValueError(f"unknown attack objective {objective!r}")
    x0 = np.asarray(batch, dtype=np.float64)
    lower = np.maximum(x0 - atk.eps, atk.lo)
    upper = np.minimum(x0 + atk.eps, atk.hi)
    x = x0.copy()
    if atk.random_start and atk.eps > 0:
        if rng is None:
            raise ValueError("random start needs an rng")
        x = np.clip(x0 + rng.uniform(-atk.eps, atk.eps, size=x0.shape), lower, upper)
    for _ in range(atk.steps):
        terms = contrast_terms(labels, ctx, ablation) if objective == "total" else ()
        _, dx = numerics.loss_and_input_grad(params, x, labels, terms)
        x = np.clip(x + atk.alpha * np.sign(dx), lower, upper)
    return x


def adversarial_total_loss(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    ctx: ContrastContext | None,
    atk: AttackConfig,
    rng: np.random.Generator | None = None,
    ablation: Ablation = Ablation(),
    local_weight: float = 1.0,
    global_weight: float = 1.0,
    objective: str = "ce",
) -> tuple[float, ModelParams, LossParts]:
    """Training objective on adversarial inputs.

    The perturbation is generated first and then held fixed, so gradients
    do not flow through the attack.  Contrast keys stay the clean-data
    signals carried by ``ctx``; only the queries are adversarial.
    """
    x_adv = pgd_perturb(params, batch, labels, atk, rng, objective, ctx, ablation)
    return total_loss(x_adv, labels, params, ctx, ablation, local_weight, global_weight)


def evaluate_under_attack(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    atk: AttackConfig,
    rng: np.random.Generator | None = None,
    batch_size: int = 512,
) -> float:
    """White-box accuracy on inputs perturbed against ``params`` itself."""
    if len(y) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(y), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        xb = pgd_perturb(params, xb, yb, atk, rng)
        hits += int((numerics.predict(params, xb) == yb).sum())
    return hits / len(y)
