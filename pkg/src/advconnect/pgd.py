"""Projected gradient ascent on cross-entropy under linf / l2 / l1 budgets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import Budget, Norm, clip_box, norm_p, project
from .ledger import QueryLedger
from .numcore import make_rng, sample_uniform_ball

# Step size as a fraction of epsilon, per norm.
DEFAULT_STEP_FRACTION = {Norm.LINF: 1 / 4, Norm.L2: 1 / 5, Norm.L1: 1 / 10}


@dataclass(frozen=True)
class PgdConfig:
    budget: Budget
    steps: int = 40
    step_size: float | None = None
    random_start: bool = True
    seed: int = 0
    restarts: int = 5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return DEFAULT_STEP_FRACTION[self.budget.norm] * self.budget.epsilon


def ascent_step(grad: np.ndarray, norm: Norm, alpha: float) -> np.ndarray:
    """Norm-appropriate ascent direction scaled by ``alpha``.

    linf: alpha * sign(g). l2: alpha * g / ||g||. l1: alpha * sign(g_j) on the
    single coordinate j = argmax |g_j| (lowest index on ties). A zero gradient
    gives a zero step.
    """
    if not np.any(grad):
        return np.zeros_like(grad)
    if norm is Norm.LINF:
        return alpha * np.sign(grad)
    if norm is Norm.L2:
        return alpha * grad / np.linalg.norm(grad)
    step = np.zeros_like(grad)
    j = int(np.argmax(np.abs(grad)))
    step[j] = alpha * np.sign(grad[j])
    return step


def _input_grad_masked(model, x, delta, y):
    z = x + delta
    inputs = clip_box(z)
    _, g = model.loss_and_input_grad(inputs, y)
    # d clip / d z is zero where clipping is active.
    return g * ((z > 0.0) & (z < 1.0))


def is_fooled(model, x: np.ndarray, delta: np.ndarray, y) -> np.ndarray | bool:
    pred = np.argmax(model.logits(clip_box(x + delta)), axis=-1)
    out = pred != np.asarray(y)
    return bool(out) if np.ndim(out) == 0 else out


def pgd(model, x: np.ndarray, y: int, cfg: PgdConfig, ledger: QueryLedger | None = None, rng=None):
    """Run projected ascent; returns ``(delta, success)``.

    Charges one forward and one backward per step and one final forward.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.input_dim,):
        raise ValueError(f"input has shape {x.shape}, model expects ({model.input_dim},)")
    ledger = ledger if ledger is not None else QueryLedger()
    budget = cfg.budget
    if cfg.random_start:
        rng = rng if rng is not None else make_rng(cfg.seed)
        delta = sample_uniform_ball(rng, x.size, budget)
    else:
        delta = np.zeros_like(x)
    alpha = cfg.alpha
    tol = budget.epsilon * (1 + 1e-9) + 1e-15
    for _ in range(cfg.steps):
        g = _input_grad_masked(model, x, delta, y)
        ledger.charge(forwards=1, backwards=1)
        delta = project(delta + ascent_step(g, budget.norm, alpha), budget)
        assert norm_p(delta, budget.norm) <= tol
    success = is_fooled(model, x, delta, y)
    ledger.charge(forwards=1)
    return delta, bool(success)


class EndpointPair(NamedTuple):
    delta1: np.ndarray
    delta2: np.ndarray
    success1: bool
    success2: bool

    @property
    def ok(self) -> bool:
        return self.success1 and self.success2


def pgd_until_success(model, x, y, cfg: PgdConfig, seed: int, ledger: QueryLedger | None = None):
    """PGD with up to ``cfg.restarts`` reseeded attempts; returns the first success or the last try."""
    attempts = max(1, cfg.restarts)
    for attempt in range(attempts):
        rng = make_rng(seed, "pgd-restart", attempt)
        delta, ok = pgd(model, x, y, cfg, ledger, rng=rng)
        if ok or not cfg.random_start:
            break
    return delta, ok


def pgd_endpoint_pair(model, x, y, cfg: PgdConfig, seeds: tuple[int, int], ledger=None) -> EndpointPair:
    """Two PGD runs from different random starts on the same image.

    ``.ok`` is False when either run fails to fool the model after all restarts;
    callers skip such cases.
    """
    d1, ok1 = pgd_until_success(model, x, y, cfg, seeds[0], ledger)
    d2, ok2 = pgd_until_success(model, x, y, cfg, seeds[1], ledger)
    return EndpointPair(d1, d2, ok1, ok2)
