"""Quadratic Bezier paths between two perturbations and control-point optimization.

The curve is ``B(t) = (1-t)^2 d1 + 2(1-t)t c + t^2 d2``. Every point the model
sees is first projected onto the budget ball and then ``x + point`` is clipped
to the unit box. The gradient treats the ball projection as identity
(straight-through); the box clip uses its exact a.e. derivative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Budget, clip_box, project
from .ledger import QueryLedger
from .model import loss as ce_loss
from .numcore import AdamState, adam_step, make_rng

SETTINGS = ("A", "B", "C")


@dataclass
class BezierPath:
    delta1: np.ndarray
    delta2: np.ndarray
    control: np.ndarray
    budget: Budget

    def __post_init__(self):
        self.delta1 = np.asarray(self.delta1, dtype=float)
        self.delta2 = np.asarray(self.delta2, dtype=float)
        self.control = np.asarray(self.control, dtype=float)
        if not (self.delta1.shape == self.delta2.shape == self.control.shape):
            raise ValueError("endpoints and control must share one dimension")

    def to_dict(self) -> dict:
        return {
            "delta1": self.delta1.tolist(),
            "delta2": self.delta2.tolist(),
            "control": self.control.tolist(),
            "norm": self.budget.norm.value,
            "epsilon": self.budget.epsilon,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BezierPath":
        return cls(doc["delta1"], doc["delta2"], doc["control"], Budget(doc["norm"], float(doc["epsilon"])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BezierPath":
        return cls.from_dict(json.loads(text))


def curve_points(delta1, delta2, control, ts) -> np.ndarray:
    """Unprojected curve points, one row per entry of ``ts``."""
    ts = np.asarray(ts, dtype=float)[..., None]
    s = 1.0 - ts
    return s * s * delta1 + 2.0 * s * ts * control + ts * ts * delta2


def eval_curve(path: BezierPath, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return curve_points(path.delta1, path.delta2, path.control, [t])[0]


def linear_path(delta1, delta2, budget: Budget) -> BezierPath:
    """Segment ``(1-t) d1 + t d2`` expressed as a Bezier path with midpoint control."""
    delta1 = np.asarray(delta1, dtype=float)
    delta2 = np.asarray(delta2, dtype=float)
    if delta1.shape != delta2.shape:
        raise ValueError("endpoint dims differ")
    return BezierPath(delta1.copy(), delta2.copy(), 0.5 * (delta1 + delta2), budget)


@dataclass
class CurveObjective:
    """Weighted adversarial loss of main and auxiliary images along a shared curve."""

    main_cases: list
    aux_cases: list = field(default_factory=list)
    setting: str = "A"
    w_main: float = 1.0
    w_aux: float = 0.5

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        n = len(self.main_cases)
        expected = 1 if self.setting == "A" else 2
        if n != expected:
            raise ValueError(f"setting {self.setting} needs {expected} main case(s), got {n}")
        if self.setting == "B" and self.main_cases[0][1] != self.main_cases[1][1]:
            raise ValueError("setting B needs equal labels")
        if not (self.w_main > self.w_aux >= 0):
            raise ValueError("need w_main > w_aux >= 0")

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Inputs, labels and per-case weights (normalized to sum 1)."""
        cases = list(self.main_cases) + list(self.aux_cases)
        X = np.array([np.asarray(c[0], dtype=float) for c in cases])
        y = np.array([int(c[1]) for c in cases])
        w = np.array([self.w_main] * len(self.main_cases) + [self.w_aux] * len(self.aux_cases))
        return X, y, w / w.sum()


def _losses_and_grads(model, X, y, points):
    """Loss/grad for every (point, case) pair; arrays of shape (P, K) and (P, K, d)."""
    P, K = len(points), len(X)
    z = X[None, :, :] + points[:, None, :]
    inputs = clip_box(z).reshape(P * K, -1)
    losses, grads = model.loss_and_input_grad(inputs, np.tile(y, P))
    grads = grads.reshape(P, K, -1) * ((z > 0.0) & (z < 1.0))
    return losses.reshape(P, K), grads


def path_loss(objective: CurveObjective, path: BezierPath, t: float, model, ledger: QueryLedger | None = None) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    X, y, w = objective.stacked()
    point = project(eval_curve(path, t), path.budget)
    inputs = clip_box(X + point)
    losses = ce_loss(model, inputs, y)
    if ledger is not None:
        ledger.charge(forwards=len(y))
    return float(np.dot(w, losses))


def objective_gradient(objective: CurveObjective, path: BezierPath, ts, model, ledger: QueryLedger | None = None):
    """Mean over ``ts`` of the weighted loss and its gradient w.r.t. the control point."""
    X, y, w = objective.stacked()
    ts = np.asarray(ts, dtype=float)
    raw = curve_points(path.delta1, path.delta2, path.control, ts)
    losses, grads = _losses_and_grads(model, X, y, project(raw, path.budget))
    if ledger is not None:
        ledger.charge(forwards=losses.size, backwards=losses.size)
    dB_dc = 2.0 * (1.0 - ts) * ts
    value = float(np.mean(losses @ w))
    grad = np.einsum("p,k,pkd->d", dB_dc, w, grads) / len(ts)
    return value, grad


@dataclass(frozen=True)
class OptimizeConfig:
    iterations: int = 30
    t_samples_per_iter: int = 20
    lr: float = 0.01
    seed: int = 0
    fixed_ts: tuple | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def optimize_control(
    objective: CurveObjective, path: BezierPath, cfg: OptimizeConfig, model, ledger=None, on_iteration=None
) -> BezierPath:
    """Adam ascent on the Monte-Carlo estimate of the mean path loss.

    Starts from the midpoint of the endpoints. Endpoints are returned
    untouched; the control point itself is never projected.
    ``on_iteration(i, path)`` sees the path after each completed iteration i.
    """
    rng = make_rng(cfg.seed, "bezier-t")
    control = 0.5 * (path.delta1 + path.delta2)
    state = AdamState.for_params(control, lr=cfg.lr)
    current = BezierPath(path.delta1, path.delta2, control, path.budget)
    for i in range(cfg.iterations):
        ts = cfg.fixed_ts if cfg.fixed_ts is not None else rng.uniform(0.0, 1.0, cfg.t_samples_per_iter)
        _, grad = objective_gradient(objective, current, ts, model, ledger)
        current.control = adam_step(state, current.control, -grad)
        if on_iteration is not None:
            on_iteration(i + 1, current)
    return current


def path_t_grid(count: int) -> np.ndarray:
    """``count`` evenly spaced values from 0.02 to 0.98 inclusive."""
    if count < 2:
        raise ValueError("count must be >= 2")
    return 0.02 + np.arange(count) * (0.96 / (count - 1))


def sample_path_points(path: BezierPath, count: int = 50, ts=None) -> tuple[np.ndarray, np.ndarray]:
    """``(ts, points)`` with every point projected onto the budget ball."""
    ts = path_t_grid(count) if ts is None else np.asarray(ts, dtype=float)
    return ts, project(curve_points(path.delta1, path.delta2, path.control, ts), path.budget)


def fooled_matrix(model, points: np.ndarray, X: np.ndarray, y: np.ndarray, ledger=None) -> np.ndarray:
    """Boolean (P, K): whether point p fools case k."""
    P, K = len(points), len(X)
    inputs = clip_box(X[None, :, :] + points[:, None, :]).reshape(P * K, -1)
    if ledger is not None:
        ledger.charge(forwards=P * K)
    pred = np.argmax(model.logits(inputs), axis=-1).reshape(P, K)
    return pred != y[None, :]


@dataclass
class ConnectivityReport:
    asr1: float | None
    asr2: float | None
    asr_both: float
    asr_avg: float
    mean_loss: float
    min_loss: float
    point_flags: np.ndarray = field(repr=False)


def evaluate_connectivity(path: BezierPath, cases, count: int, model, ledger=None) -> ConnectivityReport:
    """Attack success (percent) of ``count`` interior points on the main cases."""
    X = np.array([np.asarray(c[0], dtype=float) for c in cases])
    y = np.array([int(c[1]) for c in cases])
    _, points = sample_path_points(path, count)
    inputs = clip_box(X[None, :, :] + points[:, None, :]).reshape(len(points) * len(X), -1)
    if ledger is not None:
        ledger.charge(forwards=len(inputs))
    logits = model.logits(inputs)
    flags = (np.argmax(logits, axis=-1) != np.tile(y, len(points))).reshape(len(points), len(X))
    losses = ce_loss(model, inputs, np.tile(y, len(points))).reshape(len(points), len(X)).mean(axis=1)
    both = 100.0 * float(np.mean(flags.all(axis=1)))
    if len(cases) == 1:
        asr1 = asr2 = None
        avg = both
    else:
        asr1 = 100.0 * float(np.mean(flags[:, 0]))
        asr2 = 100.0 * float(np.mean(flags[:, 1]))
        avg = 0.5 * (asr1 + asr2)
    return ConnectivityReport(asr1, asr2, both, avg, float(losses.mean()), float(losses.min()), flags)
