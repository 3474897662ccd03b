"""Fast invariant checks behind ``advconnect selftest``.

Each check returns ``None`` on success or a short failure message.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import geometry
from .bezier import BezierPath, curve_points, eval_curve, linear_path
from .evolution import EaConfig, bezier_crossover
from .geometry import Budget, Norm, norm_p
from .ledger import QueryLedger
from .model import init_mlp, softmax
from .numcore import AdamState, adam_step, finite_diff_grad, make_rng


def _l1_by_bisection(v: np.ndarray, eps: float) -> np.ndarray:
    a = np.abs(v)
    if a.sum() <= eps:
        return v.copy()
    lo, hi = 0.0, float(a.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(a - mid, 0.0).sum() > eps:
            lo = mid
        else:
            hi = mid
    return np.sign(v) * np.maximum(a - hi, 0.0)


def check_gradient() -> str | None:
    rng = make_rng(7, "selftest", "grad")
    worst = 0.0
    for trial in range(10):
        model = init_mlp([6, 8, 8, 3], rng)
        x = rng.uniform(0.0, 1.0, 6)
        y = int(rng.integers(3))
        _, g = model.loss_and_input_grad(x, y)
        fd = finite_diff_grad(lambda z: float(model.loss_and_input_grad(z, y)[0]), x)
        err = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)
        worst = max(worst, err)
    return None if worst < 1e-4 else f"max relative error {worst:.2e}"


def check_l1_projection() -> str | None:
    rng = make_rng(7, "selftest", "l1")
    for _ in range(200):
        d = int(rng.integers(2, 9))
        v = rng.normal(size=d) * rng.uniform(0.1, 3.0)
        eps = float(rng.uniform(0.05, 2.0))
        got = geometry.project(v, Budget(Norm.L1, eps))
        want = _l1_by_bisection(v, eps)
        if np.max(np.abs(got - want)) > 1e-8:
            return f"projection of {np.round(v, 3).tolist()} onto eps={eps:.3f} disagrees with bisection"
    return None


def check_projection_feasible_idempotent() -> str | None:
    rng = make_rng(7, "selftest", "proj")
    for norm in Norm:
        for _ in range(100):
            v = rng.normal(size=5) * 2.0
            b = Budget(norm, float(rng.uniform(0.1, 1.5)))
            p = geometry.project(v, b)
            if norm_p(p, norm) > b.epsilon * (1 + 1e-9):
                return f"{norm.value} projection infeasible"
            if np.max(np.abs(geometry.project(p, b) - p)) > 1e-12:
                return f"{norm.value} projection not idempotent"
    return None


def check_bezier_identities() -> str | None:
    rng = make_rng(7, "selftest", "bezier")
    d1, d2, c = rng.normal(size=(3, 8))
    path = BezierPath(d1, d2, c, Budget("linf", 1.0))
    if not (np.array_equal(eval_curve(path, 0.0), d1) and np.array_equal(eval_curve(path, 1.0), d2)):
        return "endpoints not reproduced exactly"
    lin = linear_path(d1, d2, path.budget)
    ts = np.linspace(0.0, 1.0, 101)
    seg = (1 - ts)[:, None] * d1 + ts[:, None] * d2
    dev = np.max(np.abs(curve_points(lin.delta1, lin.delta2, lin.control, ts) - seg))
    return None if dev < 1e-12 else f"midpoint control deviates from segment by {dev:.1e}"


def check_ledger_arithmetic() -> str | None:
    rng = make_rng(7, "selftest", "ledger")
    model = init_mlp([6, 8, 3], rng)
    cfg = EaConfig(Budget("linf", 0.1))
    ledger = QueryLedger()
    x = rng.uniform(0.0, 1.0, 6)
    p1, p2 = rng.uniform(-0.1, 0.1, (2, 6))
    bezier_crossover(p1, p2, x, 0, model, cfg, ledger)
    if ledger.snapshot() != (21, 15):
        return f"one crossover charged {ledger.snapshot()}, expected (21, 15)"
    per_gen = cfg.population + (cfg.control_steps * len(cfg.control_ts) + cfg.k_candidates) * (cfg.population // 2)
    if cfg.population + per_gen != 375:
        return f"one-generation total {cfg.population + per_gen}, expected 375"
    merged = QueryLedger(3, 1).merge(QueryLedger(4, 2))
    if merged.snapshot() != (7, 3):
        return "ledger merge is not additive"
    return None


def check_adam_and_softmax() -> str | None:
    state = AdamState.for_params(np.zeros(1), lr=0.01)
    p = adam_step(state, np.zeros(1), np.array([1.0]))
    p = adam_step(state, p, np.array([1.0]))
    if abs(p[0] + 0.0199999998) > 1e-9:
        return f"two Adam steps gave {p[0]!r}"
    probs = softmax(np.array([2.0, 0.0]))
    if abs(probs[0] - 0.8807970779778823) > 1e-12:
        return f"softmax([2, 0]) gave {probs.tolist()}"
    return None


CHECKS: dict[str, Callable[[], str | None]] = {
    "input gradient matches finite differences": check_gradient,
    "l1 projection matches bisection oracle": check_l1_projection,
    "projections feasible and idempotent": check_projection_feasible_idempotent,
    "bezier endpoint and segment identities": check_bezier_identities,
    "ledger arithmetic (21/15 per pair, 375 at g=1)": check_ledger_arithmetic,
    "adam and softmax reference values": check_adam_and_softmax,
}


def corrupt_l1_projection() -> None:
    """Test hook: swap the l1 projection for a radial rescale (feasible but not nearest)."""

    def radial(v, eps):
        v = np.asarray(v, dtype=float)
        n = np.abs(v).sum(axis=-1, keepdims=True)
        return v * np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)

    geometry._project_l1 = radial


def run_all(emit: Callable[[str], None] = print) -> list[str]:
    """Run every check, emit one line each, return the names that failed."""
    failed = []
    for name, check in CHECKS.items():
        try:
            problem = check()
        except Exception as exc:  # a crash is a failure of that property
            problem = f"{type(exc).__name__}: {exc}"
        if problem is None:
            emit(f"PASS  {name}")
        else:
            emit(f"FAIL  {name}: {problem}")
            failed.append(name)
    return failed
