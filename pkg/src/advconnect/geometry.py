"""Norms, projections onto lp balls, and box clipping.

All functions accept a single vector or a 2-D batch (one vector per row).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Norm(str, enum.Enum):
    LINF = "linf"
    L2 = "l2"
    L1 = "l1"

    @classmethod
    def parse(cls, value) -> "Norm":
        if isinstance(value, Norm):
            return value
        key = str(value).lower().replace("ℓ", "l").replace("∞", "inf")
        aliases = {"linf": cls.LINF, "l_inf": cls.LINF, "inf": cls.LINF, "l2": cls.L2, "l1": cls.L1}
        if key not in aliases:
            raise ValueError(f"unknown norm {value!r}; expected one of linf, l2, l1")
        return aliases[key]


@dataclass(frozen=True)
class Budget:
    norm: Norm
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm.parse(self.norm))
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")


def norm_p(v: np.ndarray, norm) -> np.ndarray | float:
    v = np.asarray(v, dtype=float)
    norm = Norm.parse(norm)
    if norm is Norm.LINF:
        out = np.max(np.abs(v), axis=-1, initial=0.0)
    elif norm is Norm.L2:
        out = np.sqrt(np.sum(v * v, axis=-1))
    else:
        out = np.sum(np.abs(v), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _project_l1(v: np.ndarray, eps: float) -> np.ndarray:
    # Soft-threshold at theta >= 0 chosen so that sum(max(|v| - theta, 0)) == eps.
    flat = np.atleast_2d(v)
    out = flat.copy()
    a = np.abs(flat)
    outside = a.sum(axis=1) > eps
    if not outside.any():
        return v.copy()
    rows = a[outside]
    d = rows.shape[1]
    if eps == 0:
        out[outside] = 0.0
        return out.reshape(v.shape)
    order = np.argsort(-rows, axis=1, kind="stable")
    u = np.take_along_axis(rows, order, axis=1)
    css = np.cumsum(u, axis=1)
    k = np.arange(1, d + 1)
    cond = u * k > (css - eps)
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(len(rows)), rho] - eps) / (rho + 1.0)
    shrunk = np.maximum(rows - theta[:, None], 0.0)
    out[outside] = np.sign(flat[outside]) * shrunk
    return out.reshape(v.shape)


def project(v: np.ndarray, budget: Budget) -> np.ndarray:
    """Euclidean projection onto ``{u : ||u||_p <= eps}``; identity when already feasible."""
    v = np.asarray(v, dtype=float)
    eps = budget.epsilon
    if budget.norm is Norm.LINF:
        return np.clip(v, -eps, eps)
    if budget.norm is Norm.L2:
        nrm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
        scale = np.where(nrm > eps, eps / np.where(nrm > 0, nrm, 1.0), 1.0)
        return v * scale
    return _project_l1(v, eps)


def clip_box(x: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if lo > hi:
        raise ValueError("clip_box requires lo <= hi")
    return np.clip(x, lo, hi)
