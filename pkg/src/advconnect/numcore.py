"""Deterministic numerical substrate: seeded streams, Adam, ball sampling, finite differences."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import Budget, Norm, project


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, range, ...)."""


def derive_seed(master: int, *labels) -> int:
    """Hash ``(master, *labels)`` into a 64-bit seed.

    The digest is SHA-256 of the colon-joined decimal/str forms, truncated to
    the first 8 bytes (big endian). Any single case can be replayed by calling
    this with the same labels.
    """
    text = ":".join([str(int(master))] + [str(lab) for lab in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``derive_seed(seed, *labels)``."""
    key = derive_seed(seed, *labels) if labels else int(seed) & (2**64 - 1)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    @classmethod
    def for_params(cls, params: np.ndarray, **kwargs) -> "AdamState":
        return cls(m=np.zeros_like(params, dtype=float), v=np.zeros_like(params, dtype=float), **kwargs)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam descent step; returns new params and advances ``state``.

    To ascend, pass the negated gradient.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if not (params.shape == grad.shape == state.m.shape):
        raise ContractError(
            f"adam_step shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_num)


def sample_uniform_ball(rng: np.random.Generator, dim: int, budget: Budget, size: int | None = None) -> np.ndarray:
    """Draw from the budget ball.

    linf: uniform per coordinate in [-eps, eps].
    l2: uniform direction with radius eps * U**(1/dim), i.e. uniform in volume.
    l1: uniform in the linf box, then projected onto the l1 ball.
    """
    if dim < 1:
        raise ContractError("dim must be >= 1")
    shape = (dim,) if size is None else (size, dim)
    eps = budget.epsilon
    if eps == 0:
        return np.zeros(shape)
    if budget.norm is Norm.LINF:
        return rng.uniform(-eps, eps, size=shape)
    if budget.norm is Norm.L2:
        g = rng.standard_normal(shape)
        nrm = np.linalg.norm(g, axis=-1, keepdims=True)
        nrm[nrm == 0] = 1.0
        radius = eps * rng.uniform(0.0, 1.0, size=shape[:-1] + (1,)) ** (1.0 / dim)
        return g / nrm * radius
    return project(rng.uniform(-eps, eps, size=shape), budget)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ContractError("h must be positive")
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    step = np.zeros_like(x)
    for i in range(x.size):
        step.flat[i] = h
        hi, lo = float(f(x + step)), float(f(x - step))
        step.flat[i] = 0.0
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ContractError(f"non-finite function value at coordinate {i}")
        grad.flat[i] = (hi - lo) / (2.0 * h)
    return grad
