"""Evolutionary attacks: a uniform-crossover baseline and the Bezier-crossover variant.

Both share initialization, fitness, tournament selection, mutation and
elitism; they differ only in the crossover operator. Populations are 2-D
arrays (one perturbation per row) and fitness is cached per individual, so
every forward evaluation is charged exactly once.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bezier import curve_points
from .geometry import Budget, clip_box, project
from .ledger import QueryLedger
from .model import softmax
from .numcore import sample_uniform_ball
from .pgd import PgdConfig, pgd

METHOD_NAMES = {"uniform": "traditional", "bezier": "moco-ea"}


@functools.total_ordering
@dataclass(frozen=True)
class FitnessScore:
    """Success dominates; among equal success, lower true-label probability is fitter."""

    success: bool
    true_label_prob: float

    @property
    def key(self) -> tuple:
        return (bool(self.success), -float(self.true_label_prob))

    def __eq__(self, other):
        if not isinstance(other, FitnessScore):
            return NotImplemented
        return self.key == other.key

    def __lt__(self, other):
        if not isinstance(other, FitnessScore):
            return NotImplemented
        return self.key < other.key

    def __hash__(self):
        return hash(self.key)


@dataclass(frozen=True)
class EaConfig:
    budget: Budget
    population: int = 30
    elites: int = 5
    tournament_size: int = 3
    mutation_prob: float = 0.2
    mutation_std: float | None = None  # None -> 0.02 * epsilon
    mutation_scale: float = 1.0
    max_generations: int = 1000
    init: str = "random"
    crossover: str = "bezier"
    control_steps: int = 5
    control_ts: tuple = (0.25, 0.5, 0.75)
    candidate_ts: tuple = ((0.125, 0.25, 0.375), (0.625, 0.75, 0.875))
    control_lr: float = 0.01

    def __post_init__(self):
        if not 1 <= self.elites < self.population:
            raise ValueError("need 1 <= elites < population")
        if self.tournament_size < 2:
            raise ValueError("tournament_size must be >= 2")
        if self.init not in ("random", "pgd"):
            raise ValueError("init must be 'random' or 'pgd'")
        if self.crossover not in METHOD_NAMES:
            raise ValueError("crossover must be 'uniform' or 'bezier'")
        if self.population - self.elites > 2 * (self.population // 2):
            raise ValueError("not enough offspring to refill the population")

    @property
    def sigma(self) -> float:
        return 0.02 * self.budget.epsilon if self.mutation_std is None else self.mutation_std

    @property
    def k_candidates(self) -> int:
        return sum(len(side) for side in self.candidate_ts)

    @property
    def method(self) -> str:
        return METHOD_NAMES[self.crossover]


# --------------------------------------------------------------------------- fitness


def _fitness_arrays(population: np.ndarray, x, y, model, ledger: QueryLedger | None):
    inputs = clip_box(x + np.atleast_2d(population))
    probs = softmax(model.logits(inputs))
    if ledger is not None:
        ledger.charge(forwards=len(inputs))
    success = np.argmax(probs, axis=1) != y
    return success, probs[:, y].copy()


def _key(success: np.ndarray, prob: np.ndarray) -> np.ndarray:
    # Scalar fitness consistent with FitnessScore ordering: successes in [2, 3], failures in [0, 1].
    return 2.0 * success + (1.0 - prob)


def _rank(success: np.ndarray, prob: np.ndarray) -> np.ndarray:
    """Indices best-first; ties keep index order."""
    return np.lexsort((prob, ~success))


def evaluate_fitness(population, x, y, model, ledger: QueryLedger | None = None) -> list[FitnessScore]:
    population = np.atleast_2d(population)
    if len(population) == 0:
        raise ValueError("population is empty")
    success, prob = _fitness_arrays(population, x, y, model, ledger)
    return [FitnessScore(bool(s), float(p)) for s, p in zip(success, prob)]


# --------------------------------------------------------------------------- operators


def tournament_select(
    scores, count_pairs: int, rng: np.random.Generator, tournament_size: int = 3
) -> list[tuple[int, int]]:
    """Parent index pairs; each parent is the fittest of ``tournament_size`` distinct draws.

    Ties go to the earliest draw, so equal-fitness populations are selected uniformly.
    """
    if isinstance(scores, tuple):
        keys = _key(*scores)
    else:
        keys = np.array([2.0 * s.success + 1.0 - s.true_label_prob for s in scores], dtype=float)
    n = len(keys)
    if n < tournament_size:
        raise ValueError("population smaller than tournament size")
    draws = np.argsort(rng.random((2 * count_pairs, n)), axis=1)[:, :tournament_size]
    winners = draws[np.arange(len(draws)), np.argmax(keys[draws], axis=1)]
    return [(int(a), int(b)) for a, b in winners.reshape(count_pairs, 2)]


def uniform_crossover(
    p1, p2, rng: np.random.Generator | None = None, budget: Budget | None = None, coins=None
) -> np.ndarray:
    """Child takes ``p1[j]`` where the coin is True, else ``p2[j]``; projected if a budget is given."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape != p2.shape:
        raise ValueError("parent dims differ")
    if coins is None:
        coins = rng.random(p1.shape) < 0.5
    child = np.where(np.asarray(coins, dtype=bool), p1, p2)
    return project(child, budget) if budget is not None else child


def mutate(delta, cfg: EaConfig, rng: np.random.Generator) -> np.ndarray:
    """With probability ``mutation_prob`` add ``scale * N(0, sigma^2 I)`` and project."""
    delta = np.asarray(delta, dtype=float)
    if rng.random() >= cfg.mutation_prob:
        return delta
    noisy = delta + cfg.mutation_scale * cfg.sigma * rng.standard_normal(delta.shape)
    return project(noisy, cfg.budget)


def _mutate_rows(children: np.ndarray, cfg: EaConfig, rng: np.random.Generator) -> np.ndarray:
    hit = rng.random(len(children)) < cfg.mutation_prob
    noise = rng.standard_normal(children.shape)
    if not hit.any():
        return children
    out = children.copy()
    out[hit] = project(children[hit] + cfg.mutation_scale * cfg.sigma * noise[hit], cfg.budget)
    return out


def _uniform_children(P1, P2, cfg: EaConfig, rng):
    coins = rng.random(P1.shape) < 0.5
    c1 = project(np.where(coins, P1, P2), cfg.budget)
    c2 = project(np.where(coins, P2, P1), cfg.budget)
    return c1, c2


def _bezier_children(P1, P2, x, y, model, cfg: EaConfig, ledger: QueryLedger):
    """Bezier crossover for a batch of parent pairs (rows of P1, P2)."""
    n, d = P1.shape
    budget = cfg.budget
    control = 0.5 * (P1 + P2)
    ts = np.asarray(cfg.control_ts, dtype=float)
    weight = 2.0 * (1.0 - ts) * ts
    for _ in range(cfg.control_steps):
        raw = curve_points(P1[:, None, :], P2[:, None, :], control[:, None, :], ts)
        z = x + project(raw.reshape(-1, d), budget)
        _, grads = model.loss_and_input_grad(clip_box(z), y)
        ledger.charge(forwards=len(z), backwards=len(z))
        grads = (grads * ((z > 0.0) & (z < 1.0))).reshape(n, len(ts), d)
        # Descent on -sum_t L is ascent on sum_t L.
        control = control + cfg.control_lr * np.einsum("t,ntd->nd", weight, grads)
    children = []
    for side in cfg.candidate_ts:
        cts = np.asarray(side, dtype=float)
        pts = project(curve_points(P1[:, None, :], P2[:, None, :], control[:, None, :], cts).reshape(-1, d), budget)
        success, prob = _fitness_arrays(pts, x, y, model, ledger)
        keys = _key(success, prob).reshape(n, len(cts))
        pick = np.argmax(keys, axis=1)
        children.append(pts.reshape(n, len(cts), d)[np.arange(n), pick])
    return children[0], children[1]


def bezier_crossover(p1, p2, x, y, model, cfg: EaConfig, ledger: QueryLedger | None = None):
    """Optimize a short Bezier path between two parents and pick one child per half."""
    ledger = ledger if ledger is not None else QueryLedger()
    c1, c2 = _bezier_children(np.atleast_2d(p1), np.atleast_2d(p2), x, y, model, cfg, ledger)
    return c1[0], c2[0]


# --------------------------------------------------------------------------- main loop


@dataclass
class AttackResult:
    success: bool
    generations: int
    forwards: int
    backwards: int
    seconds: float
    delta: np.ndarray = field(repr=False)
    fitness: FitnessScore | None = None

    def to_record(self, sample_id, method: str, budget: Budget, seed: int) -> dict:
        return {
            "sample_id": sample_id,
            "method": method,
            "norm": budget.norm.value,
            "epsilon": budget.epsilon,
            "success": bool(self.success),
            "generations": int(self.generations),
            "forwards": int(self.forwards),
            "backwards": int(self.backwards),
            "seconds": float(self.seconds),
            "seed": int(seed),
        }


def initialize_population(x, y, model, cfg: EaConfig, rng, ledger) -> np.ndarray:
    d = np.asarray(x).size
    if cfg.init == "random":
        return sample_uniform_ball(rng, d, cfg.budget, size=cfg.population)
    pcfg = PgdConfig(cfg.budget)
    return np.array([pgd(model, x, y, pcfg, ledger, rng=rng)[0] for _ in range(cfg.population)])


def run_ea(
    model,
    x,
    y: int,
    cfg: EaConfig,
    rng: np.random.Generator,
    ledger: QueryLedger | None = None,
    on_generation: Callable | None = None,
) -> AttackResult:
    """Evolve perturbations for one correctly classified input.

    ``on_generation(generation, population, success, prob)`` is called after
    each completed round with the new population and its cached fitness.
    """
    ledger = ledger if ledger is not None else QueryLedger()
    x = np.asarray(x, dtype=float)
    f0, b0 = ledger.snapshot()
    start = time.perf_counter()
    N, k = cfg.population, cfg.elites
    pairs = N // 2

    P = initialize_population(x, y, model, cfg, rng, ledger)
    succ, prob = _fitness_arrays(P, x, y, model, ledger)
    best_delta, best_key = None, -np.inf

    def finish(generations: int) -> AttackResult:
        f1, b1 = ledger.snapshot()
        ledger.generations_completed += generations
        elapsed = time.perf_counter() - start
        ledger.wall_time += elapsed
        fit = FitnessScore(best_key >= 2.0, float(best_prob))
        return AttackResult(bool(best_key >= 2.0), generations, f1 - f0, b1 - b0, elapsed, best_delta.copy(), fit)

    generation = 0
    while True:
        keys = _key(succ, prob)
        top = int(np.argmax(keys))
        if keys[top] > best_key:
            best_key, best_delta, best_prob = float(keys[top]), P[top].copy(), prob[top]
        if best_key >= 2.0 or generation >= cfg.max_generations:
            return finish(generation)

        parent_idx = np.array(tournament_select((succ, prob), pairs, rng, cfg.tournament_size))
        P1, P2 = P[parent_idx[:, 0]], P[parent_idx[:, 1]]
        if cfg.crossover == "bezier":
            c1, c2 = _bezier_children(P1, P2, x, y, model, cfg, ledger)
        else:
            c1, c2 = _uniform_children(P1, P2, cfg, rng)
        children = np.empty((2 * pairs, x.size))
        children[0::2], children[1::2] = c1, c2
        children = _mutate_rows(children, cfg, rng)
        c_succ, c_prob = _fitness_arrays(children, x, y, model, ledger)

        elite = _rank(succ, prob)[:k]
        chosen = _rank(c_succ, c_prob)[: N - k]
        P = np.concatenate([P[elite], children[chosen]])
        succ = np.concatenate([succ[elite], c_succ[chosen]])
        prob = np.concatenate([prob[elite], c_prob[chosen]])
        generation += 1
        if on_generation is not None:
            on_generation(generation, P, succ, prob)
