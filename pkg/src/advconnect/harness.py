"""Experiment drivers: connectivity, transfer, auxiliary ablation, convergence,
EA comparison and the obfuscated-gradient comparison, at desk scale.

Every driver returns a :class:`Report` holding raw per-run records; summary
cells (mean and population std per group) are recomputed from those records on
demand, so a report can always be checked against its own raw data.

Each case gets its own RNG stream keyed by ``(seed, experiment, ..., case)``.
Cases may run on a thread pool; results are gathered in case order, so the
output does not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .bezier import (
    CurveObjective,
    OptimizeConfig,
    BezierPath,
    evaluate_connectivity,
    fooled_matrix,
    linear_path,
    optimize_control,
    sample_path_points,
)
from .evolution import EaConfig, run_ea
from .geometry import Budget, Norm
from .ledger import QueryLedger
from .model import Dataset, DefenseWrapper, Mlp, init_mlp, make_synthetic, predict, train
from .numcore import derive_seed, make_rng
from .pgd import PgdConfig, is_fooled, pgd, pgd_until_success

KINDS = ("connectivity", "transfer", "aux_ablation", "convergence", "ea_compare", "obfuscated")

# Radii sized to the toy model below. The path experiments use radii at which
# PGD reliably finds two endpoints; the EA comparison uses tighter ones so the
# uniform-crossover baseline still has to work for a success.
DEFAULT_EPSILON = {"linf": 0.12, "l2": 1.2, "l1": 10.0}
COMPARE_EPSILON = {"linf": 0.08, "l2": 0.75, "l1": 7.0}


# --------------------------------------------------------------------------- toy setup


@dataclass(frozen=True)
class DataParams:
    dim: int = 256
    class_count: int = 4
    per_class: tuple = (60, 40, 50)
    spread: float = 0.5
    center_low: float = 0.3
    center_high: float = 0.7

    def make(self, seed: int) -> Dataset:
        return make_synthetic(
            make_rng(seed, "data"),
            dim=self.dim,
            class_count=self.class_count,
            per_class=tuple(self.per_class),
            spread=self.spread,
            center_range=(self.center_low, self.center_high),
        )


@dataclass(frozen=True)
class TrainParams:
    hidden: tuple = (32, 32)
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32


def build_toy(data_params: DataParams = DataParams(), train_params: TrainParams = TrainParams(), seed: int = 0):
    """Deterministic (model, dataset) pair used by every experiment."""
    data = data_params.make(seed)
    dims = [data_params.dim, *train_params.hidden, data_params.class_count]
    model = init_mlp(dims, make_rng(seed, "init"))
    model = train(model, data, train_params.epochs, train_params.lr, make_rng(seed, "train"), train_params.batch_size)
    return model, data


# --------------------------------------------------------------------------- spec and report


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    settings: tuple = ("A",)
    norms: tuple = ("linf",)
    epsilons: dict | None = None
    cases: int = 25
    aux_counts: tuple = (0, 5, 10, 15, 20, 25)
    epochs_list: tuple = (10, 20, 30, 40, 50)
    sample_counts: tuple = (50, 100)
    repetitions: int = 5
    seed: int = 0
    test_images: int = 40
    points: int = 50
    linear: bool = False
    transfer_aux: int = 0
    threads: int = 1
    # curve optimization
    iterations: int = 30
    curve_lr: float = 0.01
    t_samples: int = 20
    w_main: float = 1.0
    w_aux: float = 0.5
    # PGD
    pgd_steps: int = 40
    pgd_restarts: int = 5
    # EA
    population: int = 30
    elites: int = 5
    tournament_size: int = 3
    mutation_prob: float = 0.2
    control_lr: float = 3.0
    max_generations: int = 1000
    quantization_levels: int = 5
    limit_levels: int = 10**6
    obf_generations: int = 200
    screen_with_pgd: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.cases < 0:
            raise ValueError("cases must be >= 0")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        for s in self.settings:
            if s not in ("A", "B", "C"):
                raise ValueError(f"unknown setting {s!r}")
        for n in self.norms:
            Norm.parse(n)
        if self.epsilons is None:
            radii = COMPARE_EPSILON if self.kind == "ea_compare" else DEFAULT_EPSILON
            object.__setattr__(self, "epsilons", dict(radii))

    def budget(self, norm) -> Budget:
        norm = Norm.parse(norm)
        return Budget(norm, float(self.epsilons[norm.value]))

    def pgd_config(self, norm) -> PgdConfig:
        return PgdConfig(self.budget(norm), steps=self.pgd_steps, restarts=self.pgd_restarts)

    def optimize_config(self, seed: int, iterations: int | None = None) -> OptimizeConfig:
        its = self.iterations if iterations is None else iterations
        return OptimizeConfig(iterations=its, t_samples_per_iter=self.t_samples, lr=self.curve_lr, seed=seed)

    def ea_config(self, norm, crossover: str, max_generations: int | None = None) -> EaConfig:
        return EaConfig(
            self.budget(norm),
            population=self.population,
            elites=self.elites,
            tournament_size=self.tournament_size,
            mutation_prob=self.mutation_prob,
            crossover=crossover,
            control_lr=self.control_lr,
            max_generations=self.max_generations if max_generations is None else max_generations,
        )


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


@dataclass
class Report:
    """Raw records plus the grouping used to summarize them.

    ``metrics`` maps a record key to its column header. ``None`` values
    (e.g. generations of a failed run, ASR1 in Setting A) are left out of a
    cell's statistics.
    """

    kind: str
    group_keys: tuple
    metrics: dict
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    ledger: QueryLedger = field(default_factory=QueryLedger)

    def groups(self) -> list[tuple]:
        seen = []
        for rec in self.records:
            key = tuple(rec[k] for k in self.group_keys)
            if key not in seen:
                seen.append(key)
        return seen

    def values(self, group: tuple, metric: str) -> list[float]:
        out = []
        for rec in self.records:
            if tuple(rec[k] for k in self.group_keys) == group and rec.get(metric) is not None:
                out.append(float(rec[metric]))
        return out

    def cell(self, group: tuple, metric: str) -> tuple[float, float]:
        return _mean_std(self.values(group, metric))

    def mean(self, metric: str, **where) -> float:
        """Mean of ``metric`` over all records matching ``where``."""
        vals = [
            float(r[metric])
            for r in self.records
            if all(r[k] == v for k, v in where.items()) and r.get(metric) is not None
        ]
        return _mean_std(vals)[0]

    def summary(self) -> list[dict]:
        rows = []
        for group in self.groups():
            row = dict(zip(self.group_keys, group))
            row["n"] = len([r for r in self.records if tuple(r[k] for k in self.group_keys) == group])
            for metric in self.metrics:
                row[metric] = self.cell(group, metric)
            rows.append(row)
        return rows

    def check_consistency(self, tol: float = 1e-9) -> bool:
        """Recompute every cell with the stdlib and compare."""
        import statistics

        for row in self.summary():
            group = tuple(row[k] for k in self.group_keys)
            for metric in self.metrics:
                vals = self.values(group, metric)
                mean, std = row[metric]
                if not vals:
                    if not (math.isnan(mean) and math.isnan(std)):
                        return False
                    continue
                if abs(statistics.fmean(vals) - mean) > tol or abs(statistics.pstdev(vals) - std) > tol:
                    return False
        return True

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = [k.capitalize() for k in self.group_keys] + ["Runs"]
        for label in self.metrics.values():
            header += [f"{label} mean", f"{label} std"]
        writer.writerow(header)
        for row in self.summary():
            line = [row[k] for k in self.group_keys] + [row["n"]]
            for metric in self.metrics:
                line += [_fmt(v) for v in row[metric]]
            writer.writerow(line)
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _run_cases(fn: Callable, items: list, threads: int) -> list:
    """Map ``fn`` over ``items``; results come back in item order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _collect(report: Report, outcomes: Iterable) -> Report:
    for recs, skipped, ledger in outcomes:
        report.records.extend(recs)
        report.skipped.extend(skipped)
        report.ledger.merge(ledger)
    return report


# --------------------------------------------------------------------------- case construction


def _correct_indices(model, X, y) -> np.ndarray:
    return np.flatnonzero(predict(model, X) == y)


def pick_main_cases(model, data: Dataset, setting: str, rng: np.random.Generator) -> list[tuple[np.ndarray, int]]:
    """Main images for one case, drawn from correctly classified training images."""
    X, y = data.split("train")
    ok = _correct_indices(model, X, y)
    if setting == "A":
        i = int(rng.choice(ok))
        return [(X[i], int(y[i]))]
    if setting == "B":
        classes = [c for c in np.unique(y[ok]) if np.sum(y[ok] == c) >= 2]
        c = rng.choice(classes)
        i, j = rng.choice(ok[y[ok] == c], size=2, replace=False)
        return [(X[i], int(y[i])), (X[j], int(y[j]))]
    c1, c2 = rng.choice(np.unique(y[ok]), size=2, replace=False)
    i = int(rng.choice(ok[y[ok] == c1]))
    j = int(rng.choice(ok[y[ok] == c2]))
    return [(X[i], int(y[i])), (X[j], int(y[j]))]


def _balanced_pick(pool_idx_by_class: list[np.ndarray], count: int, rng) -> np.ndarray:
    """Alternate between classes; each class list is shuffled once, so picks are nested in ``count``."""
    orders = [rng.permutation(idx) for idx in pool_idx_by_class]
    out, pos = [], [0] * len(orders)
    k = 0
    while len(out) < count:
        c = k % len(orders)
        if pos[c] < len(orders[c]):
            out.append(orders[c][pos[c]])
            pos[c] += 1
        elif all(p >= len(o) for p, o in zip(pos, orders)):
            break
        k += 1
    return np.asarray(out, dtype=int)


def case_classes(main_cases) -> list[int]:
    return sorted({int(c[1]) for c in main_cases})


def pick_aux(data: Dataset, main_cases, count: int, rng) -> list[tuple[np.ndarray, int]]:
    """Auxiliary images from the held-out pool: same class for A/B, balanced for C."""
    if count == 0:
        return []
    X, y = data.split("aux")
    classes = case_classes(main_cases)
    per_class = [np.flatnonzero(y == c) for c in classes]
    available = sum(len(p) for p in per_class)
    needed = count if len(classes) == 1 else len(classes) * math.ceil(count / len(classes))
    if available < needed or min(len(p) for p in per_class) < math.ceil(count / len(classes)):
        raise ValueError(
            f"auxiliary pool too small: need {math.ceil(count / len(classes))} images per class "
            f"for classes {classes}, have {[len(p) for p in per_class]}"
        )
    idx = _balanced_pick(per_class, count, rng)
    return [(X[i], int(y[i])) for i in idx]


def pick_test_images(model, data: Dataset, main_cases, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Correctly classified test images from the case's class(es), balanced across them."""
    X, y = data.split("test")
    ok = _correct_indices(model, X, y)
    per_class = [ok[y[ok] == c] for c in case_classes(main_cases)]
    idx = _balanced_pick(per_class, count, rng)
    return X[idx], y[idx]


def make_endpoints(model, main_cases, cfg: PgdConfig, seed: int, ledger) -> tuple[np.ndarray, np.ndarray, bool]:
    """Setting A: two PGD runs on one image. B/C: one PGD run per image."""
    if len(main_cases) == 1:
        ((x, y),) = main_cases
        d1, ok1 = pgd_until_success(model, x, y, cfg, derive_seed(seed, "endpoint", 0), ledger)
        d2, ok2 = pgd_until_success(model, x, y, cfg, derive_seed(seed, "endpoint", 1), ledger)
    else:
        (x1, y1), (x2, y2) = main_cases
        d1, ok1 = pgd_until_success(model, x1, y1, cfg, derive_seed(seed, "endpoint", 0), ledger)
        d2, ok2 = pgd_until_success(model, x2, y2, cfg, derive_seed(seed, "endpoint", 1), ledger)
    return d1, d2, ok1 and ok2


def _prepare_case(spec: ExperimentSpec, model, data, setting, norm, case_seed, ledger):
    rng = make_rng(case_seed, "cases")
    main = pick_main_cases(model, data, setting, rng)
    d1, d2, ok = make_endpoints(model, main, spec.pgd_config(norm), case_seed, ledger)
    return main, d1, d2, ok, rng


# --------------------------------------------------------------------------- connectivity

CONNECTIVITY_METRICS = {"asr1": "ASR1", "asr2": "ASR2", "asr_both": "ASR Both", "asr_avg": "ASR Avg"}


def run_connectivity(spec: ExperimentSpec, model, data: Dataset) -> Report:
    """ASR along optimized Bezier paths (and optionally straight segments) for each setting and norm."""
    report = Report("connectivity", ("setting", "norm", "path"), CONNECTIVITY_METRICS)
    jobs = [(s, n, i) for s in spec.settings for n in spec.norms for i in range(spec.cases)]

    def one(job):
        setting, norm, i = job
        ledger = QueryLedger()
        seed = derive_seed(spec.seed, "connectivity", setting, norm, i)
        main, d1, d2, ok, _ = _prepare_case(spec, model, data, setting, norm, seed, ledger)
        if not ok:
            return [], [{"setting": setting, "norm": norm, "case": i, "reason": "endpoint PGD failed"}], ledger
        budget = spec.budget(norm)
        objective = CurveObjective(main, [], setting, spec.w_main, spec.w_aux)
        paths = [
            (
                "bezier",
                optimize_control(objective, linear_path(d1, d2, budget), spec.optimize_config(seed), model, ledger),
            )
        ]
        if spec.linear:
            paths.append(("linear", linear_path(d1, d2, budget)))
        recs = []
        for name, path in paths:
            rep = evaluate_connectivity(path, main, spec.points, model, ledger)
            recs.append(
                {
                    "setting": setting,
                    "norm": budget.norm.value,
                    "path": name,
                    "case": i,
                    "asr1": rep.asr1,
                    "asr2": rep.asr2,
                    "asr_both": rep.asr_both,
                    "asr_avg": rep.asr_avg,
                    "mean_loss": rep.mean_loss,
                    "min_loss": rep.min_loss,
                }
            )
        return recs, [], ledger

    return _collect(report, _run_cases(one, jobs, spec.threads))


# --------------------------------------------------------------------------- transfer


@dataclass
class TransferFlags:
    """Raw per-image flags for one curve on a set of test images."""

    endpoint: np.ndarray  # (2, M)
    path: np.ndarray  # (P, M)

    @property
    def endp_avg(self) -> float:
        return 100.0 * float(self.endpoint.mean())

    @property
    def path_hit(self) -> np.ndarray:
        return self.path.any(axis=0)

    @property
    def rescued(self) -> np.ndarray:
        return self.path_hit & ~self.endpoint.any(axis=0)

    def metrics(self) -> dict:
        return {
            "endp_avg": self.endp_avg,
            "path_succ": 100.0 * float(self.path_hit.mean()),
            "imgs_resc": 100.0 * float(self.rescued.mean()),
            "avg_pts": float(self.path.sum(axis=0).mean()),
        }


def transfer_flags(path: BezierPath, X, y, model, points: int | np.ndarray, ledger=None) -> TransferFlags:
    if isinstance(points, (int, np.integer)):
        _, pts = sample_path_points(path, int(points))
    else:
        pts = points
    ends = np.stack([path.delta1, path.delta2])
    return TransferFlags(fooled_matrix(model, ends, X, y, ledger), fooled_matrix(model, pts, X, y, ledger))


TRANSFER_METRICS = {
    "endp_avg": "Endp. Avg",
    "path_succ": "Path Succ.",
    "imgs_resc": "Imgs Resc.",
    "avg_pts": "Avg. pts.",
}


def run_transfer(spec: ExperimentSpec, model, data: Dataset) -> Report:
    """Curves optimized on training cases, scored on unseen test images (one curve per case)."""
    report = Report("transfer", ("setting", "norm"), TRANSFER_METRICS)
    jobs = [(s, n, i) for s in spec.settings for n in spec.norms for i in range(spec.cases)]

    def one(job):
        setting, norm, i = job
        ledger = QueryLedger()
        seed = derive_seed(spec.seed, "transfer", setting, norm, i)
        main, d1, d2, ok, rng = _prepare_case(spec, model, data, setting, norm, seed, ledger)
        if not ok:
            return [], [{"setting": setting, "norm": norm, "case": i, "reason": "endpoint PGD failed"}], ledger
        budget = spec.budget(norm)
        aux = pick_aux(data, main, spec.transfer_aux, make_rng(seed, "aux"))
        objective = CurveObjective(main, aux, setting, spec.w_main, spec.w_aux)
        path = optimize_control(objective, linear_path(d1, d2, budget), spec.optimize_config(seed), model, ledger)
        X, y = pick_test_images(model, data, main, spec.test_images, make_rng(seed, "test"))
        flags = transfer_flags(path, X, y, model, spec.points, ledger)
        rec = {"setting": setting, "norm": budget.norm.value, "case": i, "images": int(len(y)), **flags.metrics()}
        return [rec], [], ledger

    return _collect(report, _run_cases(one, jobs, spec.threads))


# --------------------------------------------------------------------------- auxiliary-image ablation

AUX_METRICS = {"endp_avg": "Endp. Avg", "path_succ": "Path Succ.", "imp": "Imp.", "rescue_rate": "Rescue Rate"}


def run_aux_ablation(spec: ExperimentSpec, model, data: Dataset) -> Report:
    """Transfer metrics per auxiliary-set size; endpoints and test images are shared across sizes."""
    report = Report("aux_ablation", ("setting", "norm", "aux"), AUX_METRICS)
    jobs = [(s, n, r) for s in spec.settings for n in spec.norms for r in range(spec.repetitions)]

    def one(job):
        setting, norm, rep = job
        ledger = QueryLedger()
        seed = derive_seed(spec.seed, "aux_ablation", setting, norm, rep)
        main, d1, d2, ok, _ = _prepare_case(spec, model, data, setting, norm, seed, ledger)
        if not ok:
            return [], [{"setting": setting, "norm": norm, "repetition": rep, "reason": "endpoint PGD failed"}], ledger
        budget = spec.budget(norm)
        X, y = pick_test_images(model, data, main, spec.test_images, make_rng(seed, "test"))
        full_aux = pick_aux(data, main, max(spec.aux_counts), make_rng(seed, "aux"))
        recs = []
        for n_aux in spec.aux_counts:
            objective = CurveObjective(main, full_aux[:n_aux], setting, spec.w_main, spec.w_aux)
            path = optimize_control(objective, linear_path(d1, d2, budget), spec.optimize_config(seed), model, ledger)
            m = transfer_flags(path, X, y, model, spec.points, ledger).metrics()
            recs.append(
                {
                    "setting": setting,
                    "norm": budget.norm.value,
                    "aux": int(n_aux),
                    "repetition": rep,
                    "endp_avg": m["endp_avg"],
                    "path_succ": m["path_succ"],
                    "imp": m["path_succ"] - m["endp_avg"],
                    "rescue_rate": m["imgs_resc"],
                }
            )
        return recs, [], ledger

    return _collect(report, _run_cases(one, jobs, spec.threads))


# --------------------------------------------------------------------------- convergence and coverage


def nested_grids(counts: Iterable[int]) -> dict[int, np.ndarray]:
    """Index sets into the densest t-grid; each sparser grid takes every k-th point."""
    counts = sorted(set(int(c) for c in counts))
    dense = counts[-1]
    out = {}
    for c in counts:
        if (dense - 1) % max(c - 1, 1) == 0 and c > 1:
            step = (dense - 1) // (c - 1)
            out[c] = np.arange(0, dense, step)
        elif dense % c == 0:
            out[c] = np.arange(0, dense, dense // c)
        else:
            raise ValueError(f"cannot nest a {c}-point grid inside a {dense}-point grid")
    return out


CONVERGENCE_METRICS = {"coverage": "Coverage", "coverage_per_point": "Coverage per point"}


def run_convergence(spec: ExperimentSpec, model, data: Dataset) -> Report:
    """Coverage per (aux count, epochs) and coverage-per-point per (aux count, sample density).

    Epoch checkpoints come from a single optimization run; because the t-draws
    are one seeded stream, the checkpoint at E iterations equals a fresh run of
    E iterations bit for bit. Sparser sampling grids are subsets of the densest.
    """
    report = Report("convergence", ("setting", "norm", "aux", "epochs", "points"), CONVERGENCE_METRICS)
    grids = nested_grids(spec.sample_counts)
    dense = max(grids)
    last_epoch = max(spec.epochs_list)
    jobs = [(s, n, r) for s in spec.settings for n in spec.norms for r in range(spec.repetitions)]

    def one(job):
        setting, norm, rep = job
        ledger = QueryLedger()
        seed = derive_seed(spec.seed, "convergence", setting, norm, rep)
        main, d1, d2, ok, _ = _prepare_case(spec, model, data, setting, norm, seed, ledger)
        if not ok:
            return [], [{"setting": setting, "norm": norm, "repetition": rep, "reason": "endpoint PGD failed"}], ledger
        budget = spec.budget(norm)
        X, y = pick_test_images(model, data, main, spec.test_images, make_rng(seed, "test"))
        full_aux = pick_aux(data, main, max(spec.aux_counts), make_rng(seed, "aux"))
        recs = []
        for n_aux in spec.aux_counts:
            objective = CurveObjective(main, full_aux[:n_aux], setting, spec.w_main, spec.w_aux)
            snapshots = {}

            def keep(i, path):
                if i in spec.epochs_list:
                    snapshots[i] = path.control.copy()

            optimize_control(
                objective, linear_path(d1, d2, budget), spec.optimize_config(seed, last_epoch), model, ledger, keep
            )
            for epochs in sorted(spec.epochs_list):
                path = BezierPath(d1, d2, snapshots[epochs] if epochs else 0.5 * (d1 + d2), budget)
                _, pts = sample_path_points(path, dense)
                hits = fooled_matrix(model, pts, X, y, ledger)
                for count, idx in grids.items():
                    sub = hits[idx]
                    recs.append(
                        {
                            "setting": setting,
                            "norm": budget.norm.value,
                            "aux": int(n_aux),
                            "epochs": int(epochs),
                            "points": int(count),
                            "repetition": rep,
                            "coverage": 100.0 * float(sub.any(axis=0).mean()),
                            "coverage_per_point": float(sub.sum(axis=1).mean()),
                        }
                    )
        return recs, [], ledger

    return _collect(report, _run_cases(one, jobs, spec.threads))


# --------------------------------------------------------------------------- EA comparison

EA_METRICS = {
    "success_pct": "Succ. rate",
    "gen_if_success": "Avg. gen.",
    "forwards": "Avg. queries",
    "backwards": "Avg. backwards",
}
EA_TIME_METRICS = {"seconds": "Avg. time"}


def pick_attack_samples(model, data: Dataset, count: int, seed: int, label: str) -> tuple[np.ndarray, np.ndarray]:
    """``count`` correctly classified test images in a seeded random order."""
    X, y = data.split("test")
    ok = _correct_indices(model, X, y)
    idx = make_rng(seed, label, "samples").permutation(ok)[:count]
    return X[idx], y[idx]


def attackable_samples(model, data: Dataset, spec: ExperimentSpec, norm, label: str, ledger=None) -> np.ndarray:
    """Test-split indices, in seeded random order, of correctly classified
    images that PGD (with restarts) can fool within the budget.

    Screening guarantees an adversarial example exists inside the ball, so
    the EA comparison measures search cost rather than budget feasibility.
    """
    X, y = data.split("test")
    order = make_rng(spec.seed, label, "samples").permutation(_correct_indices(model, X, y))
    if not spec.screen_with_pgd:
        return order[: spec.cases]
    cfg = spec.pgd_config(norm)
    name = Norm.parse(norm).value
    keep = []
    for i in order:
        if len(keep) == spec.cases:
            break
        seed = derive_seed(spec.seed, label, "screen", name, int(i))
        if pgd_until_success(model, X[i], int(y[i]), cfg, seed, ledger)[1]:
            keep.append(int(i))
    return np.asarray(keep, dtype=int)


def run_ea_compare(spec: ExperimentSpec, model, data: Dataset) -> Report:
    """Baseline (uniform crossover) vs Bezier crossover on the same samples and budgets.

    Both methods start a sample from the same RNG stream, hence the same
    initial population. ``sample_id`` is the index within the test split.
    """
    report = Report("ea_compare", ("norm", "method"), EA_METRICS)
    X, y = data.split("test")
    samples = {n: attackable_samples(model, data, spec, n, "ea_compare", report.ledger) for n in spec.norms}
    jobs = [(n, cx, int(i)) for n in spec.norms for cx in ("uniform", "bezier") for i in samples[n]]

    def one(job):
        norm, crossover, i = job
        ledger = QueryLedger()
        seed = derive_seed(spec.seed, "ea_compare", Norm.parse(norm).value, i)
        cfg = spec.ea_config(norm, crossover)
        res = run_ea(model, X[i], int(y[i]), cfg, make_rng(seed, "ea"), ledger)
        rec = res.to_record(i, cfg.method, cfg.budget, seed)
        rec["success_pct"] = 100.0 * rec["success"]
        rec["gen_if_success"] = rec["generations"] if rec["success"] else None
        return [rec], [], ledger

    return _collect(report, _run_cases(one, jobs, spec.threads))


def ea_improvements(report: Report) -> list[dict]:
    """Per-norm differences between methods, recomputed from raw records."""
    rows = []
    norms = []
    for rec in report.records:
        if rec["norm"] not in norms:
            norms.append(rec["norm"])
    for norm in norms:
        base = {
            m: report.mean(m, norm=norm, method="traditional")
            for m in ("success_pct", "gen_if_success", "forwards", "seconds")
        }
        moco = {
            m: report.mean(m, norm=norm, method="moco-ea")
            for m in ("success_pct", "gen_if_success", "forwards", "seconds")
        }

        def reduction(key):
            b, m = base[key], moco[key]
            return 100.0 * (b - m) / b if b and not math.isnan(b) and not math.isnan(m) else math.nan

        rows.append(
            {
                "norm": norm,
                "succ_gain": moco["success_pct"] - base["success_pct"],
                "gen_reduction_pct": reduction("gen_if_success"),
                "query_reduction_pct": reduction("forwards"),
                "time_reduction_pct": reduction("seconds"),
            }
        )
    return rows


# --------------------------------------------------------------------------- obfuscated gradients

OBF_METRICS = {"success_pct": "ASR"}


def run_obfuscated(spec: ExperimentSpec, model: Mlp, data: Dataset) -> Report:
    """PGD vs Bezier-crossover EA under input quantization.

    Rows: PGD without defense, PGD and MoCo-EA under ``quantization_levels``,
    and the undefended PGD perturbations re-scored through a wrapper with
    ``limit_levels`` (the quantizer's large-L limit should match no defense).
    Samples are test images correctly classified by both the bare model and
    the quantized one.
    """
    report = Report("obfuscated", ("norm", "defense", "attack"), OBF_METRICS)
    wrapped = DefenseWrapper(model, spec.quantization_levels)
    limit = DefenseWrapper(model, spec.limit_levels)
    X, y = data.split("test")
    ok = np.flatnonzero((predict(model, X) == y) & (predict(wrapped, X) == y) & (predict(limit, X) == y))
    idx = make_rng(spec.seed, "obfuscated", "samples").permutation(ok)[: spec.cases]
    X, y = X[idx], y[idx]
    jobs = [(n, i) for n in spec.norms for i in range(len(y))]
    q_label = f"quant{spec.quantization_levels}"
    lim_label = f"quant{spec.limit_levels}"

    def one(job):
        norm, i = job
        ledger = QueryLedger()
        norm_name = Norm.parse(norm).value
        seed = derive_seed(spec.seed, "obfuscated", norm_name, i)
        x, label = X[i], int(y[i])
        pcfg = spec.pgd_config(norm)
        base = {"norm": norm_name, "sample_id": i, "seed": seed}
        recs = []
        d_clean, s_clean = pgd(model, x, label, pcfg, ledger, rng=make_rng(seed, "pgd"))
        recs.append({**base, "defense": "none", "attack": "pgd", "success": s_clean})
        _, s_q = pgd(wrapped, x, label, pcfg, ledger, rng=make_rng(seed, "pgd"))
        recs.append({**base, "defense": q_label, "attack": "pgd", "success": s_q})
        cfg = spec.ea_config(norm, "bezier", spec.obf_generations)
        res = run_ea(wrapped, x, label, cfg, make_rng(seed, "ea"), ledger)
        recs.append({**base, "defense": q_label, "attack": "moco-ea", "success": res.success, "forwards": res.forwards})
        s_lim = bool(is_fooled(limit, x, d_clean, label))
        ledger.charge(forwards=1)
        recs.append({**base, "defense": lim_label, "attack": "pgd-transfer", "success": s_lim})
        for r in recs:
            r["success"] = bool(r["success"])
            r["success_pct"] = 100.0 * r["success"]
        return recs, [], ledger

    return _collect(report, _run_cases(one, jobs, spec.threads))


RUNNERS = {
    "connectivity": run_connectivity,
    "transfer": run_transfer,
    "aux_ablation": run_aux_ablation,
    "convergence": run_convergence,
    "ea_compare": run_ea_compare,
    "obfuscated": run_obfuscated,
}


def run(spec: ExperimentSpec, model, data: Dataset) -> Report:
    return RUNNERS[spec.kind](spec, model, data)


# --------------------------------------------------------------------------- writers


def write_new(path: Path, text: str) -> None:
    """Write ``text`` to a file that must not exist yet."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x", encoding="utf-8", newline="") as fh:
        fh.write(text)


def rows_to_csv(rows: list[dict], columns: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(columns.values()))
    for row in rows:
        writer.writerow([_fmt(row[k]) if isinstance(row[k], float) else row[k] for k in columns])
    return buf.getvalue()
