import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advconnect.evolution import (
    EaConfig,
    FitnessScore,
    bezier_crossover,
    evaluate_fitness,
    mutate,
    run_ea,
    tournament_select,
    uniform_crossover,
)
from advconnect.geometry import Budget, norm_p
from advconnect.ledger import QueryLedger
from advconnect.model import predict
from advconnect.numcore import make_rng


def test_fitness_ordering_examples():
    assert FitnessScore(True, 0.4) > FitnessScore(False, 0.01)
    assert FitnessScore(True, 0.1) > FitnessScore(True, 0.3)
    assert FitnessScore(False, 0.2) == FitnessScore(False, 0.2)


scores = st.builds(FitnessScore, st.booleans(), st.floats(0, 1))


@settings(max_examples=200)
@given(a=scores, b=scores, c=scores)
def test_fitness_is_a_strict_total_order(a, b, c):
    assert sum([a < b, a == b, a > b]) == 1
    if a < b and b < c:
        assert a < c
    if a <= b and b <= a:
        assert a == b


def test_config_validation():
    b = Budget("linf", 0.1)
    for bad in ({"elites": 0}, {"elites": 30}, {"tournament_size": 1}, {"init": "zero"}, {"crossover": "one-point"}):
        with pytest.raises(ValueError):
            EaConfig(b, **bad)
    cfg = EaConfig(b)
    assert cfg.sigma == pytest.approx(0.002)
    assert cfg.k_candidates == 6
    assert cfg.method == "moco-ea"


def test_zero_perturbation_is_not_a_success(toy):
    model, data = toy
    X, y = data.split("test")
    i = int(np.flatnonzero(predict(model, X) == y)[0])
    led = QueryLedger()
    (score,) = evaluate_fitness(np.zeros((1, X.shape[1])), X[i], y[i], model, led)
    assert score.success is False
    assert led.snapshot() == (1, 0)


def test_uniform_crossover_forced_coins():
    child = uniform_crossover([1.0, 2.0], [3.0, 4.0], coins=[True, False])
    assert np.array_equal(child, [1.0, 4.0])


def test_uniform_crossover_equal_parents(rng):
    p = rng.normal(size=9)
    assert np.array_equal(uniform_crossover(p, p, rng), p)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31), dim=st.integers(1, 30))
def test_uniform_crossover_membership_and_feasibility(seed, dim):
    r = np.random.default_rng(seed)
    p1, p2 = r.normal(size=(2, dim))
    child = uniform_crossover(p1, p2, r)
    assert np.all((child == p1) | (child == p2))
    b = Budget("l1", 0.5)
    assert norm_p(uniform_crossover(p1, p2, r, budget=b), "l1") <= 0.5 * (1 + 1e-9)


def test_uniform_crossover_dim_mismatch():
    with pytest.raises(ValueError):
        uniform_crossover(np.zeros(2), np.zeros(3), coins=[True, True])


def test_mutation_identities_and_feasibility(rng):
    b = Budget("l2", 0.5)
    d = rng.normal(size=6) * 0.1
    assert np.array_equal(mutate(d, EaConfig(b, mutation_prob=0.0), rng), d)
    assert np.allclose(mutate(d, EaConfig(b, mutation_prob=1.0, mutation_std=0.0), rng), d)
    for _ in range(50):
        out = mutate(rng.normal(size=6), EaConfig(b, mutation_prob=1.0, mutation_std=5.0), rng)
        assert norm_p(out, "l2") <= 0.5 * (1 + 1e-9)


def test_tournament_pair_count():
    s = [FitnessScore(False, 0.5)] * 30
    assert len(tournament_select(s, 15, make_rng(0))) == 15


def test_tournament_uniform_under_equal_fitness():
    n, pairs = 30, 5000
    s = [FitnessScore(False, 0.5)] * n
    picks = np.array(tournament_select(s, pairs, make_rng(1))).ravel()
    counts = np.bincount(picks, minlength=n)
    expected = len(picks) / n
    sd = np.sqrt(len(picks) * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - expected) <= 3 * sd)


def test_dominant_individual_wins_every_tournament_it_enters():
    n = 30
    s = [FitnessScore(False, 0.9)] * n
    s[7] = FitnessScore(True, 0.5)
    # replay the draws made inside tournament_select
    r1, r2 = make_rng(3), make_rng(3)
    winners = np.array(tournament_select(s, 2000, r1)).ravel()
    draws = np.argsort(r2.random((4000, n)), axis=1)[:, :3]
    contains = (draws == 7).any(axis=1)
    assert contains.sum() > 0
    assert np.all(winners[contains] == 7)


def test_tournament_rejects_small_population():
    with pytest.raises(ValueError):
        tournament_select([FitnessScore(False, 0.5)] * 2, 1, make_rng(0))


@pytest.fixture
def attack_case(toy):
    model, data = toy
    X, y = data.split("test")
    i = int(np.flatnonzero(predict(model, X) == y)[3])
    return model, X[i], int(y[i])


def test_bezier_crossover_ledger_and_feasibility(attack_case, rng):
    model, x, y = attack_case
    b = Budget("linf", 0.08)
    cfg = EaConfig(b, control_lr=3.0)
    p1, p2 = rng.uniform(-0.08, 0.08, size=(2, x.size))
    led = QueryLedger()
    c1, c2 = bezier_crossover(p1, p2, x, y, model, cfg, led)
    assert led.snapshot() == (21, 15)
    assert norm_p(c1, "linf") <= 0.08 * (1 + 1e-9) and norm_p(c2, "linf") <= 0.08 * (1 + 1e-9)


def test_bezier_crossover_without_steps_picks_from_segment(attack_case, rng):
    model, x, y = attack_case
    cfg = EaConfig(Budget("l2", 5.0), control_steps=0)
    p1, p2 = rng.normal(size=(2, x.size)) * 0.1
    led = QueryLedger()
    c1, c2 = bezier_crossover(p1, p2, x, y, model, cfg, led)
    assert led.snapshot() == (6, 0)
    segment = [(1 - t) * p1 + t * p2 for t in (0.125, 0.25, 0.375, 0.625, 0.75, 0.875)]
    assert any(np.allclose(c1, s) for s in segment[:3])
    assert any(np.allclose(c2, s) for s in segment[3:])


def test_immediate_success_costs_one_population(attack_case):
    model, x, y = attack_case
    cfg = EaConfig(Budget("linf", 1.0))
    res = run_ea(model, x, y, cfg, make_rng(0))
    assert res.success and res.generations == 0 and res.forwards == 30 and res.backwards == 0


@pytest.mark.parametrize("seed", range(4))
def test_forward_count_formulas(attack_case, seed):
    model, x, y = attack_case
    for crossover in ("bezier", "uniform"):
        cfg = EaConfig(Budget("linf", 0.06), crossover=crossover, control_lr=3.0, max_generations=4)
        res = run_ea(model, x, y, cfg, make_rng(seed))
        g = res.generations
        if crossover == "bezier":
            assert res.forwards == 30 + 345 * g and res.backwards == 225 * g
        else:
            assert res.forwards == 30 * (g + 1) and res.backwards == 0


def test_same_seed_same_result(attack_case):
    model, x, y = attack_case
    cfg = EaConfig(Budget("l2", 0.5), control_lr=3.0, max_generations=3)
    a = run_ea(model, x, y, cfg, make_rng(9))
    b = run_ea(model, x, y, cfg, make_rng(9))
    assert (a.success, a.generations, a.forwards, a.backwards) == (b.success, b.generations, b.forwards, b.backwards)
    assert np.array_equal(a.delta, b.delta)


def test_generation_callback_sees_feasible_constant_population(attack_case):
    model, x, y = attack_case
    cfg = EaConfig(Budget("l1", 3.0), crossover="uniform", max_generations=5)
    seen = []

    def check(gen, P, succ, prob):
        assert P.shape == (30, x.size)
        assert np.all(norm_p(P, "l1") <= 3.0 * (1 + 1e-9))
        seen.append(gen)

    run_ea(model, x, y, cfg, make_rng(2), on_generation=check)
    assert seen == list(range(1, len(seen) + 1))


def test_pgd_seeded_initialization(attack_case):
    model, x, y = attack_case
    cfg = EaConfig(Budget("linf", 0.12), init="pgd", population=6, elites=2)
    res = run_ea(model, x, y, cfg, make_rng(0))
    assert res.success and res.generations == 0
    assert res.forwards == 6 * 41 + 6 and res.backwards == 6 * 40


def test_record_fields(attack_case):
    model, x, y = attack_case
    cfg = EaConfig(Budget("linf", 1.0))
    rec = run_ea(model, x, y, cfg, make_rng(0)).to_record(3, cfg.method, cfg.budget, 11)
    assert set(rec) == {
        "sample_id",
        "method",
        "norm",
        "epsilon",
        "success",
        "generations",
        "forwards",
        "backwards",
        "seconds",
        "seed",
    }
    assert list(itertools.islice(rec.values(), 3)) == [3, "moco-ea", "linf"]
