"""Acceptance suite: one test per criterion, summarized at the end of the run."""

import time

import numpy as np
import pytest

from advconnect.bezier import BezierPath, curve_points, eval_curve, linear_path
from advconnect.cli import main
from advconnect.evolution import FitnessScore, run_ea
from advconnect.geometry import Budget, norm_p, project
from advconnect.harness import (
    ExperimentSpec,
    attackable_samples,
    ea_improvements,
    run_aux_ablation,
    run_connectivity,
    run_convergence,
    run_ea_compare,
    run_obfuscated,
    run_transfer,
)
from advconnect.model import init_mlp, input_grad, loss
from advconnect.numcore import derive_seed, finite_diff_grad, make_rng
from oracles import brute_force_projection

NORMS = ("linf", "l2", "l1")


@pytest.mark.criterion(1, "gradient correctness")
def test_gradient_matches_finite_differences():
    start = time.perf_counter()
    worst = 0.0
    for k in range(100):
        r = make_rng(k, "acceptance-grad")
        dims = [int(r.integers(2, 9)), int(r.integers(2, 12)), int(r.integers(2, 12)), int(r.integers(2, 6))]
        m = init_mlp(dims, r)
        x = r.uniform(size=dims[0])
        y = int(r.integers(dims[-1]))
        fd = finite_diff_grad(lambda z: float(loss(m, z, y)), x, h=1e-5)
        g = input_grad(m, x, y)
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    print(f"max relative error {worst:.2e}")
    assert worst < 1e-4
    assert time.perf_counter() - start < 10


@pytest.mark.criterion(2, "projection matches brute-force oracle")
def test_projection_oracle_equivalence():
    start = time.perf_counter()
    for norm in NORMS:
        for dim in (2, 3, 4):
            r = make_rng(dim, "acceptance-proj", norm)
            for _ in range(200):
                v = r.normal(size=dim) * 1.5
                eps = float(r.uniform(0.1, 1.5))
                b = Budget(norm, eps)
                p = project(v, b)
                o = brute_force_projection(v, norm, eps)
                assert abs(np.linalg.norm(p - v) - np.linalg.norm(o - v)) < 1e-5
                assert np.max(np.abs(project(p, b) - p)) <= 1e-12
                assert norm_p(p, norm) <= eps * (1 + 1e-9)
    assert time.perf_counter() - start < 30


@pytest.mark.criterion(3, "Bezier identities")
def test_bezier_identities():
    r = make_rng(0, "acceptance-bezier")
    for dim in (1, 5, 64):
        d1, d2, c = r.normal(size=(3, dim))
        p = BezierPath(d1, d2, c, Budget("l2", 1.0))
        assert np.array_equal(eval_curve(p, 0.0), d1)
        assert np.array_equal(eval_curve(p, 1.0), d2)
        lin = linear_path(d1, d2, Budget("l2", 1.0))
        ts = np.linspace(0, 1, 101)
        seg = (1 - ts)[:, None] * d1 + ts[:, None] * d2
        assert np.max(np.abs(curve_points(lin.delta1, lin.delta2, lin.control, ts) - seg)) <= 1e-12


@pytest.mark.criterion(4, "ledger arithmetic 30 + 345 g")
def test_moco_forward_counts(toy):
    model, data = toy
    X, y = data.split("test")
    spec = ExperimentSpec("ea_compare", cases=20)
    idx = attackable_samples(model, data, spec, "linf", "acceptance-ledger")
    assert len(idx) == 20
    gens = []
    for i in idx:
        cfg = spec.ea_config("linf", "bezier")
        res = run_ea(model, X[i], int(y[i]), cfg, make_rng(derive_seed(0, "acceptance-ledger", int(i)), "ea"))
        assert res.success
        assert res.forwards == 30 + 345 * res.generations
        if res.generations == 1:
            assert res.forwards == 375
        gens.append(res.generations)
    print("generations", gens)
    assert 1 in gens


@pytest.mark.criterion(5, "connectivity along optimized paths")
def test_connectivity(toy):
    start = time.perf_counter()
    spec = ExperimentSpec("connectivity", settings=("A", "B", "C"), norms=NORMS, cases=25, linear=True)
    rep = run_connectivity(spec, *toy)
    a = rep.mean("asr_both", setting="A", norm="linf", path="bezier")
    print(f"A linf bezier ASR Both {a:.1f}; skipped {len(rep.skipped)}")
    assert a >= 95.0
    for setting in ("B", "C"):
        for norm in NORMS:
            bez = rep.mean("asr_both", setting=setting, norm=norm, path="bezier")
            lin = rep.mean("asr_both", setting=setting, norm=norm, path="linear")
            print(f"{setting} {norm} bezier {bez:.1f} linear {lin:.1f}")
            assert bez >= lin
    assert time.perf_counter() - start < 120


@pytest.mark.criterion(6, "transferability direction")
def test_transfer(toy):
    positive = 0
    for seed in (0, 1, 2):
        rep = run_transfer(ExperimentSpec("transfer", settings=("A", "B", "C"), norms=NORMS, seed=seed), *toy)
        for row in rep.summary():
            endp, path, resc = row["endp_avg"][0], row["path_succ"][0], row["imgs_resc"][0]
            print(f"seed {seed} {row['setting']} {row['norm']} endp {endp:.1f} path {path:.1f} resc {resc:.1f}")
            assert path >= endp
            assert resc >= 0
            positive += resc > 0
    assert positive >= 1


@pytest.mark.criterion(7, "auxiliary images improve transfer")
def test_aux_trend(toy):
    spec = ExperimentSpec("aux_ablation", settings=("A",), norms=("linf",), aux_counts=(0, 5, 10), repetitions=5)
    rep = run_aux_ablation(spec, *toy)
    with_aux = rep.mean("path_succ", aux=10)
    without = rep.mean("path_succ", aux=0)
    print(f"path succ aux=0 {without:.1f} aux=10 {with_aux:.1f}")
    assert with_aux > without
    for r in range(5):
        endp = {rec["endp_avg"] for rec in rep.records if rec["repetition"] == r}
        assert len(endp) == 1


@pytest.mark.criterion(8, "convergence trend")
def test_convergence(toy):
    spec = ExperimentSpec("convergence", aux_counts=(0, 25), epochs_list=(10, 50), repetitions=5)
    rep = run_convergence(spec, *toy)
    c10 = rep.mean("coverage", aux=25, epochs=10)
    c50 = rep.mean("coverage", aux=25, epochs=50)
    print(f"coverage 10 epochs {c10:.2f} 50 epochs {c50:.2f}")
    assert c50 >= c10
    cov = {(r["repetition"], r["aux"], r["epochs"], r["points"]): r["coverage"] for r in rep.records}
    for (rp, aux, ep, pts), c in cov.items():
        if pts == 50:
            assert c <= cov[(rp, aux, ep, 100)]


@pytest.mark.criterion(9, "EA comparison direction")
def test_ea_compare(toy):
    start = time.perf_counter()
    rep = run_ea_compare(ExperimentSpec("ea_compare", norms=NORMS, cases=30), *toy)
    for norm in NORMS:
        base_s = rep.mean("success_pct", norm=norm, method="traditional")
        moco_s = rep.mean("success_pct", norm=norm, method="moco-ea")
        base_q = rep.mean("forwards", norm=norm, method="traditional")
        moco_q = rep.mean("forwards", norm=norm, method="moco-ea")
        print(f"{norm} success {base_s:.1f} -> {moco_s:.1f}; queries {base_q:.1f} -> {moco_q:.1f}")
        assert len([r for r in rep.records if r["norm"] == norm and r["method"] == "moco-ea"]) == 30
        assert moco_s >= base_s
        assert moco_q < 0.25 * base_q
    print(ea_improvements(rep))
    assert time.perf_counter() - start < 300


@pytest.mark.criterion(10, "obfuscated gradients")
def test_obfuscated(toy):
    rep = run_obfuscated(ExperimentSpec("obfuscated", norms=("linf",), cases=30), *toy)
    pgd_q = rep.mean("success_pct", defense="quant5", attack="pgd")
    moco_q = rep.mean("success_pct", defense="quant5", attack="moco-ea")
    print(f"quant5 PGD {pgd_q:.1f} MoCo-EA {moco_q:.1f}")
    assert len([r for r in rep.records if r["attack"] == "moco-ea"]) >= 30
    assert moco_q > pgd_q


@pytest.mark.criterion(11, "determinism across threads")
def test_cli_determinism(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out)]) == 0
    cfg = tmp_path / "c.toml"
    cfg.write_text("[compare]\ncases = 4\n[transfer]\ncases = 4\n")
    for command in ("connect", "transfer", "compare"):
        for tag, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            args = [command, "--config", str(cfg), "--out", str(out), "--tag", tag, "--threads", threads]
            assert main(args) == 0
        first = (out / f"{command}-a.csv").read_bytes()
        assert (out / f"{command}-b.csv").read_bytes() == first
        assert (out / f"{command}-c.csv").read_bytes() == first


@pytest.mark.criterion(12, "evolutionary invariants")
def test_ea_invariants(toy):
    model, data = toy
    X, y = data.split("test")
    spec = ExperimentSpec("ea_compare", cases=10)
    idx = attackable_samples(model, data, spec, "l2", "acceptance-invariants")
    assert len(idx) == 10
    rounds = []
    for k, i in enumerate(idx):
        crossover = "uniform" if k % 2 == 0 else "bezier"
        cfg = spec.ea_config("l2", crossover, max_generations=60)
        best = []

        def check(gen, P, succ, prob):
            assert P.shape == (cfg.population, X.shape[1])
            assert np.all(norm_p(P, "l2") <= cfg.budget.epsilon * (1 + 1e-9))
            best.append(max(FitnessScore(bool(s), float(p)) for s, p in zip(succ, prob)))

        res = run_ea(
            model, X[i], int(y[i]), cfg, make_rng(derive_seed(0, "invariants", int(i)), "ea"), on_generation=check
        )
        assert len(best) == res.generations
        assert all(b >= a for a, b in zip(best, best[1:]))
        rounds.append(res.generations)
    print("generations per run", rounds)
    assert sum(rounds) >= 10
