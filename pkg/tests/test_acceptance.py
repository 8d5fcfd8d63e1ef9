"""End-to-end acceptance checks at the default desk-scale configuration.

Each test records one PASS/FAIL line (see ``conftest.py``); the lines are
repeated in the terminal summary.
"""

import json
import math
import sys
import time

import numpy as np
import pytest

from mpattack import attacks as atk
from mpattack import geometry as geo
from mpattack import harness
from mpattack import metrics as mt
from mpattack.attacks import AttackReport
from mpattack.classifier import MLP, forward, init_mlp, input_gradient, loss, param_gradient
from mpattack.cli import main
from oracles import ball_extreme_points, finite_difference, l1_projection_bisection, max_rel_error, sample_ball

SLACK = 0.01


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default config, its test slice and the cached MSD and l-inf victims."""
    cfg = harness.load_config()
    cache = tmp_path_factory.mktemp("victims")
    train, test = harness.dataset_from_config(cfg)
    victims = {name: harness.get_victim(name, train, cfg, cache) for name in ("msd", "linf")}
    return cfg, test.head(cfg["n_eval"]), victims


# 1 -----------------------------------------------------------------------------

def test_criterion_1_geometry(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = []
    n = 1000
    for p in geo.NORMS:
        # feasibility, idempotence and norm attainment on 10^3 random inputs
        d = rng.integers(1, 33, size=n)
        for dim in np.unique(d):
            m = int(np.sum(d == dim))
            delta = rng.standard_normal((m, dim)) * rng.uniform(0.01, 5, size=(m, 1))
            eps = rng.uniform(0.01, 2, size=(m, 1))
            proj = np.stack([geo.project(delta[i], p, eps[i, 0]) for i in range(m)])
            if np.any(geo.lp_norm(proj, p) > eps[:, 0] * (1 + 1e-9)):
                failures.append(f"feasibility p={p} d={dim}")
            again = np.stack([geo.project(proj[i], p, eps[i, 0]) for i in range(m)])
            if not np.allclose(again, proj, rtol=1e-9, atol=1e-15):
                failures.append(f"idempotence p={p} d={dim}")
            g = rng.standard_normal((m, dim))
            v = geo.steepest_ascent(g, p, 0.3)
            if not np.allclose(geo.lp_norm(v, p), 0.3, rtol=1e-9):
                failures.append(f"attainment p={p} d={dim}")
        # ascent optimality against 10^4 random feasible directions
        for dim in range(1, 9):
            g = rng.standard_normal((125, dim))
            v = geo.steepest_ascent(g, p, 0.3)
            u = sample_ball(rng, 10_000, dim, p, 0.3)
            if np.any(np.sum(v * g, axis=1) < np.max(g @ u.T, axis=1) - 1e-9):
                failures.append(f"ascent optimality p={p} d={dim}")
        # projection optimality against 10^5 random points in the ball
        for dim in range(1, 5):
            delta = rng.standard_normal((10, dim))
            u = sample_ball(rng, 100_000, dim, p, 0.5)
            for row in delta:
                best = np.min(np.linalg.norm(u - row, axis=1))
                if np.linalg.norm(geo.project(row, p, 0.5) - row) > best + 1e-6:
                    failures.append(f"projection optimality p={p} d={dim}")
    # extreme-point enumeration for the polytope balls
    for p in (1, geo.INF):
        for dim in range(1, 7):
            pts = ball_extreme_points(dim, p, 0.3)
            g = rng.standard_normal((50, dim))
            v = geo.steepest_ascent(g, p, 0.3)
            if not np.allclose(np.sum(v * g, axis=1), np.max(g @ pts.T, axis=1), rtol=1e-12, atol=1e-12):
                failures.append(f"extreme points p={p} d={dim}")
    # l1 projection against the bisection oracle
    worst = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 33))
        delta = rng.standard_normal(dim) * rng.uniform(0.01, 5)
        eps = float(rng.uniform(0.01, 2))
        worst = max(worst, float(np.max(np.abs(geo.project_l1(delta, eps) - l1_projection_bisection(delta, eps)))))
    if worst > 1e-8:
        failures.append(f"l1 vs bisection {worst:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 30
    criterion(1, ok, f"geometry invariants, max |l1 - bisection| = {worst:.1e}, {elapsed:.1f} s"
              + (f"; failures: {failures[:5]}" if failures else ""))
    assert ok


# 2 -----------------------------------------------------------------------------

def _off_kinks(model, x, margin=1e-3):
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w.T + b
        if np.min(np.abs(z)) < margin:
            return False
        h = np.maximum(z, 0)
    return True


def test_criterion_2_gradients(criterion):
    start = time.perf_counter()
    worst = {"input": 0.0, "param": 0.0, "coef": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = init_mlp(8, 4, hidden=(12, 12), seed=seed)
        m.biases[0] += rng.uniform(-0.1, 0.1, size=12)
        x = rng.random(8)
        while not _off_kinks(m, x):
            x = rng.random(8)
        y = int(rng.integers(4))
        fd = finite_difference(lambda v: loss(forward(m, v), y), x, 1e-4)
        worst["input"] = max(worst["input"], max_rel_error(input_gradient(m, x, y), fd, floor=1e-6))

        xb = rng.random((4, 8))
        while not all(_off_kinks(m, r) for r in xb):
            xb = rng.random((4, 8))
        yb = rng.integers(4, size=4)
        _, grads = param_gradient(m, xb, yb)
        for layer, (dw, db) in enumerate(grads):
            for param, analytic in ((m.weights[layer], dw), (m.biases[layer], db)):
                def f(v, param=param):
                    saved = param.copy()
                    param[...] = v
                    out = float(np.mean(loss(forward(m, xb), yb)))
                    param[...] = saved
                    return out

                worst["param"] = max(worst["param"],
                                     max_rel_error(analytic, finite_difference(f, param.copy(), 1e-4), floor=1e-6))

        tau = float(rng.choice([0.05, 0.3, 1.0]))
        dirs = rng.uniform(-0.3, 0.3, size=(8, 3))
        c = rng.uniform(-0.1, 0.1, size=(8, 3))
        analytic = atk.coefficient_gradient(m, x, y, c, dirs, tau)
        fd = finite_difference(lambda cc: atk.mixed_loss(m, x, y, cc, dirs, tau), c, 1e-5)
        worst["coef"] = max(worst["coef"], max_rel_error(analytic, fd, floor=1e-6))
    elapsed = time.perf_counter() - start
    ok = worst["input"] <= 1e-4 and worst["param"] <= 1e-4 and worst["coef"] <= 1e-3 and elapsed < 60
    criterion(2, ok, "max rel. error input {input:.1e}, param {param:.1e}, coefficient {coef:.1e} "
              "over 20 seeds".format(**worst) + f", {elapsed:.1f} s")
    assert ok


# 3 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_reduction(desk, criterion):
    cfg, test, victims = desk
    model = victims["msd"]
    x, y = test.x[:200], test.y[:200]
    base = harness.base_attack_config(cfg)
    details, ok = [], True
    for name in base.norms:
        single = base.replace(norms=[name])
        mpa = atk.mpa_attack(model, x, y, single)
        pgd = atk.pgd_attack(model, x, y, name, single.eps[name], single.step[name], single.n_iter)
        same_flags = all(a.success == b.success for a, b in zip(mpa, pgd))
        diff = max(float(np.max(np.abs(a.x_adv - b.x_adv))) for a, b in zip(mpa, pgd))
        ok &= same_flags and diff <= 1e-9
        details.append(f"{name}: flags {'equal' if same_flags else 'differ'}, max diff {diff:.1e}")
    criterion(3, ok, "single-norm MPA vs PGD on 200 examples; " + "; ".join(details))
    assert ok


# 4 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_budget_compliance(desk, criterion):
    cfg, test, victims = desk
    acfg = harness.base_attack_config(cfg)
    checked = {"calls": 0, "rows": 0, "violations": 0}

    def hook(it, idx, new, x0, assign):
        checked["calls"] += 1
        checked["rows"] += len(idx)
        bad = np.any((new < 0) | (new > 1), axis=1)
        if not np.all(np.isin(assign, range(len(acfg.norms)))):
            bad |= True
        for j, name in enumerate(acfg.norms):
            delta = np.where(assign == j, new - x0, 0.0)
            bad |= geo.lp_norm(delta, geo.parse_norm(name)) > acfg.eps[name] * (1 + 1e-9)
        checked["violations"] += int(bad.sum())

    reports = []
    for victim in ("msd", "linf"):
        reports += atk.mpa_attack(victims[victim], test.x, test.y, acfg, on_combine=hook)
    counts_ok = all(sum(r.assignment_counts.values()) == test.x.shape[1] for r in reports)
    ok = checked["violations"] == 0 and counts_ok and len(test) >= 500 and acfg.n_iter == 20
    criterion(4, ok, f"{checked['violations']} violations over {checked['rows']} combine steps "
              f"({len(test)} examples x 2 victims, {acfg.n_iter} iterations)")
    assert ok


# 5 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_dominance(desk, criterion):
    cfg, test, victims = desk
    cfg = dict(cfg, metrics=False)
    atks = harness.attack_configs(cfg)
    rob = {}
    for victim in ("msd", "linf"):
        for name, (kind, acfg) in atks.items():
            rob[victim, name] = harness.evaluate_attack(victims[victim], test, kind, acfg, cfg)["robust_accuracy"]
    pgd_min = min(rob["msd", n] for n in ("pgd-l1", "pgd-l2", "pgd-linf"))
    dominance = rob["msd", "mpa"] <= pgd_min + SLACK
    l1_drop = rob["linf", "pgd-l1"] < rob["linf", "pgd-linf"]
    ok = dominance and l1_drop and len(test) >= 500
    criterion(5, ok,
              f"MSD victim: MPA {rob['msd', 'mpa']:.3f} vs PGD l1/l2/linf "
              f"{rob['msd', 'pgd-l1']:.3f}/{rob['msd', 'pgd-l2']:.3f}/{rob['msd', 'pgd-linf']:.3f}; "
              f"linf victim: PGD-l1 {rob['linf', 'pgd-l1']:.3f} vs PGD-linf {rob['linf', 'pgd-linf']:.3f}")
    assert ok


# 6 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_sweep(desk, criterion):
    cfg, _, victims = desk
    grid = [1, 5, 10, 15, 20]
    cfg = dict(cfg, metrics=False, sweep={"victim": "msd", "tau": [0.01], "n_inner": grid, "reuse": [True, False]})
    rows = harness.run_sweep(cfg, model=victims["msd"])
    acc = {(r.n_inner, r.reuse): r.robust_accuracy for r in rows}
    reuse_better = all(acc[n, True] <= acc[n, False] + SLACK for n in grid if n >= 15)
    monotone = all(
        acc[b, reuse] <= acc[a, reuse] + SLACK for reuse in (True, False) for a, b in zip(grid, grid[1:])
    )
    ok = reuse_better and monotone
    fmt = lambda reuse: "/".join(f"{acc[n, reuse]:.3f}" for n in grid)  # noqa: E731
    criterion(6, ok, f"tau=0.01, n_inner {grid}: reuse {fmt(True)}, no reuse {fmt(False)}")
    assert ok


# 7 -----------------------------------------------------------------------------

def _zero_model(d=4, c=3):
    return MLP([np.zeros((c, d))], [np.zeros(c)])


def test_criterion_7_metrics(criterion):
    rng = np.random.default_rng(7)
    problems = []
    # PSNR
    decade = []
    for _ in range(200):
        x = rng.random(64)
        delta = rng.standard_normal(64) * 1e-3
        decade.append(mt.psnr(x, x + delta) - mt.psnr(x, x + 10 * delta))
    if max(abs(v - 20) for v in decade) > 1e-9:
        problems.append("psnr decade")
    example = mt.psnr([1, 0, 0, 0], [1.1, 0.1, 0.1, 0.1])
    if abs(example - 20) > 1e-4:
        problems.append(f"psnr example {example}")
    # SSIM
    for i in range(1000):
        shape = (8, 8) if i % 2 else (12, 12)
        a = rng.random(shape)
        b = np.clip(a + rng.uniform(0, 0.5) * rng.standard_normal(shape), 0, 1)
        s = mt.ssim(a, b)
        if abs(s - mt.ssim(b, a)) > 1e-12 or not -1 <= s <= 1 or abs(mt.ssim(a, a) - 1) > 1e-12:
            problems.append("ssim invariant")
            break
    # Wasserstein two-point case
    wd = mt.wasserstein(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), reg=1e-3)
    if abs(wd - 1.0) > 0.05:
        problems.append(f"wd two-point {wd}")
    # success filter on constructed cases
    x = np.full((6, 4), 0.5)
    shift = lambda m, xs, ys: [AttackReport(True, 1, np.clip(v + 0.1, 0, 1), {}, 0.0) for v in xs]  # noqa: E731
    none = lambda m, xs, ys: [AttackReport(False, 0, v.copy(), {}, 0.0) for v in xs]  # noqa: E731
    cases = [
        (np.ones(6, dtype=int), shift, 0),   # nothing correctly classified
        (np.zeros(6, dtype=int), none, 0),   # no attack succeeds
        (np.array([0, 0, 0, 1, 2, 1]), shift, 3),   # only the correctly classified half counts
    ]
    for y, fn, expected in cases:
        rep = mt.filtered_metrics(_zero_model(), x, y, fn, (2, 2))
        if rep.n_evaluated != expected or (expected == 0 and not math.isnan(rep.psnr)):
            problems.append(f"filter expected {expected} got {rep.n_evaluated}")
    ok = not problems
    criterion(7, ok, f"PSNR example {example:.6f} dB, decade drop max err "
              f"{max(abs(v - 20) for v in decade):.1e}, WD two-point (reg 1e-3) {wd:.4f}"
              + (f"; problems: {problems}" if problems else ""))
    assert ok


# 8 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_determinism(tmp_path, criterion):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"train": {"epochs": 5}, "n_eval": 200, "victims": ["standard", "linf"]}))
    outs = []
    for run in ("first", "second"):
        out = tmp_path / run
        assert main(["attack", "--config", str(cfg_path), "--seed", "11", "--out", str(out)]) == 0
        outs.append((out / "results.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0].splitlines()) == 1 + 2 * 4
    criterion(8, ok, f"two `attack` runs with seed 11: CSV outputs {'identical' if ok else 'differ'} "
              f"({len(outs[0])} bytes)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
