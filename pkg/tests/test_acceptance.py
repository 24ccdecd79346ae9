"""Acceptance gate: one test per headline criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and then
asserts at the stated tolerance.
"""
import json
import time
from fractions import Fraction

import numpy as np
import pytest

from qem.agent import TrainConfig, qr_update, run_training
from qem.cfe import (
    TAIL_WEIGHTS,
    build_design,
    em_variance_theoretical,
    lemma_variance_m1,
    mean_weights,
    simulate_f_min,
    std_normal_quantile,
    variance_f,
    wls_fit,
)
from qem.cli import load_config, run_config
from qem.diagnostics import (
    contraction_rates,
    param_error_bound,
    param_error_gap,
    projected_fixed_point,
)
from qem.dist import (
    QuantileRepr,
    WeightedSample,
    categorical_project,
    default_taus,
    quantile_project,
    wasserstein1,
)
from qem.mdp import build_chain, build_five_state, build_two_arm

pytestmark = pytest.mark.acceptance

REPORT = []


def record(name, ok, detail, elapsed=None):
    ok = bool(ok)
    if elapsed is not None:
        detail = f"{detail} [{elapsed:.1f}s]"
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    REPORT.append(line)
    print(line)
    assert ok, line


def test_toy_bias():
    t0 = time.perf_counter()
    g = Fraction(9, 10)
    got = {}
    for n in (4, 32, 128):
        # exact per-arm quantile tables of U(0,1) and U(1/N, 1+1/N), discounted
        x1 = [g * Fraction(2 * i - 1, 2 * n) for i in range(1, n + 1)]
        x2 = [g * (Fraction(2 * i - 1, 2 * n) + Fraction(1, n)) for i in range(1, n + 1)]
        target = WeightedSample.uniform(np.array(x1 + x2, dtype=object))
        taus = np.array([Fraction(2 * i - 1, 2 * n) for i in range(1, n + 1)], dtype=object)
        got[n] = quantile_project(target, taus).atoms[0]
    ok = all(got[n] == 3 * g / (2 * n) and got[n] != g / n for n in got)
    record("toy bias 3g/(2N)", ok and time.perf_counter() - t0 < 1.0,
           ", ".join(f"N={n}: {v}" for n, v in got.items()), time.perf_counter() - t0)


F_MIN_RANGES = [(2, 32, 0.3, 0.9), (5, 128, 6.2, 9.2), (20, 500, 77.0, 116.0)]


def test_f_min_ranges():
    t0 = time.perf_counter()
    vals = [simulate_f_min(n, m, 100_000, "uniform", np.random.default_rng(0))
            for m, n, _, _ in F_MIN_RANGES]
    elapsed = time.perf_counter() - t0
    ok = all(lo <= f <= hi and f > 0 for f, (_, _, lo, hi) in zip(vals, F_MIN_RANGES)) and elapsed < 30
    detail = ", ".join(f"(M={m},N={n}) f_min={f:.4f} in [{lo},{hi}]"
                       for f, (m, n, lo, hi) in zip(vals, F_MIN_RANGES))
    record("f_min reference ranges", ok, detail, elapsed)


def _model1_intercepts(v, reps, seed):
    rng = np.random.default_rng(seed)
    taus = default_taus(32)
    d = build_design(taus, 1)
    rows = mean_weights(taus, v, 1)
    q = d.entries @ [0.4, 1.1] + rng.normal(size=(reps, 32)) * np.sqrt(v)
    return q, q @ rows[0], d.z


def test_intercept_variance_closed_form():
    t0 = time.perf_counter()
    taus = default_taus(32)
    out = {}
    for label, v in (("V=I", np.ones(32)), ("tail", TAIL_WEIGHTS.variances(taus))):
        _, m1, z = _model1_intercepts(v, 100_000, 21)
        out[label] = (m1.var(), lemma_variance_m1(v, z))
    rel = {k: abs(a / b - 1) for k, (a, b) in out.items()}
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k}: sim={a:.5f} closed={b:.5f} rel={rel[k]:.3f}" for k, (a, b) in out.items())
    record("closed-form intercept variance (3%)", all(r <= 0.03 for r in rel.values()) and elapsed < 10,
           detail, elapsed)


def test_variance_ratio():
    t0 = time.perf_counter()
    taus = default_taus(32)
    v = TAIL_WEIGHTS.variances(taus)
    q, m1, z = _model1_intercepts(v, 100_000, 22)
    f = variance_f(v, z)
    mc = m1.var() / q.mean(axis=1).var()
    predicted = lemma_variance_m1(v, z) / em_variance_theoretical(v)
    elapsed = time.perf_counter() - t0
    ok = f > 0 and mc < 1 and abs(mc / predicted - 1) <= 0.03 and elapsed < 10
    record("Var(QEM)/Var(EM) factor (3%)", ok,
           f"f={f:.4f}, MC ratio={mc:.4f}, predicted={predicted:.4f}", elapsed)


def test_contraction_chain():
    t0 = time.perf_counter()
    g = 0.99
    out = contraction_rates(build_chain(g), 512, 10, np.random.default_rng(0))
    mr, vr = out["mean_rates"][1:], out["var_rates"][1:]
    elapsed = time.perf_counter() - t0
    ok = np.all(mr <= g + 0.01) and np.all(vr <= g * g + 0.01) and elapsed < 30
    record("contraction on chain (N=512, 10 sweeps)", ok,
           f"max mean rate={mr.max():.4f} (<= {g + 0.01}), max var rate={vr.max():.4f} "
           f"(<= {g * g + 0.01:.4f})", elapsed)


def test_param_bound():
    t0 = time.perf_counter()
    gaps, bounds = [], []
    for n in (32, 128, 512):
        mdp = build_two_arm(n, 0.9)
        gaps.append(param_error_gap(mdp, projected_fixed_point(mdp, n)))
        bounds.append(param_error_bound(mdp.r_max, n, 0.9))
    elapsed = time.perf_counter() - t0
    ok = (all(g <= b for g, b in zip(gaps, bounds))
          and all(b <= a for a, b in zip(gaps, gaps[1:])) and elapsed < 30)
    record("parameterization bound on two-arm", ok,
           ", ".join(f"N={n}: gap={g:.5f} bound={b:.5f}" for n, g, b in zip((32, 128, 512), gaps, bounds)),
           elapsed)


def _run(tmp_path, name, raw):
    config = load_config(dict(raw, output_dir=str(tmp_path / name)))
    return run_config(config)


def test_five_state(tmp_path):
    t0 = time.perf_counter()
    seeds = list(range(10))
    ev = _run(tmp_path, "eval", {"experiment": "five-state", "seeds": seeds,
                                 "train": {"estimator": "qem"}})
    em = np.array([s["q_em"][0] for s in ev["seeds"].values()])
    qem = np.array([s["q_qem"][0] for s in ev["seeds"].values()])
    ctl = _run(tmp_path, "ctl", {"experiment": "five-state", "seeds": seeds,
                                 "train": {"estimator": "qem", "mode": "control"}})
    hits = sum(s["greedy_action"] == 0 for s in ctl["seeds"].values())
    err_em, err_qem = np.abs(em - 1.2).mean(), np.abs(qem - 1.2).mean()
    elapsed = time.perf_counter() - t0
    ok = err_qem < err_em and qem.var() < em.var() and hits >= 8 and elapsed < 300
    record("five-state variance reduction and control", ok,
           f"|err| EM={err_em:.4f} QEM={err_qem:.4f}, var EM={em.var():.3e} QEM={qem.var():.3e}, "
           f"greedy a1 {hits}/10", elapsed)


def test_frozenlake(tmp_path):
    t0 = time.perf_counter()
    seeds = list(range(10))
    out = {}
    for est in ("em", "qem"):
        out[est] = _run(tmp_path, est, {"experiment": "frozenlake", "seeds": seeds,
                                        "train": {"estimator": est}})
    hits = {e: sum(s["greedy_action"] in s["target_actions"] for s in r["seeds"].values())
            for e, r in out.items()}
    q = {e: r["mean_q_error"] for e, r in out.items()}
    w = {e: r["mean_w1_error"] for e, r in out.items()}
    elapsed = time.perf_counter() - t0
    ok = (min(hits.values()) >= 9 and q["qem"] < q["em"] and w["qem"] < w["em"]
          and elapsed < 1200)
    record("FrozenLake ordering", ok,
           f"optimal start action EM {hits['em']}/10 QEM {hits['qem']}/10, "
           f"Q-error EM={q['em']:.4f} QEM={q['qem']:.4f}, W1 EM={w['em']:.4f} QEM={w['qem']:.4f}",
           elapsed)


def _pinball(theta, tau, values, weights):
    u = values - theta
    return float(np.sum(weights * u * (tau - (u < 0))))


def test_property_suites(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = []

    # nested R^2
    taus = default_taus(48)
    for _ in range(50):
        q = rng.standard_exponential(48).cumsum() + rng.normal(size=48)
        for w in (None, TAIL_WEIGHTS):
            r2 = [wls_fit(build_design(taus, k), w, q).r_squared for k in (1, 2, 3, 4)]
            if not all(b >= a - 1e-10 for a, b in zip(r2, r2[1:])):
                failures.append("nested R2")

    # qr_update against central differences of the pinball loss
    worst = 0.0
    taus6 = default_taus(6)
    for _ in range(50):
        values, weights, theta = rng.normal(size=15), rng.dirichlet(np.ones(15)), rng.normal(size=6)
        if np.min(np.abs(theta[:, None] - values[None, :])) < 1e-4:
            continue
        g = (theta - qr_update(QuantileRepr(theta, taus6), WeightedSample(values, weights), 0.1).atoms) / 0.1
        h = 1e-6
        fd = [(_pinball(theta[i] + h, taus6[i], values, weights)
               - _pinball(theta[i] - h, taus6[i], values, weights)) / (2 * h) for i in range(6)]
        worst = max(worst, float(np.max(np.abs(np.array(fd) - g))))
    if worst > 1e-6:
        failures.append(f"qr gradient {worst:.2e}")

    # W1 metric axioms
    for _ in range(100):
        x, y, z = (QuantileRepr.from_atoms(rng.normal(scale=5, size=7)) for _ in range(3))
        if (abs(wasserstein1(x, y) - wasserstein1(y, x)) > 1e-12 or wasserstein1(x, x) != 0
                or wasserstein1(x, z) > wasserstein1(x, y) + wasserstein1(y, z) + 1e-9):
            failures.append("W1 axioms")
            break

    # categorical projection keeps the mean inside the support
    support = np.linspace(-10, 10, 51)
    for _ in range(100):
        s = WeightedSample(rng.uniform(-10, 10, 20), rng.dirichlet(np.ones(20)))
        if abs(categorical_project(s, support).mean - s.mean) > 1e-12:
            failures.append("categorical mean")
            break

    # byte reproducibility of training and of the CLI outputs
    cfg = TrainConfig(estimator="qem", n_quantiles=16, steps=2000, log_every=500, seed=5)
    a, b = run_training(build_five_state(), cfg), run_training(build_five_state(), cfg)
    if a.snapshots.tobytes() != b.snapshots.tobytes():
        failures.append("training determinism")
    raw = {"experiment": "chain", "seeds": [0, 1], "train": {"steps": 1000}}
    _run(tmp_path, "d1", raw)
    _run(tmp_path, "d2", raw)
    for name in ("chain_0.csv", "chain_1.csv", "summary.json"):
        if (tmp_path / "d1" / name).read_bytes() != (tmp_path / "d2" / name).read_bytes():
            failures.append(f"CLI determinism {name}")
    elapsed = time.perf_counter() - t0
    record("property suites", not failures and elapsed < 60,
           "all hold" if not failures else "; ".join(sorted(set(failures))), elapsed)
