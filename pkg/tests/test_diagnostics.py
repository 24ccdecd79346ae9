import math

import numpy as np
import pytest
from scipy import integrate

from qem.agent import Estimator, TrainConfig, TrainResult, run_training
from qem.dist import QuantileTable, default_taus
from qem.diagnostics import (
    OracleDist,
    contraction_rates,
    default_horizon,
    greedy_policy,
    mc_oracle,
    param_error_bound,
    param_error_gap,
    projected_fixed_point,
    q_error_curve,
    target_error_proxy,
    value_iteration,
    w1_error_curve,
)
from qem.experiments import PRESETS
from qem.mdp import (
    Dirac,
    Exponential,
    TabularMdp,
    Uniform,
    build_chain,
    build_five_state,
    build_frozen_lake,
    build_two_arm,
    default_mixture,
)
from qem.agent import uniform_policy


def result_from_atoms(atoms, probes=(0,), config=None):
    """A one-snapshot TrainResult holding the given (S, A, N) table."""
    atoms = np.asarray(atoms, dtype=float)
    table = QuantileTable(atoms)
    snaps = atoms[list(probes)][None]
    cfg = config or TrainConfig(n_quantiles=atoms.shape[2])
    return TrainResult(
        steps=np.array([0]), probes=tuple(probes), snapshots=snaps,
        q_em=Estimator("em").mean(snaps, table.taus),
        q_qem=Estimator("qem", 3, cfg.weights).mean(snaps, table.taus),
        action_counts=np.zeros((1, atoms.shape[1]), dtype=int), table=table, config=cfg)


FIVE_ORACLES = [OracleDist.analytic(0, 0, Exponential(1.2).quantile, 1.2),
                OracleDist.analytic(0, 1, Exponential(1.0).quantile, 1.0)]


# ---------- MDP-level invariants ----------

@pytest.mark.parametrize("mdp", [build_two_arm(8), build_five_state(), build_chain(), build_frozen_lake()])
def test_transition_rows_sum_to_one(mdp):
    assert np.max(np.abs(mdp.transition.sum(axis=2) - 1.0)) <= 1e-12


@pytest.mark.parametrize("dist", [Dirac(0.3), Uniform(-1.0, 2.0), Exponential(1.5, 0.5), default_mixture()])
def test_mean_by_quantile_integration(dist):
    taus = default_taus(100_000)
    assert float(np.mean(dist.quantile(taus))) == pytest.approx(dist.mean, abs=1e-3)


# ---------- oracles ----------

def test_oracle_validation():
    with pytest.raises(ValueError):
        OracleDist(0, 0, returns=np.zeros(10))
    with pytest.raises(ValueError):
        OracleDist(0, 0)
    o = OracleDist(0, 0, returns=np.arange(1001.0))
    assert o.source == "monte_carlo" and o.quantiles(0.5) == 500.0
    assert FIVE_ORACLES[0].source == "analytic"


def test_default_horizon():
    assert default_horizon(0.9) == math.ceil(math.log(1e-6) / math.log(0.9))
    assert default_horizon(0.0) == 1


def test_mc_gamma_zero_returns_first_reward(rng):
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 2] = 1.0
    mdp = TabularMdp(P, [[Dirac(2.0)], [Dirac(5.0)], [Dirac(0.0)]], [False, False, True], 0.0)
    o = mc_oracle(mdp, np.ones((3, 1)), 0, 2000, rng=rng)
    np.testing.assert_array_equal(o.returns, 2.0)


def test_mc_two_arm_mean(rng):
    mdp = build_two_arm(4, 0.999)
    o = mc_oracle(mdp, np.ones((4, 1)), 0, 10_000, rng=rng)
    n, g = 4, 0.999
    assert o.mean == pytest.approx(g / 2 * (0.5 + (0.5 + 1 / n)), abs=0.01)


def test_mc_five_state_means(rng):
    mdp = build_five_state()
    pol = uniform_policy(mdp)
    assert mc_oracle(mdp, pol, 0, 10_000, rng=rng, action=0).mean == pytest.approx(1.2, abs=0.05)
    assert mc_oracle(mdp, pol, 0, 10_000, rng=rng, action=1).mean == pytest.approx(1.0, abs=0.05)


def test_mc_chain_matches_scaled_mixture(rng):
    mdp = build_chain(0.99)
    o = mc_oracle(mdp, np.ones((7, 1)), 0, 20_000, rng=rng)
    taus = np.array([0.05, 0.25, 0.5, 0.9])
    want = 0.99**5 * default_mixture().quantile(taus)
    np.testing.assert_allclose(o.quantiles(taus), want, atol=0.15)
    assert o.mean == pytest.approx(0.99**5 * -0.5, abs=0.05)


def _chain_quantile_change():
    mdp = build_chain(0.99)
    pol = np.ones((7, 1))
    a = mc_oracle(mdp, pol, 0, 10_000, rng=np.random.default_rng(0))
    b = mc_oracle(mdp, pol, 0, 20_000, rng=np.random.default_rng(1))
    taus = np.linspace(0.1, 0.9, 81)
    qa, qb = a.quantiles(taus), b.quantiles(taus)
    return taus, qa, qb


@pytest.mark.xfail(strict=True, reason="low-density valley of the bimodal return: the MC "
                   "quantile standard error at 1e4 rollouts exceeds 2% of the 10-90% spread")
def test_mc_quantiles_stable_two_percent():
    taus, qa, qb = _chain_quantile_change()
    spread = qb[-1] - qb[0]
    assert np.max(np.abs(qa - qb)) < 0.02 * spread


def test_mc_quantiles_within_sampling_error():
    taus, qa, qb = _chain_quantile_change()
    dens = np.gradient(taus, qb)
    # standard error of the difference of two sample quantiles (n = 1e4 and 2e4)
    se = np.sqrt(taus * (1 - taus) * (1 / 10_000 + 1 / 20_000)) / dens
    assert np.all(np.abs(qa - qb) < 5 * se + 1e-3)


def test_value_iteration_matches_policy_solve():
    mdp = build_frozen_lake()
    q = value_iteration(mdp)
    pi = greedy_policy(q)
    # exact policy evaluation by a linear solve
    live = ~mdp.terminal
    P = np.einsum("xa,xay->xy", pi, mdp.transition)
    r = (pi * mdp.mean_reward()).sum(axis=1)
    A = np.eye(16) - mdp.gamma * P * live[None, :]
    v = np.linalg.solve(A[np.ix_(live, live)], r[live])
    np.testing.assert_allclose(q.max(axis=1)[live], v, atol=1e-6)
    assert np.argmax(q[0]) == 0  # LEFT at the start
    np.testing.assert_allclose(value_iteration(build_five_state())[0], [1.2, 1.0], atol=1e-9)


# ---------- curves ----------

def test_q_error_perfect_and_zero_table():
    taus = default_taus(32)
    atoms = np.zeros((6, 2, 32))
    atoms[0, 0] = Exponential(1.2).quantile(taus)
    atoms[0, 1] = Exponential(1.0).quantile(taus)
    perfect = result_from_atoms(atoms)
    w = w1_error_curve(perfect, FIVE_ORACLES)
    assert w["w1"][0] == pytest.approx(0.0, abs=1e-12)
    zero = result_from_atoms(np.zeros((6, 2, 32)))
    c = q_error_curve(zero, FIVE_ORACLES[0])
    assert c["em"][0] == pytest.approx(1.2) and c["qem"][0] == pytest.approx(1.2)
    w = w1_error_curve(zero, FIVE_ORACLES[0])
    assert w["w1"][0] == pytest.approx(np.mean(np.abs(Exponential(1.2).quantile(taus))))


def test_q_error_exact_quantiles_em_small():
    taus = default_taus(256)
    atoms = np.zeros((6, 2, 256))
    atoms[0, 0] = Exponential(1.2).quantile(taus)
    c = q_error_curve(result_from_atoms(atoms), FIVE_ORACLES[0])
    assert c["em"][0] < 0.02


def test_curves_missing_probe():
    res = result_from_atoms(np.zeros((6, 2, 8)))
    with pytest.raises(ValueError):
        q_error_curve(res, OracleDist.analytic(3, 0, Exponential(1.0).quantile, 1.0))
    with pytest.raises(ValueError):
        w1_error_curve(res, FIVE_ORACLES, probe=(4,))
    with pytest.raises(ValueError):
        q_error_curve(res, OracleDist.analytic(0, None, Exponential(1.0).quantile, 1.0))


def test_curves_on_training_run():
    res = run_training(build_five_state(), TrainConfig(n_quantiles=16, steps=2000, log_every=500,
                                                       mode="evaluation"))
    c = q_error_curve(res, FIVE_ORACLES)
    w = w1_error_curve(res, FIVE_ORACLES)
    assert len(c["step"]) == len(w["w1"]) == 5
    assert w["w1"][-1] < w["w1"][0]


# ---------- contraction ----------

def test_contraction_identical_tables(rng):
    mdp = build_two_arm(8)
    t = QuantileTable.uniform_init(mdp, 8, rng)
    out = contraction_rates(mdp, 8, 3, rng, tables=(t, t.copy()))
    np.testing.assert_array_equal(out["mean_gap"], 0.0)
    np.testing.assert_array_equal(out["var_rates"], 0.0)


def test_contraction_gamma_zero(rng):
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 2] = 1.0
    mdp = TabularMdp(P, [[Uniform(0, 1)], [Uniform(2, 3)], [Dirac(0.0)]], [False, False, True], 0.0)
    out = contraction_rates(mdp, 16, 2, rng)
    assert out["mean_gap"][0] > 0
    np.testing.assert_allclose(out["mean_gap"][1:], 0.0, atol=1e-15)
    np.testing.assert_allclose(out["var_gap"][1:], 0.0, atol=1e-15)


def test_contraction_chain_small(rng):
    mdp = build_chain(0.99)
    out = contraction_rates(mdp, 64, 10, rng)
    assert np.all(out["mean_rates"][1:] <= 0.99 + 0.01)
    assert np.all(out["var_rates"][1:] <= 0.99**2 + 0.01)


# ---------- parameterization bound ----------

def test_param_gap_two_arm_within_bound():
    mdp = build_two_arm(128, 0.9)
    table = projected_fixed_point(mdp, 128)
    gap = param_error_gap(mdp, table)
    bound = param_error_bound(mdp.r_max, 128, 0.9)
    assert bound == pytest.approx(2 * (1 + 1 / 128) / (128 * 0.1))
    assert gap <= bound


def test_param_gap_not_increasing_with_n():
    gaps = []
    for n in (16, 32, 64):
        mdp = build_two_arm(n, 0.9)
        gaps.append(param_error_gap(mdp, projected_fixed_point(mdp, n)))
    assert gaps[1] <= gaps[0] and gaps[2] <= gaps[1]


def test_param_gap_dirac_chain_zero():
    P = np.zeros((4, 1, 4))
    for k in range(3):
        P[k, 0, k + 1] = 1.0
    P[3, 0, 3] = 1.0
    rewards = [[Dirac(1.0)], [Dirac(-2.0)], [Dirac(0.5)], [Dirac(0.0)]]
    mdp = TabularMdp(P, rewards, [False, False, False, True], 0.9)
    table = projected_fixed_point(mdp, 8)
    assert param_error_gap(mdp, table) == pytest.approx(0.0, abs=1e-15)


def test_param_gap_refuses_unbounded():
    mdp = build_five_state()
    with pytest.raises(ValueError):
        param_error_gap(mdp, QuantileTable.zeros(6, 2, 8))
    with pytest.raises(ValueError):
        target_error_proxy([0.1], mdp, 8)


def test_target_error_proxy():
    mdp = build_two_arm(32, 0.9)
    bound = param_error_bound(mdp.r_max, 32, 0.9)
    np.testing.assert_allclose(target_error_proxy([1.0, bound], mdp, 32), [1.0 - bound, 0.0])


# ---------- end-to-end variance reduction ----------

def test_five_state_variance_reduction_20_seeds():
    mdp = build_five_state()
    em, qem = [], []
    for seed in range(20):
        cfg = TrainConfig.from_json(dict(PRESETS["five-state"]["train"], estimator="qem", seed=seed))
        res = run_training(mdp, cfg)
        em.append(res.q_em[-1, 0, 0])
        qem.append(res.q_qem[-1, 0, 0])
    assert np.var(qem) < np.var(em)
