"""Ground-truth oracles and the empirical checks run against them."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .agent import Estimator, TrainResult, uniform_policy
from .dist import (
    QuantileRepr,
    QuantileTable,
    bellman_sweep,
    bellman_target,
    default_taus,
    quantile_project,
    wasserstein1,
)
from .mdp import TabularMdp

__all__ = [
    "MIN_ROLLOUTS",
    "OracleDist",
    "default_horizon",
    "mc_oracle",
    "value_iteration",
    "greedy_policy",
    "q_error_curve",
    "w1_error_curve",
    "contraction_rates",
    "param_error_bound",
    "param_error_gap",
    "projected_fixed_point",
    "target_error_proxy",
]

# a Monte-Carlo oracle needs at least this many returns
MIN_ROLLOUTS = 1000


@dataclass(frozen=True, eq=False)
class OracleDist:
    """Reference return distribution of one (state, action).

    Either ``returns`` (sorted Monte-Carlo sample) or ``quantile_fn`` plus
    ``mean_value`` (analytic) is set.
    """

    state: int
    action: int | None
    returns: np.ndarray | None = None
    quantile_fn: Callable | None = None
    mean_value: float | None = None

    def __post_init__(self):
        if (self.returns is None) == (self.quantile_fn is None):
            raise ValueError("give either returns or an analytic quantile function")
        if self.returns is not None:
            r = np.sort(np.asarray(self.returns, dtype=float))
            if len(r) < MIN_ROLLOUTS:
                raise ValueError(f"need at least {MIN_ROLLOUTS} returns, got {len(r)}")
            object.__setattr__(self, "returns", r)
        elif self.mean_value is None:
            raise ValueError("analytic oracle needs its mean")

    @classmethod
    def analytic(cls, state, action, quantile_fn, mean_value) -> "OracleDist":
        return cls(state, action, quantile_fn=quantile_fn, mean_value=float(mean_value))

    @property
    def source(self) -> str:
        return "monte_carlo" if self.returns is not None else "analytic"

    @property
    def mean(self) -> float:
        if self.returns is not None:
            return float(self.returns.mean())
        return self.mean_value

    def quantiles(self, taus) -> np.ndarray:
        taus = np.asarray(taus, dtype=float)
        if self.returns is not None:
            return np.quantile(self.returns, taus)
        return np.asarray(self.quantile_fn(taus), dtype=float)

    def as_repr(self, n_quantiles: int) -> QuantileRepr:
        taus = default_taus(n_quantiles)
        return QuantileRepr(self.quantiles(taus), taus)


def default_horizon(gamma: float) -> int:
    """Steps after which the discount weight falls below 1e-6."""
    if gamma <= 0.0:
        return 1
    return int(math.ceil(math.log(1e-6) / math.log(gamma)))


def _sample_rewards(mdp, x, a, rng):
    r = np.empty(len(x))
    pairs = x * mdp.n_actions + a
    for p in np.unique(pairs):
        sel = pairs == p
        dist = mdp.rewards[p // mdp.n_actions][p % mdp.n_actions]
        r[sel] = dist.sample(rng, int(sel.sum()))
    return r


def mc_oracle(mdp: TabularMdp, policy, state: int, n_rollouts: int = 10_000,
              horizon: int | None = None, rng: np.random.Generator | None = None,
              action: int | None = None) -> OracleDist:
    """Discounted returns of ``n_rollouts`` rollouts truncated at ``horizon``.

    Parameters
    ----------
    policy : array of shape (S, A)
        Action probabilities followed after the first step.
    action : int, optional
        Forces the first action, giving the distribution of ``(state, action)``.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be positive")
    rng = np.random.default_rng() if rng is None else rng
    horizon = default_horizon(mdp.gamma) if horizon is None else int(horizon)
    policy = np.asarray(policy, dtype=float)
    cum_pi = np.cumsum(policy, axis=1)
    cum_pi[:, -1] = 1.0
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_p[..., -1] = 1.0
    if mdp.terminal[state]:
        return OracleDist(state, action, returns=np.zeros(n_rollouts))
    x = np.full(n_rollouts, state)
    alive = np.ones(n_rollouts, dtype=bool)
    returns = np.zeros(n_rollouts)
    discount = 1.0
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        xs = x[idx]
        if t == 0 and action is not None:
            a = np.full(len(idx), action)
        else:
            u = rng.random(len(idx))
            a = (u[:, None] >= cum_pi[xs]).sum(axis=1)
        r = _sample_rewards(mdp, xs, a, rng)
        u = rng.random(len(idx))
        nxt = (u[:, None] >= cum_p[xs, a]).sum(axis=1)
        returns[idx] += discount * (r + mdp.entry_reward[nxt])
        discount *= mdp.gamma
        x[idx] = nxt
        alive[idx] = ~mdp.terminal[nxt]
    return OracleDist(state, action, returns=returns)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal action values ``Q*`` by expected-value iteration."""
    r = mdp.mean_reward()
    cont = np.where(mdp.terminal, 0.0, 1.0)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        v = q.max(axis=1) * cont
        q_new = r + mdp.gamma * mdp.transition @ v
        q_new[mdp.terminal] = 0.0
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise RuntimeError("value iteration did not converge")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """One-hot policy on the argmax of ``q`` (lowest index on ties)."""
    pi = np.zeros_like(q, dtype=float)
    pi[np.arange(len(q)), np.argmax(q, axis=1)] = 1.0
    return pi


def _as_oracles(oracle) -> list:
    return [oracle] if isinstance(oracle, OracleDist) else list(oracle)


def _probe_index(result: TrainResult, oracle: OracleDist) -> int:
    if oracle.state not in result.probes:
        raise ValueError(f"state {oracle.state} was not recorded (probes {result.probes})")
    if oracle.action is None or not 0 <= oracle.action < result.snapshots.shape[2]:
        raise ValueError(f"oracle action {oracle.action} is not a recorded action")
    return result.probes.index(oracle.state)


def q_error_curve(result: TrainResult, oracle, probe: Sequence[int] | None = None) -> dict:
    """Per logged step, ``|Q_hat - Q_oracle|`` averaged over the oracles.

    ``oracle`` is one :class:`OracleDist` or a sequence of them, one per
    probed (state, action); ``probe`` optionally restricts to those states.
    Returns arrays ``step``, ``em`` and ``qem``.
    """
    oracles = [o for o in _as_oracles(oracle) if probe is None or o.state in probe]
    if not oracles:
        raise ValueError("no oracle matches the probe set")
    em = np.zeros(len(result.steps))
    qem = np.zeros(len(result.steps))
    for o in oracles:
        p = _probe_index(result, o)
        em += np.abs(result.q_em[:, p, o.action] - o.mean)
        qem += np.abs(result.q_qem[:, p, o.action] - o.mean)
    return {"step": result.steps.copy(), "em": em / len(oracles), "qem": qem / len(oracles)}


def w1_error_curve(result: TrainResult, oracle, probe: Sequence[int] | None = None) -> dict:
    """Per logged step, W1 between the learned atoms and the oracle quantiles."""
    oracles = [o for o in _as_oracles(oracle) if probe is None or o.state in probe]
    if not oracles:
        raise ValueError("no oracle matches the probe set")
    taus = result.table.taus
    out = np.zeros(len(result.steps))
    for o in oracles:
        p = _probe_index(result, o)
        ref = QuantileRepr(o.quantiles(taus), taus)
        out += [wasserstein1(QuantileRepr(s[p, o.action], taus), ref) for s in result.snapshots]
    return {"step": result.steps.copy(), "w1": out / len(oracles)}


def _moments(table: QuantileTable, live) -> tuple[np.ndarray, np.ndarray]:
    atoms = table.atoms[live]
    return atoms.mean(axis=-1), atoms.var(axis=-1)


def _ratios(gaps):
    gaps = np.asarray(gaps)
    prev, cur = gaps[:-1], gaps[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(prev > 0, cur / np.where(prev > 0, prev, 1.0), 0.0)
    return r


def contraction_rates(mdp: TabularMdp, n_quantiles: int, sweeps: int,
                      rng: np.random.Generator, policy=None, reward_grid: int = 32,
                      low: float = -10.0, high: float = 10.0, tables=None) -> dict:
    """Iterate the projected backup from two random tables.

    Returns ``mean_gap`` and ``var_gap`` (sup over non-terminal entries, one
    value for the initial tables and one per sweep) together with the
    per-sweep ratios ``mean_rates`` and ``var_rates``; a ratio whose
    previous gap is already zero is reported as 0.
    """
    policy = uniform_policy(mdp) if policy is None else np.asarray(policy, dtype=float)
    if tables is None:
        tables = [QuantileTable.uniform_init(mdp, n_quantiles, rng, low, high) for _ in range(2)]
    t1, t2 = tables
    live = ~mdp.terminal
    mean_gap, var_gap = [], []
    for k in range(sweeps + 1):
        if k:
            t1 = bellman_sweep(mdp, t1, policy, reward_grid)
            t2 = bellman_sweep(mdp, t2, policy, reward_grid)
        m1, v1 = _moments(t1, live)
        m2, v2 = _moments(t2, live)
        mean_gap.append(float(np.max(np.abs(m1 - m2))))
        var_gap.append(float(np.max(np.abs(v1 - v2))))
    return {
        "mean_gap": np.array(mean_gap),
        "var_gap": np.array(var_gap),
        "mean_rates": _ratios(mean_gap),
        "var_rates": _ratios(var_gap),
    }


def param_error_bound(r_max: float, n_quantiles: int, gamma: float) -> float:
    """Worst-case mean shift caused by the quantile parameterization."""
    return 2.0 * r_max / (n_quantiles * (1.0 - gamma))


def _require_bounded(mdp):
    if not mdp.bounded:
        raise ValueError("rewards are unbounded; the parameterization bound does not apply")


def projected_fixed_point(mdp: TabularMdp, n_quantiles: int, policy=None,
                          reward_grid: int = 1024, max_sweeps: int = 10_000,
                          tol: float = 1e-12) -> QuantileTable:
    """Fixed point of quantile projection after the backup, from a zero table."""
    policy = uniform_policy(mdp) if policy is None else np.asarray(policy, dtype=float)
    table = QuantileTable.zeros(mdp.n_states, mdp.n_actions, n_quantiles)
    for _ in range(max_sweeps):
        nxt = bellman_sweep(mdp, table, policy, reward_grid)
        if np.max(np.abs(nxt.atoms - table.atoms)) <= tol:
            return nxt
        table = nxt
    raise RuntimeError("projected backup did not converge")


def param_error_gap(mdp: TabularMdp, table: QuantileTable, n_quantiles: int | None = None,
                    policy=None, reward_grid: int = 1024) -> float:
    """Largest mean change the projection causes on a one-step target.

    For every non-terminal (x, a) the backup of ``table`` is computed with a
    fine reward grid and projected onto ``n_quantiles`` levels.
    """
    _require_bounded(mdp)
    n = table.n_quantiles if n_quantiles is None else n_quantiles
    taus = default_taus(n)
    policy = uniform_policy(mdp) if policy is None else np.asarray(policy, dtype=float)
    gap = 0.0
    for x in np.flatnonzero(~mdp.terminal):
        for a in range(mdp.n_actions):
            target = bellman_target(mdp, table, policy, x, a, reward_grid)
            projected = quantile_project(target, taus)
            gap = max(gap, abs(float(projected.atoms.mean()) - target.mean))
    return gap


def target_error_proxy(q_errors, mdp: TabularMdp, n_quantiles: int) -> np.ndarray:
    """Total Q-error minus the parameterization ceiling.

    The two target-approximation terms cannot be measured separately, so
    their sum is approximated by what the parameterization bound cannot
    explain.  Negative values mean the bound alone covers the error.
    """
    _require_bounded(mdp)
    return np.asarray(q_errors, dtype=float) - param_error_bound(mdp.r_max, n_quantiles, mdp.gamma)
