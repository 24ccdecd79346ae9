"""Tabular quantile-regression TD learning (QDRL) and its QEM variant."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cfe import TAIL_WEIGHTS, WeightSpec, mean_weights, model4_coefficients
from .dist import QuantileRepr, QuantileTable, WeightedSample, default_taus, left_truncated_variance
from .mdp import TabularMdp

__all__ = [
    "Estimator",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "q_value",
    "select_action",
    "qr_update",
    "qemrl_step",
    "run_training",
    "epsilon_at",
    "dltv_coefficient",
    "uniform_policy",
]


class TrainingError(RuntimeError):
    """A numerical failure inside a training run, with the offending site."""

    def __init__(self, message, state=None, action=None, step=None):
        super().__init__(f"{message} at state={state} action={action} step={step}")
        self.state, self.action, self.step = state, action, step


@dataclass(frozen=True)
class Estimator:
    """Mean estimator applied to a set of quantile atoms.

    ``kind`` is ``"em"`` (plain average) or ``"qem"`` (intercept of the
    Cornish-Fisher WLS fit of the given ``order`` and ``weights``).
    """

    kind: str = "em"
    order: int = 3
    weights: WeightSpec = TAIL_WEIGHTS

    def __post_init__(self):
        if self.kind not in ("em", "qem"):
            raise ValueError(f"unknown estimator {self.kind!r}")

    def _rows(self, taus):
        return mean_weights(taus, self.weights, self.order)

    def mean(self, atoms, taus) -> np.ndarray | float:
        """Estimate along the last axis of ``atoms``."""
        atoms = np.asarray(atoms, dtype=float)
        if self.kind == "em":
            return atoms.mean(axis=-1)
        return atoms @ self._rows(taus)[0]

    def spread(self, atoms, taus) -> np.ndarray:
        """Exploration scale: left-truncated std (EM) or the fitted sigma (QEM)."""
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        if self.kind == "em":
            return np.sqrt([left_truncated_variance(QuantileRepr(row, taus)) for row in atoms])
        coef = atoms @ self._rows(taus).T
        if self.order == 4:
            coef = model4_coefficients(coef)
        return np.abs(coef[:, 1])


def uniform_policy(mdp: TabularMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run.

    Defaults follow the tabular FrozenLake table (learning rates 0.05,
    0.025, 0.0125 switching at 50K and 100K steps, atoms initialised from
    ``U(-0.5, 0.5)``, 128 quantiles, 150K steps, ``eps_t = 0.9^(t // 100)``)
    except for ``weights``, which defaults to the tail weighting; the
    FrozenLake preset in :mod:`qem.experiments` switches it to the middle band.
    """

    estimator: str = "em"
    qem_order: int = 3
    weights: WeightSpec = TAIL_WEIGHTS
    mode: str = "control"
    policy: tuple | None = None
    exploration: str = "epsilon_greedy"
    epsilon_base: float = 0.9
    epsilon_period: int = 100
    dltv_c: float = 50.0
    n_quantiles: int = 128
    steps: int = 150_000
    lr_schedule: tuple = ((0, 0.05), (50_000, 0.025), (100_000, 0.0125))
    gamma: float | None = None
    init_low: float = -0.5
    init_high: float = 0.5
    seed: int = 0
    log_every: int = 500
    episode_cap: int = 200
    probes: tuple | None = None

    def __post_init__(self):
        if self.mode not in ("control", "evaluation"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.exploration not in ("epsilon_greedy", "dltv"):
            raise ValueError(f"unknown exploration {self.exploration!r}")
        if self.steps < 0 or self.n_quantiles < 1 or self.log_every < 1:
            raise ValueError("steps, n_quantiles and log_every must be positive")
        sched = tuple((int(s), float(r)) for s, r in self.lr_schedule)
        if not sched or sched[0][0] != 0 or any(r <= 0 for _, r in sched):
            raise ValueError("lr schedule must start at step 0 with positive rates")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("lr schedule thresholds must increase")
        object.__setattr__(self, "lr_schedule", sched)
        if not isinstance(self.weights, WeightSpec):
            object.__setattr__(self, "weights", WeightSpec.from_json(self.weights))
        Estimator(self.estimator)

    @property
    def target_estimator(self) -> Estimator:
        return Estimator(self.estimator, self.qem_order, self.weights)

    def lr_at(self, t: int) -> float:
        rate = self.lr_schedule[0][1]
        for threshold, r in self.lr_schedule:
            if t >= threshold:
                rate = r
        return rate

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_json()
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        if self.policy is not None:
            d["policy"] = [list(row) for row in self.policy]
        if self.probes is not None:
            d["probes"] = list(self.probes)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "weights" in data:
            data["weights"] = WeightSpec.from_json(data["weights"])
        for key in ("policy", "probes", "lr_schedule"):
            if data.get(key) is not None:
                data[key] = tuple(tuple(r) if isinstance(r, list) else r for r in data[key])
        return cls(**data)


@dataclass
class TrainResult:
    """Logged curves of one run.

    ``snapshots[k, p, a]`` holds the atoms of (probe p, action a) at
    ``steps[k]``; ``action_counts[k]`` the cumulative actions taken.
    """

    steps: np.ndarray
    probes: tuple
    snapshots: np.ndarray
    q_em: np.ndarray
    q_qem: np.ndarray
    action_counts: np.ndarray
    table: QuantileTable
    config: TrainConfig
    episodes: int = 0

    def greedy_action(self, x: int, estimator: Estimator | None = None) -> int:
        est = estimator or self.config.target_estimator
        return int(np.argmax(est.mean(self.table.atoms[x], self.table.taus)))

    def rows(self):
        """One row per (step, probe, action): step, state, action, q_em, q_qem."""
        for k, step in enumerate(self.steps):
            for p, x in enumerate(self.probes):
                for a in range(self.snapshots.shape[2]):
                    yield (int(step), int(x), a, float(self.q_em[k, p, a]),
                           float(self.q_qem[k, p, a]))


def q_value(table: QuantileTable, x: int, a: int, estimator: Estimator) -> float:
    return float(estimator.mean(table.atoms[x, a], table.taus))


def epsilon_at(t: int, config: TrainConfig) -> float:
    return config.epsilon_base ** (t // config.epsilon_period)


def dltv_coefficient(t: float, c: float) -> float:
    """Decaying bonus scale ``c * sqrt(log t / t)``; zero for t <= 1."""
    if t <= 1:
        return 0.0
    return c * math.sqrt(math.log(t) / t)


def select_action(table: QuantileTable, x: int, t: int, config: TrainConfig,
                  rng: np.random.Generator) -> int:
    """Behaviour action in control mode; ties go to the lowest index."""
    est = config.target_estimator
    atoms = table.atoms[x]
    n_actions = atoms.shape[0]
    if config.exploration == "epsilon_greedy":
        if rng.random() < epsilon_at(t, config):
            return int(rng.integers(n_actions))
        return int(np.argmax(est.mean(atoms, table.taus)))
    score = est.mean(atoms, table.taus) + dltv_coefficient(t, config.dltv_c) * est.spread(atoms, table.taus)
    return int(np.argmax(score))


def _pinball_step(theta, taus, sorted_target, target_cdf, lr):
    # g_i = P(target < theta_i) - tau_i; ties count as not-below
    below = np.searchsorted(sorted_target, theta, side="left")
    frac = target_cdf[below]
    return theta - lr * (frac - taus)


def qr_update(repr: QuantileRepr, target: WeightedSample, lr: float) -> QuantileRepr:
    """One pinball-loss subgradient step of every atom toward the target."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    order = np.argsort(target.values, kind="stable")
    sorted_target = target.values[order]
    cdf = np.concatenate(([0.0], np.cumsum(target.weights[order])))
    new = _pinball_step(repr.atoms, repr.taus, sorted_target, cdf, lr)
    return QuantileRepr(new, repr.taus)


class _Runner:
    """Holds the per-run constants so the step loop stays cheap."""

    def __init__(self, mdp: TabularMdp, config: TrainConfig):
        self.mdp = mdp
        self.config = config
        self.gamma = mdp.gamma if config.gamma is None else float(config.gamma)
        self.est = config.target_estimator
        self.taus = default_taus(config.n_quantiles)
        if self.est.kind == "qem":
            try:
                self.qem_row = self.est._rows(self.taus)[0]
            except ValueError as exc:
                raise TrainingError(f"QEM fit unavailable ({exc})") from exc
        self.cum_p = np.cumsum(mdp.transition, axis=2)
        self.cum_p[..., -1] = 1.0
        if config.policy is not None:
            self.policy = np.asarray(config.policy, dtype=float)
        else:
            self.policy = uniform_policy(mdp)
        self.cum_pi = np.cumsum(self.policy, axis=1)
        self.cum_pi[:, -1] = 1.0
        self.uniform_cdf = np.arange(config.n_quantiles + 1) / config.n_quantiles

    def greedy(self, atoms_x):
        if self.est.kind == "em":
            return int(np.argmax(atoms_x.sum(axis=1)))
        return int(np.argmax(atoms_x @ self.qem_row))

    def draw_policy(self, x, rng):
        return int(np.searchsorted(self.cum_pi[x], rng.random(), side="right"))


def qemrl_step(table: QuantileTable, transition, t: int, config: TrainConfig,
               rng: np.random.Generator, gamma: float | None = None, _runner=None) -> int | None:
    """Apply one TD update for ``(x, a, r, x_next, done)`` in place.

    Returns the bootstrap action ``a*`` (``None`` on terminal transitions).
    """
    x, a, r, x_next, done = transition
    if gamma is None:
        gamma = _runner.gamma if _runner is not None else config.gamma
        if gamma is None:
            raise ValueError("discount factor not given")
    lr = config.lr_at(t)
    theta = table.atoms[x, a]
    if done:
        table.atoms[x, a] = _pinball_step(theta, table.taus, np.array([r]), np.array([0.0, 1.0]), lr)
        return None
    if config.mode == "evaluation":
        if _runner is not None:
            a_star = _runner.draw_policy(x_next, rng)
        else:
            pi = np.asarray(config.policy, dtype=float)[x_next]
            a_star = int(rng.choice(len(pi), p=pi))
    elif _runner is not None:
        a_star = _runner.greedy(table.atoms[x_next])
    else:
        est = config.target_estimator
        a_star = int(np.argmax(est.mean(table.atoms[x_next], table.taus)))
    target = np.sort(r + gamma * table.atoms[x_next, a_star])
    n = len(target)
    cdf = _runner.uniform_cdf if _runner is not None else np.arange(n + 1) / n
    table.atoms[x, a] = _pinball_step(theta, table.taus, target, cdf, lr)
    return a_star


def run_training(mdp: TabularMdp, config: TrainConfig) -> TrainResult:
    """Episodic TD learning from the start state; deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    runner = _Runner(mdp, config)
    if config.mode == "evaluation" and config.policy is None:
        config = replace(config, policy=tuple(map(tuple, runner.policy)))
    table = QuantileTable.uniform_init(mdp, config.n_quantiles, rng,
                                       config.init_low, config.init_high)
    probes = (mdp.start_state,) if config.probes is None else tuple(config.probes)
    diag_qem = Estimator("qem", config.qem_order, config.weights)
    diag_em = Estimator("em")
    log_steps, snaps, counts = [], [], []
    action_counts = np.zeros(mdp.n_actions, dtype=np.int64)

    def log(step):
        log_steps.append(step)
        snaps.append(table.atoms[list(probes)].copy())
        counts.append(action_counts.copy())

    log(0)
    x = mdp.start_state
    ep_len = 0
    episodes = 0
    for t in range(config.steps):
        if config.mode == "control":
            a = select_action(table, x, t, config, rng)
        else:
            a = runner.draw_policy(x, rng)
        action_counts[a] += 1
        x_next = int(np.searchsorted(runner.cum_p[x, a], rng.random(), side="right"))
        r = float(mdp.rewards[x][a].sample(rng)) + float(mdp.entry_reward[x_next])
        done = bool(mdp.terminal[x_next])
        qemrl_step(table, (x, a, r, x_next, done), t, config, rng, runner.gamma, runner)
        ep_len += 1
        if done or ep_len >= config.episode_cap:
            x, ep_len = mdp.start_state, 0
            episodes += 1
        else:
            x = x_next
        if (t + 1) % config.log_every == 0 or t + 1 == config.steps:
            log(t + 1)
    snapshots = np.stack(snaps)
    taus = table.taus
    try:
        q_qem = diag_qem.mean(snapshots, taus)
    except ValueError as exc:
        if config.estimator == "qem":
            raise TrainingError(f"singular QEM fit ({exc})", probes[0], None, log_steps[-1]) from exc
        # too few atoms for the diagnostic fit
        q_qem = np.full(snapshots.shape[:-1], np.nan)
    return TrainResult(
        steps=np.asarray(log_steps),
        probes=probes,
        snapshots=snapshots,
        q_em=diag_em.mean(snapshots, taus),
        q_qem=q_qem,
        action_counts=np.stack(counts),
        table=table,
        config=config,
        episodes=episodes,
    )
