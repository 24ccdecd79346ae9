"""Finite tabular MDPs with parametric stochastic rewards.

Rewards are attached to (state, action) pairs and are received when the
action is taken.  A state may additionally carry a deterministic
``entry_reward`` that is paid on arrival (FrozenLake's goal).  Terminal
states are absorbing: they self-loop with a zero reward and their return is
zero.  Environments that put a stochastic reward *at* a
final state (the two-arm, five-state and chain examples) model that state as
an ordinary state whose single transition leads to an absorbing ``end``
state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "RewardDist",
    "Dirac",
    "Uniform",
    "Exponential",
    "GaussianMixture",
    "TabularMdp",
    "sample_transition",
    "build_two_arm",
    "build_five_state",
    "build_chain",
    "build_frozen_lake",
    "default_mixture",
    "FROZEN_LAKE_MAP",
    "LEFT",
    "DOWN",
    "RIGHT",
    "UP",
]


class RewardDist:
    """Base class of the reward distributions.

    Subclasses provide an exact quantile function and mean; sampling is by
    inverse transform unless a subclass has a cheaper exact sampler.
    """

    #: largest absolute value the distribution can produce
    bound: float = math.inf

    def quantile(self, tau):
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def is_dirac(self) -> bool:
        return False

    def sample(self, rng: np.random.Generator, size=None):
        u = rng.random(size)
        return self.quantile(u)


@dataclass(frozen=True)
class Dirac(RewardDist):
    value: float = 0.0

    @property
    def bound(self) -> float:
        return abs(self.value)

    def quantile(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.full(tau.shape, float(self.value))
        return out if out.ndim else float(out)

    @property
    def mean(self) -> float:
        return float(self.value)

    @property
    def is_dirac(self) -> bool:
        return True

    def sample(self, rng, size=None):
        # no draw: keeps the random stream aligned with zero-reward steps
        if size is None:
            return float(self.value)
        return np.full(size, float(self.value))


@dataclass(frozen=True)
class Uniform(RewardDist):
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"Uniform needs lo < hi, got ({self.lo}, {self.hi})")

    @property
    def bound(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def quantile(self, tau):
        return self.lo + (self.hi - self.lo) * np.asarray(tau, dtype=float)

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class Exponential(RewardDist):
    """``shift + Exp(scale)``, where ``scale`` is the mean before shifting."""

    scale: float
    shift: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Exponential needs mean > 0, got {self.scale}")

    def quantile(self, tau):
        return self.shift - self.scale * np.log1p(-np.asarray(tau, dtype=float))

    @property
    def mean(self) -> float:
        return self.shift + self.scale


@dataclass(frozen=True)
class GaussianMixture(RewardDist):
    """Finite mixture of normals given as ``(weight, mean, stddev)`` triples."""

    components: tuple

    def __post_init__(self):
        comps = tuple((float(w), float(m), float(s)) for w, m, s in self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        for w, _, s in comps:
            if not 0.0 <= w <= 1.0 or not s > 0:
                raise ValueError(f"bad mixture component weight={w} stddev={s}")
        if abs(sum(w for w, _, _ in comps) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        object.__setattr__(self, "components", comps)

    @property
    def mean(self) -> float:
        return sum(w * m for w, m, _ in self.components)

    @property
    def variance(self) -> float:
        mu = self.mean
        return sum(w * (s * s + (m - mu) ** 2) for w, m, s in self.components)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return sum(w * ndtr((x - m) / s) for w, m, s in self.components)

    def quantile(self, tau, tol: float = 1e-10):
        tau = np.asarray(tau, dtype=float)
        if np.any((tau <= 0) | (tau >= 1)):
            raise ValueError("mixture quantile needs tau in (0, 1)")
        lo = np.full(tau.shape, min(m - 40 * s for _, m, s in self.components))
        hi = np.full(tau.shape, max(m + 40 * s for _, m, s in self.components))
        # vectorised bisection on the CDF
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < tau
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out = 0.5 * (lo + hi)
        return out if out.ndim else float(out)

    def sample(self, rng: np.random.Generator, size=None):
        # component label, then a normal draw; much cheaper than bisection
        w = np.array([c[0] for c in self.components])
        k = np.searchsorted(np.cumsum(w)[:-1], rng.random(size), side="right")
        loc = np.array([c[1] for c in self.components])[k]
        scale = np.array([c[2] for c in self.components])[k]
        out = loc + scale * rng.standard_normal(size)
        return out if np.ndim(out) else float(out)


def default_mixture() -> GaussianMixture:
    """The bimodal reward ``0.7 N(-2, 1) + 0.3 N(3, 1)``."""
    return GaussianMixture(((0.7, -2.0, 1.0), (0.3, 3.0, 1.0)))


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP.

    Parameters
    ----------
    transition : array, shape (S, A, S)
        ``transition[x, a, y] = P(y | x, a)``.
    rewards : nested sequence of RewardDist, shape (S, A)
    terminal : bool array, shape (S,)
    gamma : float in [0, 1)
    entry_reward : float array, shape (S,), optional
        Deterministic reward paid on entering a state.
    """

    transition: np.ndarray
    rewards: tuple
    terminal: np.ndarray
    gamma: float
    start_state: int = 0
    entry_reward: np.ndarray | None = None
    state_names: tuple = ()
    action_names: tuple = ()
    r_max: float = field(init=False)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        n_states, n_actions = P.shape[:2]
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("every transition row must be a probability vector")
        rewards = tuple(tuple(row) for row in self.rewards)
        if len(rewards) != n_states or any(len(row) != n_actions for row in rewards):
            raise ValueError("rewards must be an (S, A) table")
        terminal = np.asarray(self.terminal, dtype=bool)
        if terminal.shape != (n_states,):
            raise ValueError("terminal must have one flag per state")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        entry = np.zeros(n_states) if self.entry_reward is None else np.asarray(
            self.entry_reward, dtype=float)
        for x in np.flatnonzero(terminal):
            for a in range(n_actions):
                if P[x, a, x] != 1.0:
                    raise ValueError(f"terminal state {x} must self-loop")
                r = rewards[x][a]
                if not (isinstance(r, Dirac) and r.value == 0.0):
                    raise ValueError(f"terminal state {x} must carry a Dirac(0) reward")
        if not 0 <= self.start_state < n_states or terminal[self.start_state]:
            raise ValueError("start state must be a valid non-terminal state")
        P.setflags(write=False)
        terminal.setflags(write=False)
        entry.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "terminal", terminal)
        object.__setattr__(self, "entry_reward", entry)
        r_max = max(r.bound for row in rewards for r in row)
        object.__setattr__(self, "r_max", float(r_max + np.max(np.abs(entry))))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.r_max)

    def mean_reward(self) -> np.ndarray:
        """Expected immediate reward, entry rewards included, shape (S, A)."""
        r = np.array([[d.mean for d in row] for row in self.rewards])
        return r + self.transition @ self.entry_reward

    def check_state_action(self, x: int, a: int) -> None:
        if not 0 <= x < self.n_states or not 0 <= a < self.n_actions:
            raise ValueError(f"(state, action) = ({x}, {a}) out of range")


def sample_transition(mdp: TabularMdp, x: int, a: int, rng: np.random.Generator):
    """Draw ``(reward, next_state, done)`` for taking ``a`` in ``x``."""
    mdp.check_state_action(x, a)
    if mdp.terminal[x]:
        raise ValueError(f"cannot act from terminal state {x}")
    x_next = int(rng.choice(mdp.n_states, p=mdp.transition[x, a]))
    r = float(mdp.rewards[x][a].sample(rng)) + float(mdp.entry_reward[x_next])
    return r, x_next, bool(mdp.terminal[x_next])


def _absorbing_rows(P, rewards, x):
    P[x, :, x] = 1.0
    for a in range(P.shape[1]):
        rewards[x][a] = Dirac(0.0)


def build_two_arm(n_quantiles: int, gamma: float = 0.9) -> TabularMdp:
    """Single-action MDP: x0 moves to x1 or x2 with equal probability.

    ``x1`` pays ``Uniform(0, 1)``, ``x2`` pays ``Uniform(1/N, 1 + 1/N)``; both
    then enter the absorbing ``end`` state.
    """
    if n_quantiles < 1:
        raise ValueError("n_quantiles must be >= 1")
    n = 4
    P = np.zeros((n, 1, n))
    P[0, 0, 1] = P[0, 0, 2] = 0.5
    P[1, 0, 3] = P[2, 0, 3] = 1.0
    rewards = [[Dirac(0.0)] for _ in range(n)]
    rewards[1][0] = Uniform(0.0, 1.0)
    rewards[2][0] = Uniform(1.0 / n_quantiles, 1.0 + 1.0 / n_quantiles)
    _absorbing_rows(P, rewards, 3)
    return TabularMdp(P, rewards, [False, False, False, True], gamma,
                      state_names=("x0", "x1", "x2", "end"), action_names=("a",))


def build_five_state(gamma: float = 0.9) -> TabularMdp:
    """Two routes x0 -a1-> x1 -> x3 and x0 -a2-> x2 -> x4 with exponential
    rewards at x3/x4, scaled so the discounted means at x0 are 1.2 and 1.0."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    n = 6
    P = np.zeros((n, 2, n))
    P[0, 0, 1] = P[0, 1, 2] = 1.0
    P[1, :, 3] = P[2, :, 4] = 1.0
    P[3, :, 5] = P[4, :, 5] = 1.0
    rewards = [[Dirac(0.0), Dirac(0.0)] for _ in range(n)]
    rewards[3] = [Exponential(1.2 / gamma**2)] * 2
    rewards[4] = [Exponential(1.0 / gamma**2)] * 2
    _absorbing_rows(P, rewards, 5)
    return TabularMdp(P, rewards, [False] * 5 + [True], gamma,
                      state_names=("x0", "x1", "x2", "x3", "x4", "end"),
                      action_names=("a1", "a2"))


def build_chain(gamma: float = 0.99, mixture: GaussianMixture | None = None) -> TabularMdp:
    """Six-state deterministic chain with a mixture reward at x5."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    mixture = default_mixture() if mixture is None else mixture
    n = 7
    P = np.zeros((n, 1, n))
    for k in range(6):
        P[k, 0, k + 1] = 1.0
    rewards = [[Dirac(0.0)] for _ in range(n)]
    rewards[5][0] = mixture
    _absorbing_rows(P, rewards, 6)
    return TabularMdp(P, rewards, [False] * 6 + [True], gamma,
                      state_names=tuple(f"x{k}" for k in range(6)) + ("end",),
                      action_names=("a",))


FROZEN_LAKE_MAP = ("SFFF", "FHFH", "FFFH", "HFFG")
LEFT, DOWN, RIGHT, UP = 0, 1, 2, 3
_MOVES = {LEFT: (0, -1), DOWN: (1, 0), RIGHT: (0, 1), UP: (-1, 0)}


def build_frozen_lake(gamma: float = 0.999, desc: Sequence[str] = FROZEN_LAKE_MAP) -> TabularMdp:
    """Slippery FrozenLake: the intended move and both perpendicular moves
    each happen with probability 1/3; moving off the grid stays put."""
    rows, cols = len(desc), len(desc[0])
    n = rows * cols
    P = np.zeros((n, 4, n))
    terminal = np.zeros(n, dtype=bool)
    entry = np.zeros(n)
    start = None
    for i, line in enumerate(desc):
        for j, cell in enumerate(line):
            s = i * cols + j
            terminal[s] = cell in "HG"
            entry[s] = 1.0 if cell == "G" else 0.0
            if cell == "S":
                start = s
    for s in range(n):
        if terminal[s]:
            P[s, :, s] = 1.0
            continue
        i, j = divmod(s, cols)
        for a in range(4):
            for b in ((a - 1) % 4, a, (a + 1) % 4):
                di, dj = _MOVES[b]
                ni, nj = i + di, j + dj
                if not (0 <= ni < rows and 0 <= nj < cols):
                    ni, nj = i, j
                P[s, a, ni * cols + nj] += 1.0 / 3.0
    # exact thirds so each row sums to one
    P = np.round(P * 3.0) / 3.0
    rewards = [[Dirac(0.0)] * 4 for _ in range(n)]
    return TabularMdp(P, rewards, terminal, gamma, start_state=start, entry_reward=entry,
                      state_names=tuple(f"{c}{k}" for k, c in enumerate("".join(desc))),
                      action_names=("left", "down", "right", "up"))
