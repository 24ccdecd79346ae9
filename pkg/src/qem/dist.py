"""Return-distribution representations and the operators acting on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp

__all__ = [
    "default_taus",
    "QuantileRepr",
    "CategoricalRepr",
    "WeightedSample",
    "QuantileTable",
    "quantile_project",
    "categorical_project",
    "bellman_target",
    "bellman_sweep",
    "wasserstein1",
    "em_mean",
    "left_truncated_variance",
]

# cumulative weights closer than this to a quantile level count as a jump point
JUMP_TOL = 1e-12


def default_taus(n: int) -> np.ndarray:
    """Midpoint grid ``(2i - 1) / (2n)``, i = 1..n."""
    if n < 1:
        raise ValueError("need at least one quantile level")
    return (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)


@dataclass(frozen=True, eq=False)
class QuantileRepr:
    """N equally weighted atoms attached to quantile levels.

    Atoms are not required to be sorted, so quantile crossing is
    representable.
    """

    atoms: np.ndarray
    taus: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        taus = np.asarray(self.taus, dtype=float)
        if atoms.ndim != 1 or atoms.shape != taus.shape:
            raise ValueError("atoms and taus must be 1-d arrays of equal length")
        if np.any((taus <= 0) | (taus >= 1)) or np.any(np.diff(taus) <= 0):
            raise ValueError("taus must be strictly increasing inside (0, 1)")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "taus", taus)

    @classmethod
    def from_atoms(cls, atoms) -> "QuantileRepr":
        atoms = np.asarray(atoms, dtype=float)
        return cls(atoms, default_taus(len(atoms)))

    @property
    def n(self) -> int:
        return len(self.atoms)

    def as_sample(self) -> "WeightedSample":
        return WeightedSample.uniform(self.atoms)


@dataclass(frozen=True, eq=False)
class CategoricalRepr:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be non-negative and sum to one")

    @property
    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))


@dataclass(frozen=True, eq=False)
class WeightedSample:
    """A discrete distribution: ``values`` with probability ``weights``."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        weights = np.asarray(self.weights)
        if values.dtype != object:
            values = values.astype(float)
            weights = weights.astype(float)
        if values.ndim != 1 or values.shape != weights.shape:
            raise ValueError("values and weights must be 1-d arrays of equal length")
        if len(values) and (np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > 1e-12):
            raise ValueError("weights must be non-negative and sum to one")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, values) -> "WeightedSample":
        values = np.asarray(values)
        n = len(values)
        if values.dtype == object:
            from fractions import Fraction
            return cls(values, np.array([Fraction(1, n)] * n, dtype=object))
        return cls(values, np.full(n, 1.0 / n) if n else np.zeros(0))

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.weights))

    @property
    def variance(self) -> float:
        mu = self.mean
        return float(np.dot((self.values - mu) ** 2, self.weights))


class QuantileTable:
    """Quantile atoms for every (state, action), sharing one tau grid.

    ``atoms`` has shape (S, A, N).  Entries of terminal states stay zero.
    """

    def __init__(self, atoms, taus=None, terminal=None):
        self.atoms = np.array(atoms, dtype=float)
        if self.atoms.ndim != 3:
            raise ValueError("atoms must have shape (S, A, N)")
        n = self.atoms.shape[2]
        self.taus = default_taus(n) if taus is None else np.asarray(taus, dtype=float)
        if self.taus.shape != (n,):
            raise ValueError("one tau per atom")
        if terminal is not None:
            self.atoms[np.asarray(terminal, dtype=bool)] = 0.0

    @classmethod
    def zeros(cls, n_states, n_actions, n_quantiles, taus=None):
        return cls(np.zeros((n_states, n_actions, n_quantiles)), taus)

    @classmethod
    def uniform_init(cls, mdp: TabularMdp, n_quantiles: int, rng: np.random.Generator,
                     low: float = -0.5, high: float = 0.5, taus=None):
        atoms = rng.uniform(low, high, size=(mdp.n_states, mdp.n_actions, n_quantiles))
        return cls(atoms, taus, terminal=mdp.terminal)

    @property
    def n_quantiles(self) -> int:
        return self.atoms.shape[2]

    def __getitem__(self, key) -> QuantileRepr:
        x, a = key
        return QuantileRepr(self.atoms[x, a].copy(), self.taus)

    def copy(self) -> "QuantileTable":
        return QuantileTable(self.atoms.copy(), self.taus.copy())


def quantile_project(target: WeightedSample, taus) -> QuantileRepr:
    """Atoms ``F^{-1}(tau_i)`` of the target's CDF.

    Where ``tau_i`` coincides with an accumulated weight (a flat piece of the
    CDF) the right end of the flat piece is used, i.e. ``inf{x : F(x) > tau}``;
    elsewhere the usual ``inf{x : F(x) >= tau}``.  Object arrays of
    ``fractions.Fraction`` are handled exactly.
    """
    values, weights = target.values, target.weights
    if len(values) == 0:
        raise ValueError("cannot project an empty sample")
    exact = values.dtype == object
    keep = weights > 0
    values, weights = values[keep], weights[keep]
    order = np.argsort(values, kind="stable")
    values, cum = values[order], np.cumsum(weights[order])
    taus_arr = np.asarray(taus, dtype=object if exact else float)
    tol = 0 if exact else JUMP_TOL
    idx = np.searchsorted(cum, taus_arr - tol, side="left")
    idx = np.minimum(idx, len(values) - 1)
    on_jump = np.abs(cum[idx] - taus_arr) <= tol
    idx = np.minimum(idx + on_jump.astype(int), len(values) - 1)
    atoms = values[idx]
    if exact:
        return _ExactRepr(atoms, taus_arr)
    return QuantileRepr(atoms, np.asarray(taus, dtype=float))


class _ExactRepr(QuantileRepr):
    # keeps rational atoms un-coerced for symbolic checks
    def __post_init__(self):
        pass


def categorical_project(target: WeightedSample, support) -> CategoricalRepr:
    """Split each value's mass between its two neighbouring support points."""
    z = np.asarray(support, dtype=float)
    if len(z) < 2:
        raise ValueError("support needs at least two points")
    dz = z[1] - z[0]
    if not np.allclose(np.diff(z), dz, rtol=1e-9, atol=0):
        raise ValueError("support must be evenly spaced")
    w = np.clip(np.asarray(target.values, dtype=float), z[0], z[-1])
    pos = (w - z[0]) / dz
    lower = np.clip(np.floor(pos).astype(int), 0, len(z) - 2)
    upper_frac = np.clip(pos - lower, 0.0, 1.0)
    probs = np.zeros(len(z))
    np.add.at(probs, lower, target.weights * (1.0 - upper_frac))
    np.add.at(probs, lower + 1, target.weights * upper_frac)
    return CategoricalRepr(z, probs)


def reward_grid_values(dist, k: int) -> np.ndarray:
    """Quantiles of a reward distribution on the midpoint grid of size k."""
    if dist.is_dirac:
        return np.array([dist.mean])
    return np.atleast_1d(np.asarray(dist.quantile(default_taus(k)), dtype=float))


def bellman_target(mdp: TabularMdp, table, policy, x: int, a: int,
                   reward_grid: int = 32) -> WeightedSample:
    """Exact tabular distributional Bellman target at ``(x, a)``.

    Parameters
    ----------
    table : QuantileTable or array of shape (S, A, N)
    policy : array of shape (S, A)
        Action probabilities at the successor states.
    reward_grid : int
        Continuous rewards are replaced by this many equally weighted
        quantiles; Dirac rewards use their single value.
    """
    atoms = table.atoms if isinstance(table, QuantileTable) else np.asarray(table, dtype=float)
    policy = np.asarray(policy, dtype=float)
    mdp.check_state_action(x, a)
    rk = reward_grid_values(mdp.rewards[x][a], reward_grid)
    n_r = len(rk)
    values, weights = [], []
    for y in np.flatnonzero(mdp.transition[x, a]):
        p = mdp.transition[x, a, y]
        shift = rk + mdp.entry_reward[y]
        if mdp.terminal[y]:
            values.append(shift)
            weights.append(np.full(n_r, p / n_r))
            continue
        for b in np.flatnonzero(policy[y]):
            theta = atoms[y, b]
            if np.any(np.isnan(theta)):
                raise ValueError(f"table entry ({y}, {b}) is undefined")
            n = len(theta)
            values.append((shift[:, None] + mdp.gamma * theta[None, :]).ravel())
            weights.append(np.full(n_r * n, p * policy[y, b] / (n_r * n)))
    values = np.concatenate(values)
    weights = np.concatenate(weights)
    return WeightedSample(values, weights / weights.sum())


def bellman_sweep(mdp: TabularMdp, table: QuantileTable, policy,
                  reward_grid: int = 32) -> QuantileTable:
    """One synchronous application of quantile projection after the backup."""
    out = table.copy()
    for x in range(mdp.n_states):
        if mdp.terminal[x]:
            continue
        for a in range(mdp.n_actions):
            target = bellman_target(mdp, table, policy, x, a, reward_grid)
            out.atoms[x, a] = quantile_project(target, table.taus).atoms
    return out


def wasserstein1(a: QuantileRepr, b: QuantileRepr) -> float:
    """W1 between two equally weighted atom sets of the same size."""
    xa, xb = np.asarray(a.atoms, dtype=float), np.asarray(b.atoms, dtype=float)
    if xa.shape != xb.shape:
        raise ValueError(f"atom counts differ: {len(xa)} vs {len(xb)}")
    return float(np.mean(np.abs(np.sort(xa) - np.sort(xb))))


def em_mean(repr: QuantileRepr) -> float:
    return float(np.mean(repr.atoms))


def left_truncated_variance(repr: QuantileRepr) -> float:
    """Upper-half spread around the median atom, ``(1/2N) sum_{i>N/2} (q_i - q_{N/2})^2``."""
    n = repr.n
    if n % 2:
        raise ValueError("left truncated variance needs an even number of atoms")
    q = np.sort(repr.atoms)
    median = q[n // 2 - 1]
    return float(np.sum((q[n // 2:] - median) ** 2) / (2 * n))
