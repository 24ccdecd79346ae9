"""Cornish-Fisher regression of quantile estimates.

A set of quantile estimates ``q(tau_i)`` is regressed on polynomials of the
standard normal quantile ``z = Phi^{-1}(tau)``; the intercept of the
weighted least-squares fit is the QEM estimate of the mean.

Model columns (``order``):

====  =========================================
1     ``1, z``
2     ``1, z, z^2 - 1``
3     ``1, z, z^2 - 1, z^3 - 3z``
4     ``1, z, z^2 - 1, z^3 - 3z, -2z^3 + 5z``
====  =========================================
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "SingularFitError",
    "std_normal_quantile",
    "DesignMatrix",
    "WeightSpec",
    "TAIL_WEIGHTS",
    "MIDDLE_WEIGHTS",
    "MomentFit",
    "build_design",
    "wls_fit",
    "qem_mean",
    "mean_weights",
    "model4_coefficients",
    "lemma_variance_m1",
    "gls_variance_m1",
    "em_variance_theoretical",
    "variance_f",
    "simulate_f_min",
]


class SingularFitError(ValueError):
    """The weighted design matrix does not have full column rank."""


# AS241 (PPND16) coefficients, Wichura 1988
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _ratio(num, den, r):
    return np.polynomial.polynomial.polyval(r, num) / np.polynomial.polynomial.polyval(r, den)


def std_normal_quantile(tau):
    """Inverse standard normal CDF by Wichura's AS241 rational approximation.

    Accurate to about 1e-16 relative; accepts scalars or arrays.
    """
    p = np.asarray(tau, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("tau must lie strictly inside (0, 1)")
    q = p - 0.5
    out = np.empty_like(q)
    central = np.abs(q) <= 0.425
    if np.any(central):
        qc = q[central]
        out[central] = qc * _ratio(_A, _B, 0.180625 - qc * qc)
    tail = ~central
    if np.any(tail):
        qt = q[tail]
        r = np.where(qt < 0, p[tail], 1.0 - p[tail])
        r = np.sqrt(-np.log(r))
        val = np.where(r <= 5.0, _ratio(_C, _D, r - 1.6), _ratio(_E, _F, r - 5.0))
        out[tail] = np.where(qt < 0, -val, val)
    return out if out.ndim else float(out)


def _columns(z: np.ndarray, order: int) -> np.ndarray:
    cols = [np.ones_like(z), z, z * z - 1.0, z**3 - 3.0 * z, -2.0 * z**3 + 5.0 * z]
    return np.column_stack(cols[: order + 1])


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    order: int
    taus: np.ndarray
    entries: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return self.entries[:, 1]


def build_design(taus, order: int = 3) -> DesignMatrix:
    """Cornish-Fisher regressors at the given quantile levels."""
    if order not in (1, 2, 3, 4):
        raise ValueError(f"model order must be 1..4, got {order}")
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1:
        raise ValueError("taus must be 1-d")
    if len(taus) <= order + 1:
        raise ValueError(f"need more than {order + 1} quantile levels for model {order}")
    z = np.atleast_1d(std_normal_quantile(taus))
    return DesignMatrix(order, taus, _columns(z, order))


@dataclass(frozen=True)
class WeightSpec:
    """Noise-variance multipliers ``v >= 1`` on closed tau intervals.

    Levels outside every interval get ``v = 1``.  The fit weights each
    residual by ``1 / v``.
    """

    intervals: tuple = ()

    def __post_init__(self):
        iv = tuple(sorted((float(lo), float(hi), float(v)) for lo, hi, v in self.intervals))
        for lo, hi, v in iv:
            if not (0.0 <= lo <= hi <= 1.0) or v < 1.0:
                raise ValueError(f"bad weight interval ({lo}, {hi}, {v})")
        for (_, hi, _), (lo, _, _) in zip(iv, iv[1:]):
            if lo <= hi:
                raise ValueError("weight intervals overlap")
        object.__setattr__(self, "intervals", iv)

    def variances(self, taus) -> np.ndarray:
        taus = np.asarray(taus, dtype=float)
        v = np.ones_like(taus)
        for lo, hi, val in self.intervals:
            inside = (taus >= lo - 1e-12) & (taus <= hi + 1e-12)
            v[inside] = val
        return v

    def to_json(self) -> list:
        return [list(t) for t in self.intervals]

    @classmethod
    def from_json(cls, data) -> "WeightSpec":
        return cls(tuple(tuple(t) for t in data))


#: v = 1.5 on (0, 0.1] and [0.9, 1), the tail weighting
TAIL_WEIGHTS = WeightSpec(((0.0, 0.1, 1.5), (0.9, 1.0, 1.5)))
#: v = 1.5 on [0.45, 0.55], the tabular FrozenLake weighting
MIDDLE_WEIGHTS = WeightSpec(((0.45, 0.55, 1.5),))


def _as_variances(weights, taus) -> np.ndarray:
    if weights is None:
        return np.ones(len(taus))
    if isinstance(weights, WeightSpec):
        return weights.variances(taus)
    v = np.asarray(weights, dtype=float)
    if v.shape != (len(taus),):
        raise ValueError("need one weight per quantile level")
    return v


@dataclass(frozen=True, eq=False)
class MomentFit:
    """Result of :func:`wls_fit`.

    ``covariance`` is the sampling covariance of the coefficients for unit
    noise scale, ``(X' V^-1 X)^-1``.  ``theoretical_variance_m1`` is the
    closed-form intercept variance of the two-column model as published
    (:func:`lemma_variance_m1`); it is ``None`` for larger models.
    """

    coefficients: np.ndarray
    covariance: np.ndarray
    r_squared: float
    residuals: np.ndarray
    theoretical_variance_m1: float | None

    @property
    def mean(self) -> float:
        return float(self.coefficients[0])


def _coef_map(X, v):
    """Return ``(rows, cov)`` with ``beta = rows @ q`` and ``cov = (X' V^-1 X)^-1``,
    from the QR factorization of ``V^-1/2 X``."""
    sw = 1.0 / np.sqrt(v)
    Q, R = np.linalg.qr(X * sw[:, None])
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * max(d.max(), 1e-300):
        raise SingularFitError("design matrix is rank deficient under the weights")
    rinv = np.linalg.inv(R)
    return rinv @ (Q * sw[:, None]).T, rinv @ rinv.T


def model4_coefficients(c):
    """Map model-3 coefficients ``(..., 4)`` to model-4 coefficients ``(..., 5)``.

    Model 4's last column equals ``-2 (z^3 - 3z) - z``, so it spans the same
    space as model 3 and its coefficients are tied together only through
    the expansion itself: ``beta_5 = beta_3^2 / beta_2``.  Matching fitted
    values gives ``beta_5^2 + c_2 beta_5 - c_3^2 = 0``; the non-negative
    root is used, so ``beta_2 = c_2 + beta_5`` and ``beta_4 = c_4 + 2 beta_5``.
    """
    c = np.asarray(c, dtype=float)
    c1, c2, c3, c4 = np.moveaxis(c, -1, 0)
    b5 = 0.5 * (np.sqrt(c2 * c2 + 4.0 * c3 * c3) - c2)
    return np.stack([c1, c2 + b5, c3, c4 + 2.0 * b5, b5], axis=-1)


def _model4_jacobian(c):
    c2, c3 = c[1], c[2]
    root = math.hypot(c2, 2.0 * c3)
    if root == 0.0:
        g2 = g3 = 0.0
    else:
        g2, g3 = 0.5 * (c2 / root - 1.0), 2.0 * c3 / root
    return np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0 + g2, g3, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 2.0 * g2, 2.0 * g3, 1.0],
        [0.0, g2, g3, 0.0],
    ])


def wls_fit(X: DesignMatrix, weights, qhat) -> MomentFit:
    """Weighted least squares ``(X' V^-1 X)^-1 X' V^-1 q`` via QR of ``V^-1/2 X``.

    ``weights`` is a :class:`WeightSpec`, an array of per-level ``v`` or
    ``None`` for ordinary least squares.  Model 4 is collinear; it is fitted
    as model 3 and its coefficients recovered with
    :func:`model4_coefficients` (covariance by the delta method), so its
    intercept, fitted values and R^2 equal model 3's.
    """
    qhat = np.asarray(qhat, dtype=float)
    entries = X.entries
    if qhat.shape != (entries.shape[0],):
        raise ValueError(f"expected {entries.shape[0]} quantile estimates, got {qhat.shape}")
    v = _as_variances(weights, X.taus)
    base = entries[:, :4] if X.order == 4 else entries
    rows, cov = _coef_map(base, v)
    beta = rows @ qhat
    resid = qhat - base @ beta
    if X.order == 4:
        jac = _model4_jacobian(beta)
        beta, cov = model4_coefficients(beta), jac @ cov @ jac.T
    w = 1.0 / v
    qbar = np.dot(w, qhat) / w.sum()
    sst = float(np.dot(w, (qhat - qbar) ** 2))
    sse = float(np.dot(w, resid**2))
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    var_m1 = lemma_variance_m1(v, entries[:, 1]) if entries.shape[1] == 2 else None
    return MomentFit(beta, cov, r2, resid, var_m1)


def qem_mean(qhat, taus, weights=None, order: int = 3) -> float:
    """Intercept of the Cornish-Fisher WLS fit: the QEM mean estimate."""
    return wls_fit(build_design(taus, order), weights, qhat).mean


@lru_cache(maxsize=64)
def _cached_rows(taus_key: bytes, v_key: bytes, order: int) -> np.ndarray:
    taus = np.frombuffer(taus_key, dtype=float)
    v = np.frombuffer(v_key, dtype=float)
    X = build_design(taus, order)
    rows, _ = _coef_map(X.entries[:, :4], v)
    rows.setflags(write=False)
    return rows


def mean_weights(taus, weights=None, order: int = 3) -> np.ndarray:
    """Linear map from quantile estimates to the fitted coefficients.

    Returns an array of shape (k, N) with k = order + 1 for models 1-3; row
    0 dotted with the estimates gives the QEM mean.  Model 4 is not linear
    in the data, so for it the model-3 map is returned (same intercept);
    pass its output through :func:`model4_coefficients`.  Cached per
    (taus, weights, order).
    """
    taus = np.ascontiguousarray(taus, dtype=float)
    v = np.ascontiguousarray(_as_variances(weights, taus), dtype=float)
    return _cached_rows(taus.tobytes(), v.tobytes(), order)


def lemma_variance_m1(v, z) -> float:
    """Closed form for the intercept variance of the ``[1, z]`` model:

    ``1/sum(v) + (sum(v z)/sum(v))^2 / (sum(v z^2) - sum(v z)^2/sum(v))``.

    Note this is ``[(X' W X)^-1]_11`` with ``W = diag(v)``; it is the
    sampling variance of :func:`wls_fit` only when the noise variances are
    ``1 / v``.  Use :func:`gls_variance_m1` for noise variances ``v``.
    """
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    s, sz, szz = v.sum(), np.dot(v, z), np.dot(v, z * z)
    return float(1.0 / s + (sz / s) ** 2 / (szz - sz * sz / s))


def gls_variance_m1(v, z) -> float:
    """Sampling variance of the WLS intercept when the noise variances are ``v``."""
    return lemma_variance_m1(1.0 / np.asarray(v, dtype=float), z)


def em_variance_theoretical(v) -> float:
    """Variance of the plain atom average under independent noise ``N(0, v_i)``."""
    v = np.asarray(v, dtype=float)
    return float(v.sum() / len(v) ** 2)


def variance_f(v, z) -> float:
    """``(sum v / N)^2 - 1 - 1 / (sum v * sum v z^2 / (sum v z)^2 - 1)``.

    Positive exactly when :func:`lemma_variance_m1` is below
    :func:`em_variance_theoretical`.  With ``sum(v z) = 0`` the last term is
    taken at its limit, zero.
    """
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    return float(_f_rows(v[None, :], z[None, :])[0])


def _f_rows(v, z):
    n = v.shape[1]
    s = v.sum(axis=1)
    sz = np.einsum("ij,ij->i", v, z)
    szz = np.einsum("ij,ij->i", v, z * z)
    tiny = 1e-12 * s * np.max(np.abs(z), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(np.abs(sz) <= tiny, 0.0, 1.0 / (s * szz / (sz * sz) - 1.0))
    return (s / n) ** 2 - 1.0 - term


def simulate_f_min(n: int, m_upper: float, trials: int, tau_mode: str,
                   rng: np.random.Generator, chunk: int = 4096) -> float:
    """Minimum of :func:`variance_f` over random draws ``v_i ~ U(1, m_upper)``.

    ``tau_mode`` is ``"even"`` (midpoint grid) or ``"uniform"`` (fresh
    i.i.d. ``U(0, 1)`` levels each trial).
    """
    if n < 2 or trials < 1 or not m_upper > 1:
        raise ValueError("need n >= 2, trials >= 1 and m_upper > 1")
    if tau_mode not in ("even", "uniform"):
        raise ValueError(f"unknown tau mode {tau_mode!r}")
    z_even = std_normal_quantile((2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n))
    best = np.inf
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        v = rng.uniform(1.0, m_upper, size=(m, n))
        if tau_mode == "even":
            z = np.broadcast_to(z_even, (m, n))
        else:
            # open interval keeps the normal quantile finite
            u = rng.random((m, n))
            while np.any(u == 0.0):
                u[u == 0.0] = rng.random(int(np.sum(u == 0.0)))
            z = std_normal_quantile(u)
        best = min(best, float(np.min(_f_rows(v, z))))
        done += m
    return best
