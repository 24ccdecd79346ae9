"""Experiment presets and the per-seed runners behind the command line."""
from __future__ import annotations

import numpy as np

from . import __version__
from .agent import TrainConfig, TrainResult, run_training, uniform_policy
from .cfe import MIDDLE_WEIGHTS, build_design, simulate_f_min, std_normal_quantile, wls_fit
from .diagnostics import (
    OracleDist,
    contraction_rates,
    greedy_policy,
    mc_oracle,
    param_error_bound,
    param_error_gap,
    projected_fixed_point,
    value_iteration,
)
from .dist import QuantileRepr, default_taus, wasserstein1
from .mdp import (
    Exponential,
    GaussianMixture,
    build_chain,
    build_five_state,
    build_frozen_lake,
    build_two_arm,
    default_mixture,
)

__all__ = [
    "EXPERIMENTS",
    "TRAINING_EXPERIMENTS",
    "PRESETS",
    "resolve_config",
    "run_seed",
    "derive_seed",
    "aggregate",
    "build_mdp",
    "experiment_oracles",
    "training_rows",
    "cfe_fit_demo",
    "EULER_GAMMA",
]

EULER_GAMMA = 0.5772156649015329

TRAINING_EXPERIMENTS = ("two-arm", "five-state", "chain", "frozenlake")
EXPERIMENTS = TRAINING_EXPERIMENTS + ("simulate-f", "cfe-fit", "contraction", "param-bound")

# learning-rate drops at thirds of a 50K-step run
_THIRDS_50K = [[0, 0.05], [16_667, 0.025], [33_334, 0.0125]]

PRESETS = {
    "frozenlake": {
        "train": {"weights": MIDDLE_WEIGHTS.to_json(), "mode": "control"},
        "params": {"gamma": 0.999, "n_rollouts": 10_000},
    },
    "five-state": {
        "train": {"n_quantiles": 64, "steps": 50_000, "lr_schedule": _THIRDS_50K,
                  "mode": "evaluation", "epsilon_period": 1000},
        "params": {"gamma": 0.9},
    },
    "two-arm": {
        "train": {"n_quantiles": 32, "steps": 50_000, "lr_schedule": _THIRDS_50K,
                  "mode": "evaluation"},
        "params": {"gamma": 0.9, "n_rollouts": 10_000},
    },
    "chain": {
        "train": {"n_quantiles": 64, "steps": 10_000, "log_every": 100,
                  "lr_schedule": [[0, 0.05]], "mode": "evaluation"},
        "params": {"gamma": 0.99, "mixture": [list(c) for c in default_mixture().components]},
    },
    "simulate-f": {
        "train": {},
        "params": {"m": 2.0, "n": 32, "trials": 100_000, "tau": "uniform"},
    },
    "cfe-fit": {
        "train": {},
        "params": {"dist": "mixture", "n_points": 128, "noise_sd": 0.5, "orders": [1, 2, 3, 4]},
    },
    "contraction": {
        "train": {},
        "params": {"gamma": 0.99, "n_quantiles": 512, "sweeps": 10, "reward_grid": 32,
                   "mixture": [list(c) for c in default_mixture().components]},
    },
    "param-bound": {
        "train": {},
        "params": {"gamma": 0.9, "n_quantiles": [32, 128, 512], "reward_grid": 1024},
    },
}



def resolve_config(raw: dict) -> dict:
    """Fill preset defaults into a validated config."""
    exp = raw["experiment"]
    preset = PRESETS[exp]
    train = dict(preset["train"], **raw.get("train", {}))
    params = dict(preset["params"], **raw.get("params", {}))
    if exp in TRAINING_EXPERIMENTS:
        # normalise through TrainConfig so every field is explicit
        train = TrainConfig.from_json(train).to_json()
        train.pop("seed")
    return {
        "experiment": exp,
        "seeds": [int(s) for s in raw["seeds"]],
        "seed": int(raw.get("seed", 0)),
        "workers": raw.get("workers"),
        "train": train,
        "params": params,
        "output_dir": raw.get("output_dir", "results"),
        "artifact_version": __version__,
    }


def derive_seed(base: int, run_seed: int) -> int:
    """Independent stream for ``run_seed`` under the process-wide ``base`` seed."""
    ss = np.random.SeedSequence(base, spawn_key=(run_seed,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _mixture(params) -> GaussianMixture:
    return GaussianMixture(tuple(tuple(c) for c in params["mixture"]))


def build_mdp(experiment: str, params: dict, n_quantiles: int):
    if experiment == "frozenlake":
        return build_frozen_lake(params["gamma"])
    if experiment == "five-state":
        return build_five_state(params["gamma"])
    if experiment == "two-arm":
        return build_two_arm(n_quantiles, params["gamma"])
    if experiment == "chain":
        return build_chain(params["gamma"], _mixture(params))
    raise ValueError(f"{experiment!r} has no environment")


class _ScaledQuantile:
    # picklable quantile function of c * R
    def __init__(self, dist, scale):
        self.dist, self.scale = dist, scale

    def __call__(self, tau):
        return self.scale * np.asarray(self.dist.quantile(tau), dtype=float)


def experiment_oracles(experiment: str, params: dict, mdp, config: TrainConfig,
                       rng: np.random.Generator) -> tuple[dict, tuple]:
    """Reference distributions at the start state, keyed by action.

    Returns ``(oracles, target_actions)``: the actions whose error is
    reported in summaries (the optimal one in control mode, all of them
    otherwise).
    """
    x0 = mdp.start_state
    g = mdp.gamma
    if experiment == "five-state":
        oracles = {
            0: OracleDist.analytic(x0, 0, Exponential(1.2).quantile, 1.2),
            1: OracleDist.analytic(x0, 1, Exponential(1.0).quantile, 1.0),
        }
        targets = (0,) if config.mode == "control" else (0, 1)
        return oracles, targets
    if experiment == "chain":
        mix = _mixture(params)
        scale = g**5
        return {0: OracleDist.analytic(x0, 0, _ScaledQuantile(mix, scale), scale * mix.mean)}, (0,)
    n_rollouts = int(params.get("n_rollouts", 10_000))
    if config.mode == "control":
        q = value_iteration(mdp)
        policy = greedy_policy(q)
        targets = (int(np.argmax(q[x0])),)
    else:
        policy = np.asarray(config.policy, dtype=float) if config.policy else uniform_policy(mdp)
        targets = tuple(range(mdp.n_actions))
    oracles = {a: mc_oracle(mdp, policy, x0, n_rollouts, rng=rng, action=a)
               for a in range(mdp.n_actions)}
    return oracles, targets


TRAIN_COLUMNS = ("step", "state", "action", "q_em", "q_qem", "q_error", "w1_error")


def training_rows(result: TrainResult, oracles: dict):
    """CSV rows for a training run; errors use the run's own estimator."""
    taus = result.table.taus
    est = result.config.estimator
    q_run = result.q_em if est == "em" else result.q_qem
    refs = {}
    for a, o in oracles.items():
        refs[(o.state, a)] = (o.mean, QuantileRepr(o.quantiles(taus), taus))
    rows = []
    for k, step in enumerate(result.steps):
        for p, x in enumerate(result.probes):
            for a in range(result.snapshots.shape[2]):
                q_err = w1 = ""
                if (x, a) in refs:
                    mean, ref = refs[(x, a)]
                    q_err = abs(float(q_run[k, p, a]) - mean)
                    w1 = wasserstein1(QuantileRepr(result.snapshots[k, p, a], taus), ref)
                rows.append((int(step), int(x), a, float(result.q_em[k, p, a]),
                             float(result.q_qem[k, p, a]), q_err, w1))
    return rows


def _train_summary(result: TrainResult, rows, targets) -> dict:
    last = result.steps[-1]
    final = [r for r in rows if r[0] == last and r[1] == result.probes[0]]
    errs = [r for r in final if r[2] in targets and r[5] != ""]
    x0 = result.probes[0]
    return {
        "greedy_action": result.greedy_action(x0),
        "target_actions": list(targets),
        "q_em": [r[3] for r in final],
        "q_qem": [r[4] for r in final],
        "q_error": float(np.mean([r[5] for r in errs])) if errs else None,
        "w1_error": float(np.mean([r[6] for r in errs])) if errs else None,
        "episodes": int(result.episodes),
    }


def _true_mean(dist: str) -> float:
    return {"normal": 0.0, "mixture": default_mixture().mean, "exponential": 1.0,
            "gumbel": EULER_GAMMA}[dist]


def _exact_quantiles(dist: str, taus) -> np.ndarray:
    if dist == "normal":
        return np.asarray(std_normal_quantile(taus))
    if dist == "mixture":
        return default_mixture().quantile(taus)
    if dist == "exponential":
        return np.asarray(Exponential(1.0).quantile(taus))
    if dist == "gumbel":
        return -np.log(-np.log(taus))
    raise ValueError(f"unknown distribution {dist!r}")


def cfe_fit_demo(distribution: str, n_points: int, noise_sd: float, orders=(1, 2, 3, 4),
                 rng: np.random.Generator | None = None) -> list[dict]:
    """Fit the Cornish-Fisher models to noisy exact quantiles.

    One noise draw is shared by all model orders.  Each row holds the model
    order, its coefficients, R^2 and the distribution's true mean.
    """
    orders = tuple(int(k) for k in orders)
    if n_points <= max(orders) + 1:
        raise ValueError("n_points must exceed the number of regressors")
    rng = np.random.default_rng() if rng is None else rng
    taus = default_taus(n_points)
    qhat = _exact_quantiles(distribution, taus) + noise_sd * rng.standard_normal(n_points)
    out = []
    for k in orders:
        fit = wls_fit(build_design(taus, k), None, qhat)
        out.append({"model": k, "coefficients": [float(c) for c in fit.coefficients],
                    "r_squared": float(fit.r_squared), "true_mean": _true_mean(distribution)})
    return out


def run_seed(config: dict, seed: int):
    """Run one seed of a resolved config.

    Returns ``(columns, rows, summary)``; ``summary`` is JSON-serialisable.
    """
    exp = config["experiment"]
    params = config["params"]
    run_seed_ = derive_seed(config["seed"], seed)
    rng = np.random.default_rng(run_seed_)
    if exp in TRAINING_EXPERIMENTS:
        tc = TrainConfig.from_json(dict(config["train"], seed=run_seed_))
        mdp = build_mdp(exp, params, tc.n_quantiles)
        result = run_training(mdp, tc)
        # the oracle stream depends only on the process seed, so all runs share it
        oracle_rng = np.random.default_rng(np.random.SeedSequence(config["seed"], spawn_key=(2**31,)))
        oracles, targets = experiment_oracles(exp, params, mdp, result.config, oracle_rng)
        rows = training_rows(result, oracles)
        return TRAIN_COLUMNS, rows, _train_summary(result, rows, targets)
    if exp == "simulate-f":
        f = simulate_f_min(int(params["n"]), float(params["m"]), int(params["trials"]),
                           params["tau"], rng)
        row = (params["m"], params["n"], params["trials"], params["tau"], f)
        return ("m", "n", "trials", "tau", "f_min"), [row], {"f_min": f}
    if exp == "cfe-fit":
        fits = cfe_fit_demo(params["dist"], int(params["n_points"]), float(params["noise_sd"]),
                            params["orders"], rng)
        width = max(len(f["coefficients"]) for f in fits)
        cols = ("model",) + tuple(f"b{j}" for j in range(width)) + ("r_squared", "true_mean")
        rows = [(f["model"], *f["coefficients"], *[""] * (width - len(f["coefficients"])),
                 f["r_squared"], f["true_mean"]) for f in fits]
        return cols, rows, {"fits": fits}
    if exp == "contraction":
        mdp = build_chain(params["gamma"], _mixture(params))
        out = contraction_rates(mdp, int(params["n_quantiles"]), int(params["sweeps"]), rng,
                                reward_grid=int(params["reward_grid"]))
        rows = [(0, out["mean_gap"][0], out["var_gap"][0], "", "")]
        rows += [(k + 1, out["mean_gap"][k + 1], out["var_gap"][k + 1],
                  out["mean_rates"][k], out["var_rates"][k]) for k in range(int(params["sweeps"]))]
        summary = {"max_mean_rate": float(np.max(out["mean_rates"][1:], initial=0.0)),
                   "max_var_rate": float(np.max(out["var_rates"][1:], initial=0.0))}
        return ("sweep", "mean_gap", "var_gap", "mean_rate", "var_rate"), rows, summary
    if exp == "param-bound":
        rows = []
        for n in params["n_quantiles"]:
            mdp = build_two_arm(int(n), params["gamma"])
            table = projected_fixed_point(mdp, int(n), reward_grid=int(params["reward_grid"]))
            gap = param_error_gap(mdp, table, int(n), reward_grid=int(params["reward_grid"]))
            rows.append((int(n), gap, param_error_bound(mdp.r_max, int(n), mdp.gamma)))
        return ("n_quantiles", "gap", "bound"), rows, {
            "within_bound": bool(all(r[1] <= r[2] for r in rows))}
    raise ValueError(f"unknown experiment {exp!r}")


def aggregate(experiment: str, summaries: dict) -> dict:
    """Cross-seed aggregates of the per-seed summaries."""
    vals = list(summaries.values())
    if experiment in TRAINING_EXPERIMENTS:
        q_err = [s["q_error"] for s in vals if s["q_error"] is not None]
        w1 = [s["w1_error"] for s in vals if s["w1_error"] is not None]
        actions = [s["greedy_action"] for s in vals]
        return {
            "greedy_action_counts": {str(a): actions.count(a) for a in sorted(set(actions))},
            "mean_q_error": float(np.mean(q_err)) if q_err else None,
            "mean_w1_error": float(np.mean(w1)) if w1 else None,
        }
    if experiment == "simulate-f":
        f = [s["f_min"] for s in vals]
        return {"f_min": float(min(f)), "mean_f_min": float(np.mean(f))}
    if experiment == "contraction":
        return {"max_mean_rate": max(s["max_mean_rate"] for s in vals),
                "max_var_rate": max(s["max_var_rate"] for s in vals)}
    if experiment == "param-bound":
        return {"within_bound": all(s["within_bound"] for s in vals)}
    return {}

