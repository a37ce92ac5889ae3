"""Command-line runner for the experiments.

Each subcommand takes an optional YAML config (flat mapping of the
experiment's config fields), ``--set key=value`` overrides, a 64-bit
``--seed`` and an ``--out`` directory. Data files and ``manifest.json`` are
deterministic functions of (config, seed); wall-clock time goes to a separate
``timing.json``.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import __version__
from .rng import check_seed, sub_seed


class UsageError(Exception):
    pass


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--tags", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --------------------------------------------------------------------------- configs


@dataclass
class FigLoglikConfig:
    sigma_true: float = 1.5
    n: int = 100
    sigma_min: float = 0.5
    sigma_max: float = 4.0
    n_sigma: int = 351


@dataclass
class ChasmConfig:
    alphas: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    d: int = 10
    n: int = 1000
    K: int = 8
    n_seeds: int = 20
    delta: float = 1e-3
    method: str = "gradient-descent"
    tol: float = 1e-10
    max_iter: int = 500


@dataclass
class NceConfig:
    sigma_true: float = 2.0
    n: int = 100_000
    nu: float = 10.0
    reference_scale: float = 3.0
    init_sigma: float = 1.0
    n_seeds: int = 5


@dataclass
class LfireConfig:
    n: int = 100_000
    x_obs: list = field(default_factory=lambda: [1.0, -1.0])
    grid_resolution: int = 201
    degree: int = 2
    save_bank: bool = False


@dataclass
class BoedSirConfig:
    t_min: float = 0.3
    t_max: float = 3.0
    n_grid: int = 10
    n_per_design: int = 10_000
    strategy: str = "grid-refit"
    hidden: int = 16
    tol: float = 1e-5
    max_iter: int = 1000
    beta_true: float = 2.0
    gamma_true: float = 0.4
    n_obs_seeds: int = 20
    posterior_resolution: int = 101
    oracle: bool = True
    oracle_outer: int = 300
    oracle_inner: int = 300
    oracle_lik: int = 500
    oracle_bins: int = 20
    budget: int = 10**7


def _field_types(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def build_config(cls, path: str | None, overrides: list[str]):
    """Config from defaults, then the YAML file, then ``key=value`` overrides."""
    values: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a mapping")
        values.update(loaded)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = yaml.safe_load(v)
    known = _field_types(cls)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    cfg = cls()
    for k, v in values.items():
        default = getattr(cfg, k)
        try:
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise TypeError
            elif isinstance(default, int):
                if isinstance(v, bool) or float(v) != int(v):
                    raise TypeError
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            elif isinstance(default, list):
                v = [float(x) for x in (v if isinstance(v, list) else [v])]
            elif isinstance(default, str):
                v = str(v)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {k}: {v!r}") from exc
        setattr(cfg, k, v)
    return cfg


# --------------------------------------------------------------------------- experiments


def run_fig_loglik(cfg: FigLoglikConfig, seed: int, out: Path) -> dict:
    from .distributions import Gaussian, gaussian_loglik_decomposition

    if cfg.n_sigma < 1 or cfg.sigma_min <= 0:
        raise ValueError("need n_sigma >= 1 and sigma_min > 0")
    x = Gaussian(0.0, cfg.sigma_true).sample(cfg.n, sub_seed(seed, 0))[:, 0]
    grid = np.linspace(cfg.sigma_min, cfg.sigma_max, cfg.n_sigma) if cfg.n_sigma > 1 else np.array([cfg.sigma_min])
    rows = [(s, *gaussian_loglik_decomposition(float(s), x)) for s in grid]
    write_csv(out / "loglik.csv", ["sigma", "partition_term", "energy_term", "total"], rows)
    best = grid[int(np.argmax([r[3] for r in rows]))]
    return {"argmax_sigma": float(best), "mle_sigma": float(math.sqrt(np.mean(x**2)))}


def run_chasm(cfg: ChasmConfig, seed: int, out: Path) -> dict:
    from .optimize import OptimizerConfig
    from .tre import chasm_experiment, write_chasm_csv

    opt = OptimizerConfig(method=cfg.method, tol=cfg.tol, max_iter=cfg.max_iter)
    seeds = [sub_seed(seed, i) for i in range(cfg.n_seeds)]
    rows = chasm_experiment(cfg.alphas, cfg.d, cfg.n, cfg.K, seeds, opt, cfg.delta)
    write_chasm_csv(rows, out / "chasm.csv")
    summary = {}
    for a in cfg.alphas:
        for m in ("single", "tre"):
            sel = [r for r in rows if r["alpha"] == a and r["method"] == m]
            summary[f"alpha={fmt(a)}/{m}"] = {
                "median_param_error": float(np.median([r["param_error"] for r in sel])),
                "median_curvature": float(np.median([r["curvature_proxy"] for r in sel])),
            }
    return summary


def run_nce(cfg: NceConfig, seed: int, out: Path) -> dict:
    from .distributions import Gaussian
    from .ebm_nce import GaussianEnergy, nce_fit

    rows, fits = [], []
    for i in range(cfg.n_seeds):
        x = Gaussian(0.0, cfg.sigma_true).sample(cfg.n, sub_seed(seed, i, 0))
        est = nce_fit(
            GaussianEnergy(cfg.init_sigma), x, Gaussian(0.0, cfg.reference_scale), cfg.nu, seed=sub_seed(seed, i, 1)
        )
        sigma = float(est.theta_hat[0])
        gap = est.c_hat + 0.5 * math.log(2 * math.pi * sigma**2)
        rows.append((i, sigma, est.c_hat, gap, est.initial_loss, est.final_loss, len(est.trajectory)))
        fits.append(json.loads(est.to_json()))
    write_csv(
        out / "nce.csv",
        ["replicate", "sigma_hat", "c_hat", "normalisation_gap", "initial_loss", "final_loss", "iterations"],
        rows,
    )
    write_json(out / "nce_fits.json", fits)
    return {
        "median_sigma_hat": float(np.median([r[1] for r in rows])),
        "median_abs_normalisation_gap": float(np.median([abs(r[3]) for r in rows])),
    }


def run_lfire(cfg: LfireConfig, seed: int, out: Path) -> dict:
    from .core_ratio import polynomial_model
    from .sbi import (
        GaussianPrior,
        LinearGaussianSimulator,
        conjugate_linear_gaussian_posterior,
        lfire_amortised_fit,
        marginal_pairs,
        posterior_from_ratio,
        simulate_joint,
    )

    sim, prior = LinearGaussianSimulator(), GaussianPrior(0.0, 1.0)
    joint = simulate_joint(sim, prior, cfg.n, sub_seed(seed, 0))
    marg = marginal_pairs(joint, sub_seed(seed, 1))
    if cfg.save_bank:
        joint.to_csv(out / "joint_bank.csv")
    ratio = lfire_amortised_fit(joint, marg, polynomial_model(2, cfg.degree, fit_to=joint.inputs()))
    rows = []
    for i, xo in enumerate(cfg.x_obs):
        post = posterior_from_ratio(ratio, prior, [xo], cfg.grid_resolution)
        post.to_csv(out / f"posterior_{i}.csv")
        m, v = conjugate_linear_gaussian_posterior(xo)
        rows.append((xo, post.mean()[0], post.var()[0], m, v))
    write_csv(out / "lfire_summary.csv", ["x_obs", "mean", "var", "conjugate_mean", "conjugate_var"], rows)
    return {"max_mean_error": max(abs(r[1] - r[3]) for r in rows), "max_var_error": max(abs(r[2] - r[4]) for r in rows)}


def run_boed_sir(cfg: BoedSirConfig, seed: int, out: Path) -> dict:
    from .boed import (
        DesignSpace,
        SirSimulator,
        concurrent_design_optimise,
        posterior_at_design,
        sir_binned_mi,
        sir_simulate,
    )
    from .core_ratio import MLPModel
    from .optimize import OptimizerConfig

    sim = SirSimulator()
    prior = sim.config.prior
    times = np.linspace(cfg.t_min, cfg.t_max, cfg.n_grid)

    def factory(sample):
        return MLPModel.initialised(4, cfg.hidden, seed=sub_seed(seed, 5), fit_to=np.vstack([sample.data, sample.reference]))

    trace = concurrent_design_optimise(
        sim, prior, DesignSpace(0.0, sim.config.horizon, grid=times), factory, cfg.strategy,
        budget=cfg.budget, seed=sub_seed(seed, 1), n_per_design=cfg.n_per_design,
        optimizer_config=OptimizerConfig(tol=cfg.tol, max_iter=cfg.max_iter),
        init_design=[0.5 * (cfg.t_min + cfg.t_max)],
    )
    trace.to_csv(out / "trace.csv")
    d_hat = trace.final_design

    truth = np.array([cfg.beta_true, cfg.gamma_true])
    std, mean = np.asarray(prior.std), np.asarray(prior.mean)
    rows = []
    for i in range(cfg.n_obs_seeds):
        x = sir_simulate(sim.config, truth[0], truth[1], d_hat, sub_seed(seed, 2, i))
        post = posterior_at_design(trace.final_ratio, prior, x, cfg.posterior_resolution)
        if i == 0:
            post.to_csv(out / "posterior.csv")
        mode, pm = post.mode(), post.mean()
        rows.append((i, *x, *mode, *pm, float(np.linalg.norm((mode - truth) / std)), float(np.linalg.norm((pm - truth) / std))))
    write_csv(
        out / "posterior_checks.csv",
        ["obs_seed", "I", "R", "mode_beta", "mode_gamma", "mean_beta", "mean_gamma", "mode_distance", "mean_distance"],
        rows,
    )
    summary = {
        "final_design": [float(v) for v in d_hat],
        "final_bound": float(trace.final_bound),
        "simulations": int(trace.simulations),
        "prior_mean_distance": float(np.linalg.norm((mean - truth) / std)),
        "median_mode_distance": float(np.median([r[-2] for r in rows])),
        "median_mean_distance": float(np.median([r[-1] for r in rows])),
    }
    if cfg.oracle:
        mi = sir_binned_mi(
            sim, prior, [[t] for t in times], cfg.oracle_outer, cfg.oracle_inner, cfg.oracle_lik, cfg.oracle_bins,
            sub_seed(seed, 3),
        )
        write_csv(out / "mi_oracle.csv", ["time", "mi", "std_error"], [(t, m.mi, m.std_error) for t, m in zip(times, mi)])
        summary["oracle_argmax"] = float(times[int(np.argmax([m.mi for m in mi]))])
        summary["grid_step"] = float(times[1] - times[0]) if len(times) > 1 else 0.0
    return summary


def run_selftest(cfg, seed: int, out: Path) -> dict:
    """Fast internal consistency checks; raises on the first failure."""
    from .boed import SirConfig, sir_paths
    from .core_ratio import LOG2, LabeledTwoSample, MLPModel, FixedRatio, logistic_loss, loss_objective
    from .distributions import Gaussian
    from .optimize import finite_difference_check

    results = {}
    x = Gaussian(0.0, 1.0).sample(200, sub_seed(seed, 0))
    y = Gaussian(1.0, 2.0).sample(300, sub_seed(seed, 1))
    sample = LabeledTwoSample(x, y)
    zero = FixedRatio(lambda z: np.zeros(len(z)), 1)
    results["loss_identity"] = abs(logistic_loss(zero, LabeledTwoSample(x, x)).loss - 2 * LOG2) < 1e-12
    mlp = MLPModel.initialised(1, 4, seed=sub_seed(seed, 2))
    results["gradient_check"] = finite_difference_check(loss_objective(mlp, sample), mlp.params) < 1e-4
    S, I, R = sir_paths(SirConfig(), [1.5, 2.5], [0.5, 0.2], sub_seed(seed, 3))
    results["sir_conservation"] = bool(np.all(S + I + R == SirConfig().population))
    write_csv(out / "selftest.csv", ["check", "passed"], sorted(results.items()))
    failed = [k for k, ok in results.items() if not ok]
    if failed:
        raise RuntimeError(f"selftest failed: {', '.join(failed)}")
    return results


@dataclass
class SelftestConfig:
    pass


EXPERIMENTS: dict[str, tuple[type, Callable]] = {
    "fig-loglik": (FigLoglikConfig, run_fig_loglik),
    "chasm": (ChasmConfig, run_chasm),
    "nce": (NceConfig, run_nce),
    "lfire": (LfireConfig, run_lfire),
    "boed-sir": (BoedSirConfig, run_boed_sir),
    "selftest": (SelftestConfig, run_selftest),
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(name: str, cfg, seed: int, out: Path) -> dict:
    """Run one experiment and write its data files, ``manifest.json`` and ``timing.json``."""
    seed = check_seed(seed)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    summary = EXPERIMENTS[name][1](cfg, seed, out)
    elapsed = time.perf_counter() - start
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name not in ("manifest.json", "timing.json"))
    manifest = {
        "experiment": name,
        "config": asdict(cfg),
        "seed": seed,
        "version": version_string(),
        "summary": summary,
        "files": {p.name: _sha256(p) for p in files},
        "rerun": f"contrastive {name} --seed {seed} --config <config.yaml with the config above>",
    }
    write_json(out / "manifest.json", manifest)
    write_json(out / "timing.json", {"experiment": name, "wall_clock_seconds": elapsed})
    return manifest


def _seed_arg(text: str) -> int:
    try:
        return check_seed(int(text, 0))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrastive", description="Run contrastive-learning experiments.")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="YAML file with config overrides")
        p.add_argument("--seed", type=_seed_arg, default=0, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory (default runs/<experiment>)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    cls, _ = EXPERIMENTS[args.experiment]
    try:
        cfg = build_config(cls, args.config, args.set)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or Path("runs") / args.experiment)
    try:
        manifest = run_experiment(args.experiment, cfg, args.seed, out)
    except Exception as exc:  # runtime failures map to exit status 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(manifest["summary"], indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
