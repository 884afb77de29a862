"""Command-line drivers: ``cvxnet fit-toy | price-basket | price-bermudan | price-swing | check-rates``.

Each run writes ``manifest.json`` into the output directory before any work,
then its CSV tables. Exit codes: 0 success, 2 configuration error, 3
numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import analysis, basket, bermudan, swing
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .network import NetConfig, NumericOverflowError, ScaledNet
from .training import LRSchedule, TrainConfig, pool_sampler, train_regression

log = logging.getLogger("cvxnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


@dataclass
class ToySpec:
    """Noisy samples of ``f(x) = x^2 + 10((e^x - 1) 1{x<0} + x 1{x>0})`` on ``[lo, hi]``."""

    sigma_xi: float = 2.0
    lo: float = -7.0
    hi: float = 7.0

    def __post_init__(self):
        if self.sigma_xi < 0:
            raise ValueError("noise level must be >= 0")
        if not self.hi > self.lo:
            raise ValueError("empty interval")

    @staticmethod
    def f(x):
        x = np.asarray(x, dtype=np.float64)
        return x * x + 10.0 * np.where(x < 0, np.expm1(np.minimum(x, 0.0)), x)

    def scale(self, x):
        """``(x - lo) / (hi - lo)``, i.e. ``(x + 7) / 14`` on the default interval."""
        return (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo)


def net_config(cfg: ExperimentConfig, seed: int | None = None) -> NetConfig:
    net = cfg["network"]
    return NetConfig(net["arch"], net["n"], net["c"], cfg.seed if seed is None else seed)


def schedule(cfg: ExperimentConfig) -> LRSchedule:
    tr = cfg["train"]
    return LRSchedule(tr["lr"], min(tr["lr_floor"], tr["lr"]), tr["lr_decay"], tr["warm_iters"])


def _write_rows(path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def run_toy(cfg: ExperimentConfig) -> dict:
    """Fit the noisy convex toy function; writes ``toy_fit.csv`` and ``loss.csv``."""
    sec = cfg["toy"]
    toy = ToySpec(sec["sigma_xi"], sec["lo"], sec["hi"])
    tr = cfg["train"]
    size = sec["batches"] * tr["batch_size"]
    rng = np.random.default_rng([cfg.seed, 0])
    x = rng.uniform(toy.lo, toy.hi, size)
    g = toy.f(x) + toy.sigma_xi * rng.standard_normal(size)
    shift, spread = float(g.mean()), float(g.std()) or 1.0
    net = net_config(cfg).build(1)
    scaled = ScaledNet(net, toy.lo, toy.hi, shift, spread)
    sampler = pool_sampler(scaled.scale_inputs(x[:, None]), scaled.scale_targets(g))
    # one schedule iteration is a full pass over the batches
    tcfg = TrainConfig(tr["batch_size"], tr["iterations"], schedule(cfg), cfg.seed, sec["batches"])
    _, trace = train_regression(net, sampler, tcfg)
    # test grid: cell centres, so the end points of I are never reused
    xt = analysis.midpoint_grid(toy.lo, toy.hi, sec["test_points"])
    ft = toy.f(xt)
    fh = scaled(xt[:, None])
    rel = np.abs(fh - ft) / np.maximum(np.abs(ft), 1e-12)
    rows = [[repr(float(a)), repr(float(b)), repr(float(c)), repr(float(d))] for a, b, c, d in zip(xt, ft, fh, rel)]
    _write_rows(os.path.join(cfg.out, "toy_fit.csv"), ["x", "f", "f_hat", "rel_err"], rows)
    trace.write_csv(os.path.join(cfg.out, "loss.csv"))
    big = np.abs(ft) > 1
    return {"median_rel_err": float(np.median(rel[big]))}


def run_basket(cfg: ExperimentConfig) -> dict:
    """Train the price surface and compare with control-variate Monte Carlo at the test points."""
    sec = cfg["basket"]
    tr = cfg["train"]
    m, spec, box = basket.reference_setup(sec["d"], sec["rho"])
    surface = basket.train_price_surface(
        m, spec, box, net_config(cfg), sec["M_train"],
        TrainConfig(tr["batch_size"], tr["iterations"], schedule(cfg), cfg.seed), sec["pool_size"])
    rows = []
    for j in sec["points"]:
        s0 = basket.test_point(sec["d"], j)
        price, se = basket.mc_cv_estimate(m, spec, s0, sec["M_bench"], cfg.seed, stream=(1 << 40) + j)
        rows.append({"d": sec["d"], "rho": sec["rho"], "j": j, "net_price": float(surface(s0)),
                     "mc_price": price, "mc_ci_lo": price - 1.96 * se, "mc_ci_hi": price + 1.96 * se})
    basket.write_price_table(os.path.join(cfg.out, "basket_prices.csv"), rows)
    surface.trace.write_csv(os.path.join(cfg.out, "loss.csv"))
    return {"rows": rows}


def run_bermudan(cfg: ExperimentConfig) -> dict:
    sec = cfg["bermudan"]
    tr = cfg["train"]
    m = bermudan.reference_market(sec["d"], sec["case"])
    spec = bermudan.reference_spec(m.r, sec["K"], sec["T"], sec["N"])
    rows = []
    for i, s0 in enumerate(sec["s0"]):
        x0 = np.full(sec["d"], s0)
        trained = bermudan.train_policy(m, spec, x0, net_config(cfg),
                                        TrainConfig(tr["batch_size"], tr["iterations"], schedule(cfg), cfg.seed),
                                        sec["pilot_paths"])
        price, se = bermudan.lower_bound_price(trained.policy, m, spec, x0, sec["eval_paths"], cfg.seed)
        rows.append({"d": sec["d"], "s0": s0, "case": sec["case"], "price": price, "std_error": se,
                     "in_sample": trained.value})
    bermudan.write_price_report(os.path.join(cfg.out, "bermudan_prices.csv"), rows)
    return {"rows": rows}


def run_swing(cfg: ExperimentConfig) -> dict:
    sec = cfg["swing"]
    tr = cfg["train"]
    m = swing.reference_gas_model()
    rows = []
    for Q_lo, Q_hi in sec["bands"]:
        spec = swing.reference_swing_spec(Q_lo, Q_hi, sec["dt"])
        tcfg = swing.SwingTrainConfig(tr["batch_size"], sec["batches"], tr["iterations"], sec["warm_iterations"],
                                      schedule(cfg), cfg.seed, sec["mode"])
        nets = swing.train_swing(m, spec, net_config(cfg), tcfg)
        price, se = swing.evaluate_swing(nets, m, spec, sec["eval_paths"], cfg.seed)
        rows.append({"Q_lo": Q_lo, "Q_hi": Q_hi, "price": price, "std_error": se, "in_sample": nets.value})
    swing.write_report(os.path.join(cfg.out, "swing_prices.csv"), rows)
    return {"rows": rows}


def run_rates(cfg: ExperimentConfig) -> dict:
    """Sup-error rate of the tangent construction for ``x^2`` and the quantization bound."""
    sec = cfg["rates"]
    f = lambda x: (np.asarray(x) ** 2).sum(axis=-1)
    grad = lambda x: 2.0 * np.asarray(x)
    sup = analysis.sup_rate_check(f, grad, 0.0, 1.0, sec["n_list"])
    analysis.write_sup_table(os.path.join(cfg.out, "sup_rate.csv"), sup)
    checks = [analysis.lr_bound_check(f, grad, 2.0, 1.0, analysis.uniform_sampler(), n, 1.0, sec["sample_size"],
                                      cfg.seed) for n in sec["bound_n"]]
    analysis.write_bound_table(os.path.join(cfg.out, "lr_bound.csv"), checks)
    q = analysis.quantization_error(analysis.uniform_sampler(), sec["quantizer_n"], sec["sample_size"], cfg.seed)
    return {"ratios": analysis.rate_ratios(sup).tolist(), "bounds_hold": all(c.holds() for c in checks),
            "e2": q.distortion}


COMMANDS = {
    "fit-toy": ("toy", run_toy),
    "price-basket": ("basket", run_basket),
    "price-bermudan": ("bermudan", run_bermudan),
    "price-swing": ("swing", run_swing),
    "check-rates": ("rates", run_rates),
}


def _write_manifest(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(command: str, cfg: ExperimentConfig) -> dict:
    """Create the output directory, write the manifest, run, then record the wall time."""
    _, runner = COMMANDS[command]
    os.makedirs(cfg.out, exist_ok=True)
    manifest_path = os.path.join(cfg.out, "manifest.json")
    manifest = {"command": command, "seed": cfg.seed, "config_sha256": cfg.digest(), "status": "running"}
    _write_manifest(manifest_path, manifest)
    with open(os.path.join(cfg.out, "config.ini"), "w") as fh:
        fh.write(cfg.to_text())
    start = time.perf_counter()
    try:
        summary = runner(cfg)
    except Exception as exc:
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                        wall_time_s=time.perf_counter() - start)
        _write_manifest(manifest_path, manifest)
        raise
    manifest.update(status="ok", wall_time_s=time.perf_counter() - start)
    _write_manifest(manifest_path, manifest)
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvxnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file; defaults reproduce the published settings")
        p.add_argument("--seed", type=int, help="u64 seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--arch", help="LM, L2SE, k-SLM or k-SL2SE (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    kind, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, kind) if args.config else default_config(kind)
        cfg = cfg.with_overrides(args.seed, args.out, args.arch)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run_experiment(args.command, cfg)
    except NumericOverflowError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
