"""Command line entry point: ``rfgps train | eval | compare``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, load_config
from .gps_driver import REPORT_COLUMNS, STREAM_EVAL, RunConfig, evaluate_policy, run, stream
from .plotting import plot_comparison, plot_learning_curves, read_report
from .sphase import load_policy, save_policy

log = logging.getLogger("rfgps")


def episodes_per_iteration(cfg: RunConfig) -> int:
    if cfg.algorithm == "reset_free":
        return cfg.samples
    return len(cfg.initial_conditions()) * cfg.samples_per_condition


def train(cfg: RunConfig, out, plot: bool = True) -> Path:
    """Run one configuration and write its artifacts under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.replace(cfg, out_dir=str(out))
    (out / "config.ini").write_text(dump_config(cfg))
    t0 = time.perf_counter()
    report = run(cfg)
    elapsed = time.perf_counter() - t0
    report.write_csv(out / "report.csv")
    report.write_timing(out / "timing.csv")
    save_policy(report.policy, out / "policy.bin")
    if plot:
        plot_learning_curves(read_report(out / "report.csv"), out / "learning_curves.png",
                             title=cfg.algorithm, episodes_per_iter=episodes_per_iteration(cfg))
    last = report.records[-1]
    log.info("%s: %d iterations in %.1f s, final success %.2f", cfg.algorithm,
             len(report.records), elapsed, last.success_rate)
    return out


def _train_job(args):
    cfg, out = args
    return train(cfg, out, plot=True)


def _cmd_train(ns) -> int:
    cfg = load_config(ns.config)
    if ns.seed is not None:
        cfg = dataclasses.replace(cfg, seed=ns.seed)
    out = train(cfg, ns.out, plot=not ns.no_plot)
    with open(out / "report.csv", newline="") as fh:
        last = list(csv.DictReader(fh))[-1]
    print(f"iterations={last['iteration']} success_rate={float(last['success_rate']):.3f} "
          f"mean_final_dist={float(last['mean_final_dist']):.4f} out={out}")
    return 0


def _cmd_eval(ns) -> int:
    cfg = load_config(ns.config)
    pol = load_policy(ns.policy)
    if pol.dx != cfg.env.state_dim or pol.du != cfg.env.action_dim:
        raise ConfigError(f"policy maps {pol.dx}->{pol.du} but the environment needs "
                          f"{cfg.env.state_dim}->{cfg.env.action_dim}")
    seed = cfg.seed if ns.seed is None else ns.seed
    m = evaluate_policy(pol, cfg.env, ns.episodes, cfg.threshold, stream(seed, STREAM_EVAL, 10 ** 6))
    out = Path(ns.out) if ns.out else Path(ns.policy).with_name("eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("episode", "final_dist", "success"))
        for i, d in enumerate(m.distances):
            w.writerow((i, repr(float(d)), int(d < cfg.threshold)))
    print(f"episodes={ns.episodes} success_rate={m.success_rate:.3f} "
          f"mean_final_dist={m.mean_final_dist:.4f} std_final_dist={m.std_final_dist:.4f} "
          f"threshold={cfg.threshold:.4g}")
    return 0


_INT_COLUMNS = ("n_clusters_nonempty", "em_rounds")


def _cell(col, v) -> str:
    return str(int(v)) if col in _INT_COLUMNS else repr(float(v))


def _cmd_compare(ns) -> int:
    cfgs = {"a": load_config(ns.config_a), "b": load_config(ns.config_b)}
    if ns.seed is not None:
        cfgs = {k: dataclasses.replace(c, seed=ns.seed) for k, c in cfgs.items()}
    names = {k: f"{k}_{c.algorithm}" for k, c in cfgs.items()}
    out = Path(ns.out)
    jobs = [(cfgs[k], out / names[k]) for k in ("a", "b")]
    if ns.jobs > 1:
        with ProcessPoolExecutor(max_workers=min(ns.jobs, 2)) as pool:
            list(pool.map(_train_job, jobs))
    else:
        for job in jobs:
            _train_job(job)
    curves = {names[k]: read_report(out / names[k] / "report.csv") for k in ("a", "b")}
    per_iter = {names[k]: episodes_per_iteration(cfgs[k]) for k in ("a", "b")}
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("run", "episodes") + REPORT_COLUMNS)
        for name, cols in curves.items():
            for i in range(len(cols["iteration"])):
                it = int(cols["iteration"][i])
                w.writerow([name, it * per_iter[name], it] +
                           [_cell(c, cols[c][i]) for c in REPORT_COLUMNS[1:]])
    plot_comparison(curves, out / "comparison.png", per_iter)
    for name, cols in curves.items():
        print(f"{name}: final success_rate={cols['success_rate'][-1]:.3f} "
              f"best={np.max(cols['success_rate']):.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfgps", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the configured algorithm")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None, help="override the master seed")
    t.add_argument("--no-plot", action="store_true")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None, help="CSV path (default: eval.csv next to the policy)")
    e.set_defaults(func=_cmd_eval)

    c = sub.add_parser("compare", help="train two configurations and merge their curves")
    c.add_argument("--config-a", required=True)
    c.add_argument("--config-b", required=True)
    c.add_argument("--out", default="compare")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--jobs", type=int, default=1, help="train both runs in parallel when 2")
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(ns, "episodes", 1) < 1:
        print("error: --episodes must be positive", file=sys.stderr)
        return 2
    try:
        return ns.func(ns)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
