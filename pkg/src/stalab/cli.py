"""Command-line entry point: ``stalab <subcommand>``.

Exit codes: 0 success, 1 configuration error, 2 numeric divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import yaml

from . import config as cfgmod
from . import mtl_gain as dm
from . import runner
from .config import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_IO = 3

log = logging.getLogger("stalab")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stalab", description="Stochastic task allocation lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one config over its seeds")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: the config's output_dir)")
    t.add_argument("--baselines", help="reuse a baselines.json instead of training single-task models")
    t.add_argument("--no-figures", action="store_true")

    pr = sub.add_parser("profile", help="frozen-model gradient-angle profiles")
    pr.add_argument("--config", required=True)
    pr.add_argument("--which", required=True, choices=sorted(runner.PROFILE_MODES))
    pr.add_argument("--out", help="output directory (default: the config's output_dir)")
    pr.add_argument("--no-figures", action="store_true")

    c = sub.add_parser("compare", help="train several configs against shared baselines")
    c.add_argument("--configs", required=True, nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--baselines")
    c.add_argument("--no-figures", action="store_true")

    b = sub.add_parser("baseline", help="single-task baselines for a config")
    b.add_argument("--config", required=True)
    b.add_argument("--out", help="output directory (default: the config's output_dir)")

    sub.add_parser("verify-delta-mtl", help="rebuild published gains from their metric pairs")
    return p


def _load(path) -> cfgmod.ExperimentConfig:
    if not Path(path).is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return cfgmod.load(path)


def _out(arg: Optional[str], cfg: cfgmod.ExperimentConfig) -> Path:
    if arg:
        return Path(arg)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    raise ConfigError("no --out given and the config sets no output_dir")


def _baselines(path: Optional[str]):
    return runner.read_baselines(path) if path else None


def _cmd_train(a) -> int:
    cfg = _load(a.config)
    out = _out(a.out, cfg)
    rep = runner.train(cfg, _baselines(a.baselines))
    runner.write_report(out, rep, figures=not a.no_figures)
    m = rep.mean_metrics()
    print(f"{cfg.name}: " + ", ".join(f"metric_{t}={v:.4f}" for t, v in m.items())
          + (f", delta_mtl={rep.delta():+.4f}" if rep.ok_runs else ""))
    if rep.diverged:
        bad = [r["seed"] for r in rep.runs if r["status"] != "ok"]
        print(f"diverged seeds: {bad}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_profile(a) -> int:
    from .plotting import histogram_table
    cfg = _load(a.config)
    res = runner.profile(cfg, a.which, _out(a.out, cfg), figures=not a.no_figures)
    print(histogram_table(res.histograms))
    return EXIT_OK


def _cmd_compare(a) -> int:
    cfgs = [_load(p) for p in a.configs]
    rows, reports = runner.compare(cfgs, a.out, _baselines(a.baselines), figures=not a.no_figures)
    for r in rows:
        print(f"{r.name:20s} {r.delta_mtl:+.4f}  {r.status}")
    return EXIT_DIVERGED if any(rep.diverged for rep in reports) else EXIT_OK


def _cmd_baseline(a) -> int:
    cfg = _load(a.config)
    out = _out(a.out, cfg)
    b = runner.single_task_baselines(cfg)
    runner.write_baselines(out, b)
    print(", ".join(f"metric_{t}={v:.4f}" for t, v in sorted(b.metrics.items())))
    return EXIT_DIVERGED if any(s != "ok" for s in b.status.values()) else EXIT_OK


def _cmd_verify(a) -> int:
    t0 = time.perf_counter()
    rep = dm.verify()
    for line in rep.lines():
        print(line)
    print(f"elapsed {time.perf_counter() - t0:.3f}s")
    return EXIT_OK if rep.passed else EXIT_CONFIG


COMMANDS = {
    "train": _cmd_train, "profile": _cmd_profile, "compare": _cmd_compare,
    "baseline": _cmd_baseline, "verify-delta-mtl": _cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, yaml.YAMLError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
