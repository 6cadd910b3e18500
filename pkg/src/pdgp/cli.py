"""Command-line entry points.

``pdgp run`` executes one run and writes its outputs; ``pdgp compare``
aligns the step traces of two or more finished runs.  Failures caused by
configuration or I/O problems exit nonzero with a single parseable line
``ERROR <Class>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .network import HorizonExceeded
from .runner import MODES, RunSpec, run
from .scenario import ConfigError, load_config


class MismatchedHorizons(Exception):
    """Compared runs cover different step grids."""


def _build_parser():
    p = argparse.ArgumentParser(prog="pdgp",
                                description="online primal-dual coordination "
                                            "with learned user costs")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="execute one run")
    pr.add_argument("--config", help="TOML scenario config (default built-in)")
    pr.add_argument("--mode", choices=MODES, default="gp")
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--steps", type=int, default=None,
                    help="run only this many steps")
    pr.add_argument("--output-dir", required=True)
    pr.add_argument("--oracle-cadence", type=int, default=1,
                    help="solve the reference problem every k-th step")

    pc = sub.add_parser("compare", help="align finished runs")
    pc.add_argument("run_dirs", nargs="+", help="output dirs of pdgp run")
    pc.add_argument("--output", help="write the aligned CSV here")
    return p


def _read_steps(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    need = ("t", "reg_running", "acv_running", "xi_running")
    for c in need:
        if c not in rows[0]:
            raise ValueError(f"{path}: missing column {c}")
    return rows


def _labels(dirs):
    base = [Path(d).name or "run" for d in dirs]
    out = []
    for i, b in enumerate(base):
        out.append(b if base.count(b) == 1 else f"{b}{i}")
    return out


def _cmd_run(args):
    cfg = load_config(args.config) if args.config else None
    spec = RunSpec(config=cfg, mode=args.mode, seed=args.seed,
                   steps=args.steps, output_dir=args.output_dir,
                   oracle_cadence=args.oracle_cadence)
    result = run(spec)
    s = result.summary
    print(f"completed {s['steps']} steps in mode {s['mode']} (seed {s['seed']})")
    for key in ("regret", "acv", "xi", "tracking_fraction_post_warmup"):
        if key in s:
            print(f"  {key}: {s[key]:.6g}")
    print(f"  outputs: {result.paths.get('steps', '(not written)')}")
    return 0


def _cmd_compare(args):
    if len(args.run_dirs) < 2:
        raise ValueError("compare needs at least two run dirs")
    labels = _labels(args.run_dirs)
    tables = []
    for d in args.run_dirs:
        tables.append(_read_steps(Path(d) / "steps.csv"))
    t0 = [r["t"] for r in tables[0]]
    for d, tab in zip(args.run_dirs[1:], tables[1:]):
        if [r["t"] for r in tab] != t0:
            raise MismatchedHorizons(
                f"{args.run_dirs[0]} has {len(t0)} steps, {d} has {len(tab)}")

    cols = ["t"]
    for lab in labels:
        cols += [f"reg_running_{lab}", f"acv_running_{lab}", f"xi_running_{lab}"]
    lines = [",".join(cols)]
    for i in range(len(t0)):
        row = [t0[i]]
        for tab in tables:
            row += [tab[i]["reg_running"], tab[i]["acv_running"],
                    tab[i]["xi_running"]]
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", newline="") as fh:
            fh.write(text)
        print(f"wrote {args.output}")

    print(f"{'run':<24}{'regret':>14}{'acv':>14}{'xi':>14}")
    finals = []
    for lab, tab in zip(labels, tables):
        last = tab[-1]
        reg = float(last["reg_running"])
        finals.append(reg)
        print(f"{lab:<24}{reg:>14.6g}{float(last['acv_running']):>14.6g}"
              f"{float(last['xi_running']):>14.6g}")
    print(f"regret gap ({labels[0]} - {labels[1]}): {finals[0] - finals[1]:.6g}")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except (ConfigError, MismatchedHorizons, HorizonExceeded, OSError,
            ValueError) as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
