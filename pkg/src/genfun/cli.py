"""Command-line front end.

Subcommands:
  check <config>              run the configured checks, write report files
  dualize <config>            emit a sampled table of dual values and derivatives
  transform <config> <in.csv> g-transform of a sampled function onto the y-grid
  list                        print catalog ids, parameters, known properties

Exit codes for `check`: 0 all holds, 1 some check fails, 2 inconclusive
present (no fails), 3 config error.  GENFUN_THREADS caps the worker count;
results are byte-identical for any value.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import catalog
from .duality import dualize_table
from .errors import ConfigError, GenFunError
from .gconvex import Grid, g_transform, read_sampled_csv, write_sampled_csv
from .runner import build_gf, emit_report, parse_config, run_scenario


def _cmd_check(args) -> int:
    cfg = parse_config(args.config)
    report = run_scenario(cfg)
    written = emit_report(report, output_dir=args.output_dir or cfg.output_dir)
    for cid, rep in report.checks:
        margin = f"{rep.margin:.6g}" if np.isfinite(rep.margin) else "nan"
        print(f"{rep.verdict.value.upper():12s} {cid:12s} margin={margin}")
    print(f"overall: {report.overall}")
    for kind, path in written.items():
        print(f"wrote {kind}: {path}")
    return report.exit_code()


def _cmd_dualize(args) -> int:
    cfg = parse_config(args.config)
    gf = build_gf(cfg)
    table = dualize_table(gf, cfg.samples, cfg.seed, defaults=cfg.defaults())
    out = Path(args.output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dualize.csv"
    n = gf.dim
    cols = (
        [f"x{i}" for i in range(n)] + [f"y{i}" for i in range(n)]
        + ["u", "gstar"]
        + [f"gstar_x{i}" for i in range(n)] + [f"gstar_y{i}" for i in range(n)]
        + ["gstar_u"]
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    print(f"wrote {path} ({table.shape[0]} rows)")
    return 0


def _cmd_transform(args) -> int:
    cfg = parse_config(args.config)
    gf = build_gf(cfg)
    u = read_sampled_csv(args.input)
    y_grid = Grid(box=gf.gamma.shrunk(gf.gamma.y_box), shape=(cfg.y_grid,) * gf.dim)
    v = g_transform(gf, u, y_grid, defaults=cfg.defaults())
    out = Path(args.output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "transform.csv"
    write_sampled_csv(v, path)
    print(f"wrote {path} (clip fraction {v.meta['clip_fraction']:.3g})")
    return 0


def _cmd_list(args) -> int:
    for entry in catalog.list_catalog():
        print(f"{entry.id}: {entry.description}")
        params = ", ".join(f"{k}={v}" for k, v in sorted(entry.default_params.items()))
        print(f"  params: {params}")
        for cond in sorted(entry.known_properties):
            prop = entry.known_properties[cond]
            print(f"  {cond}: {prop['verdict']} ({prop['provenance']})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="genfun",
        description="Convexity checks for generating functions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_check = sub.add_parser("check", help="run a scenario config")
    p_check.add_argument("config")
    p_check.add_argument("--output-dir", default=None)
    p_check.set_defaults(func=_cmd_check)

    p_dual = sub.add_parser("dualize", help="emit a sampled dual-value table")
    p_dual.add_argument("config")
    p_dual.add_argument("--output-dir", default=None)
    p_dual.set_defaults(func=_cmd_dualize)

    p_tr = sub.add_parser("transform", help="g-transform of a sampled-function CSV")
    p_tr.add_argument("config")
    p_tr.add_argument("input")
    p_tr.add_argument("--output-dir", default=None)
    p_tr.set_defaults(func=_cmd_transform)

    p_list = sub.add_parser("list", help="print the catalog")
    p_list.set_defaults(func=_cmd_list)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except GenFunError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
