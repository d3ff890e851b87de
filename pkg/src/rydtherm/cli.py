"""Command-line front end.

Exit codes: 0 success, 2 configuration parse error, 3 validation error,
4 numerical failure (diagnostic recorded in the manifest).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .census import blockade_graph, count_only, enumerate_census, UnsupportedGraph
from .config import (
    OUT_ENV,
    ConfigParseError,
    ConfigValidationError,
    RunConfig,
    load_config,
    resolve_out_dir,
)
from .geometry import InvalidParameter, blockade_radius, build_chain
from .runner import NumericalFailure, execute_pipeline, execute_run, execute_sweep

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, help="override backend.seed")
    p.add_argument("--out-dir", help=f"output directory (default: config, then ${OUT_ENV}, then ./runs)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for shots and sweep points")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="rydtherm", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run one configuration"),
                       ("pipeline", "quench plus master-equation construction")):
        p = sub.add_parser(name, help=text, parents=[common])
        p.add_argument("config")
    p = sub.add_parser("sweep", help="run a configuration over one parameter axis", parents=[common])
    p.add_argument("config")
    p.add_argument("--axis", required=True, help="key=v1,v2,...")
    p = sub.add_parser("census", help="blockade-allowed configuration counts", parents=[common])
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--d", type=float, default=4.0, help="spacing in um")
    p.add_argument("--omega", type=float, default=1.0, help="Rabi frequency in MHz")
    p.add_argument("--C6", type=float, default=470.0, help="GHz um^6")
    p.add_argument("--configs", action="store_true", help="also list the configurations")
    return parser


def _load(path: str, args) -> RunConfig:
    p = Path(path)
    if p.suffix == ".json":
        try:
            obj = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigParseError(f"cannot read {p}: {exc}") from None
        if isinstance(obj, dict) and "software" in obj and "config" in obj:
            cfg = RunConfig({k + "." + kk: vv for k, sec in obj["config"].items() for kk, vv in sec.items()})
        else:
            cfg = load_config(p)
    else:
        cfg = load_config(p)
    updates = {}
    if args.seed is not None:
        updates["backend.seed"] = args.seed
    cfg = cfg.with_values(updates) if updates else cfg
    return cfg


def _census(args) -> int:
    try:
        geom = build_chain(args.N, args.d, args.theta)
        r_b = blockade_radius(args.C6, 2 * math.pi * args.omega)
    except InvalidParameter as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    graph = blockade_graph(geom, r_b)
    out = {"N": args.N, "theta_deg": args.theta, "d_um": args.d, "r_B_um": r_b, "edges": len(graph.edges)}
    if args.configs:
        census = enumerate_census(graph)
        out.update(nu=list(census.nu), D=census.D, configs=list(census.configs))
    else:
        try:
            nu, D = count_only(graph)
        except UnsupportedGraph:
            census = enumerate_census(graph)
            nu, D = list(census.nu), census.D
        out.update(nu=[int(x) for x in nu], D=int(D))
    out["n_max"] = len(out["nu"]) - 1
    print(json.dumps(out))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    if args.command == "census":
        return _census(args)
    try:
        cfg = _load(args.config, args)
        out_dir = resolve_out_dir(cfg, args.out_dir)
        if args.command == "run":
            result = execute_run(cfg, out_dir, args.threads)
        elif args.command == "pipeline":
            result = execute_pipeline(cfg, out_dir, args.threads)
        else:
            result = execute_sweep(cfg, args.axis, out_dir, args.threads)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigValidationError, InvalidParameter) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalFailure as exc:
        print(f"numerical failure: {exc} (see {exc.manifest_path})", file=sys.stderr)
        return EXIT_NUMERICAL
    status = result.get("status", "ok")
    print(json.dumps({"status": status, "out_dir": str(out_dir)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
