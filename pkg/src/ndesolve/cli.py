"""``ndesolve`` command line: desk-scale numerical experiments written as CSV.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import io
import sys

import numpy as np

from . import __version__
from .errors import ConfigurationError, ContractError, NdeError
from .experiments import (
    CNF_FIELDS,
    GRAD_REGIMES,
    PATTERNS,
    brownian_benchmark,
    cnf2d,
    convergence,
    gradcheck,
    stability,
)

COMMANDS = ("convergence", "stability", "gradcheck", "brownian", "cnf2d")

# shared options: name -> (type, default)
COMMON = {
    "solver": (str, None),
    "problem": (str, None),
    "rtol": (float, 1e-6),
    "atol": (float, 1e-8),
    "dt": (float, None),
    "seed": (int, 0),
    "paths": (int, 2000),
    "output": (str, "-"),
}
EXTRA = {
    "convergence": {"dts": (str, None)},
    "stability": {"points": (str, None), "steps": (int, 10_000), "bound": (float, 10.0)},
    "gradcheck": {"regimes": (str, ",".join(GRAD_REGIMES))},
    "brownian": {"source": (str, "interval"), "queries": (int, 1000), "pattern": (str, "backward"),
                 "prebuild": (bool, False), "split": (str, "query"), "cache_size": (int, 128)},
    "cnf2d": {"field": (str, "contraction"), "grid": (int, 41), "extent": (float, 4.0), "steps": (int, 0),
              "trace": (str, "exact"), "repeats": (int, 64)},
}
DEFAULT_SOLVER = {"convergence": "reversible_heun", "stability": "reversible_heun"}
DEFAULT_PROBLEM = {"convergence": "linear_decay", "gradcheck": "mlp"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ndesolve", description="Differential-equation solver experiments as CSV.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "convergence": "error against step size and fitted order",
        "stability": "boundedness on y' = z y over a grid of complex z = lambda dt",
        "gradcheck": "compare gradient regimes against finite differences",
        "brownian": "Brownian source work counters and statistics",
        "cnf2d": "CNF log-density on a 2-D grid",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="file of 'key = value' lines; flags take precedence")
        p.add_argument("--reproducible", action="store_true", default=None,
                       help="omit the timestamp comment line")
        for key, (typ, _) in {**COMMON, **EXTRA[name]}.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action="store_true", default=None)
            else:
                p.add_argument(flag, type=typ, default=None)
    return parser


def read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{n}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(typ, key, value):
    if typ is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, then the config file, then command-line flags."""
    known = {**COMMON, **EXTRA[args.command], "reproducible": (bool, False)}
    cfg = read_config(args.config) if args.config else {}
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys {unknown}; valid: {sorted(known)}")
    out = {}
    for key, (typ, default) in known.items():
        value = getattr(args, key, None)
        if value is None and key in cfg:
            value = cfg[key]
        out[key] = default if value is None else _coerce(typ, key, value)
    out["solver"] = out["solver"] or DEFAULT_SOLVER.get(args.command)
    out["problem"] = out["problem"] or DEFAULT_PROBLEM.get(args.command)
    return out


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def run(command: str, o: dict):
    if command == "convergence":
        dts = _floats(o["dts"]) if o["dts"] else None
        return convergence(o["solver"], o["problem"], dts, n_paths=o["paths"], seed=o["seed"])
    if command == "stability":
        pts = [complex(x.strip().replace(" ", "")) for x in o["points"].split(",")] if o["points"] else None
        return stability(o["solver"], pts, n_steps=o["steps"], bound=o["bound"])
    if command == "gradcheck":
        regimes = [r.strip() for r in o["regimes"].split(",") if r.strip()]
        kwargs = {"dt": o["dt"]} if o["dt"] else {}
        return gradcheck(o["problem"], regimes, o["rtol"], o["atol"], o["seed"], **kwargs)
    if command == "brownian":
        if o["pattern"] not in PATTERNS:
            raise ConfigurationError(f"unknown pattern {o['pattern']!r}; valid: {list(PATTERNS)}")
        return brownian_benchmark(o["source"], o["queries"], o["pattern"], o["seed"], o["prebuild"],
                                  o["split"], o["cache_size"])
    if o["field"] not in CNF_FIELDS:
        raise ConfigurationError(f"unknown CNF field {o['field']!r}; valid: {list(CNF_FIELDS)}")
    return cnf2d(o["field"], o["grid"], o["extent"], o["steps"], o["trace"], o["rtol"], o["atol"],
                 o["seed"], o["repeats"])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def render_csv(header, rows, reproducible: bool) -> str:
    buf = io.StringIO()
    if not reproducible:
        buf.write(f"# generated {datetime.datetime.now(datetime.timezone.utc).isoformat()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        opts = resolve(args)
        header, rows = run(args.command, opts)
        text = render_csv(header, rows, opts["reproducible"])
    except (ConfigurationError, ContractError, OSError) as exc:
        print(f"ndesolve: error: {exc}", file=sys.stderr)
        return 2
    except (NdeError, FloatingPointError, ArithmeticError) as exc:
        print(f"ndesolve: numerical failure: {exc}", file=sys.stderr)
        return 1
    if opts["output"] == "-":
        sys.stdout.write(text)
    else:
        with open(opts["output"], "w", newline="") as fh:
            fh.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
