"""Command-line driver: ``fqv <subcommand> [flags]``.

Exit status: 0 when every tolerance flag passes, 1 on a tolerance failure,
2 on usage or config errors.  Every run writes its artifacts plus a
``manifest.json`` (sha256 per file) under ``--out``.
"""

from __future__ import annotations

import argparse
import datetime
import difflib
import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from . import experiments as ex
from . import functionals as fn
from . import partitions as parts
from .paths import ParameterError, save_path, to_csv

EXPERIMENT_COMMANDS = {
    "qv": "qv",
    "integrate": "change_of_variable",
    "isometry": "isometry",
    "lebesgue": "isometry_lebesgue",
    "uniqueness": "uniqueness",
    "remainder": "remainder",
    "decompose": "decomposition",
    "ito-mc": "ito_mc",
    "assumptions": "assumptions",
}

HELP = {
    "generate": "generate a path and write it as .fqvp and CSV",
    "partition": "build a partition ladder and write it as CSV and JSON",
    "qv": "quadratic variation along a partition ladder",
    "integrate": "both Riemann-sum integrals and the change-of-variable residual",
    "isometry": "isometry gap along dyadic partitions",
    "lebesgue": "hitting-time partitions: counts, mesh and isometry gap",
    "uniqueness": "gap between approximation-based and path-based Riemann sums",
    "remainder": "log-log exponent of the first-order remainder",
    "decompose": "rough-smooth decomposition and its QV ratio",
    "ito-mc": "Monte Carlo check of the Ito isometry",
    "assumptions": "sampled Lipschitz, oscillation and horizontal-Lipschitz evidence",
    "report": "print or re-export a JSON report",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _range(text: str):
    bits = text.split(":")
    if len(bits) not in (2, 3):
        raise argparse.ArgumentTypeError(f"expected A:B or A:B:base, got {text!r}")
    try:
        lo, hi = int(bits[0]), int(bits[1])
        base = float(bits[2]) if len(bits) == 3 else None
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}") from None
    return lo, hi, base


def _tol(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=VAL, got {text!r}")
    name, val = text.split("=", 1)
    try:
        return name, float(val)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tolerance {name} is not a number: {val!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON experiment config; flags override its values")
    p.add_argument("--out", metavar="DIR", default="fqv-out", help="output directory (default: fqv-out)")
    p.add_argument("--seed", type=int, help="path seed")
    p.add_argument("--grid", type=int, metavar="M", help="number of grid steps M (default 2^20)")
    p.add_argument("--horizon", type=float, metavar="T", help="time horizon T (default 1)")
    p.add_argument("--path", metavar="SPEC", help="path spec name:key=value,... (e.g. brownian:seed=42)")
    p.add_argument("--functional", metavar="SPEC", help="built-in functional name or JSON expression")
    p.add_argument("--dyadic", type=_range, metavar="A:B", help="dyadic levels A..B")
    p.add_argument("--lebesgue", type=_range, metavar="A:B[:base]", help="hitting-time levels A..B")
    p.add_argument("--tol", type=_tol, action="append", default=[], metavar="NAME=VAL",
                   help="tolerance override (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="worker threads (capped by FQV_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fqv", description="Pathwise integration along partitions: experiments.")
    parser.add_argument("--version", action="version", version=f"fqv {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in ("generate", "partition", *EXPERIMENT_COMMANDS, "report"):
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        if name == "report":
            p.add_argument("report", metavar="REPORT_JSON", help="report written by an experiment command")
            p.add_argument("--csv", action="store_true", help="print the per-level CSV instead of a summary")
            p.add_argument("--out", metavar="DIR", help="also re-export report.csv under DIR")
            continue
        _common(p)
        if name == "remainder":
            p.add_argument("--expansion", action="store_true",
                           help="fit the second-order expansion residual instead")
            p.add_argument("--count", type=int, help="samples per scale (default 256)")
        if name == "ito-mc":
            p.add_argument("--seeds", type=int, help="number of Monte Carlo seeds (default 200)")
        if name == "lebesgue":
            p.add_argument("--levels", type=_range, metavar="A:B[:base]", help="same as --lebesgue")
        if name == "assumptions":
            p.add_argument("--pairs", type=int, help="sampled path pairs (default 256)")
    return parser


def parse_path_spec(text: str) -> dict:
    """``name:key=value,...``; a bare value is the generator's main parameter."""
    name, _, rest = text.partition(":")
    spec: Dict[str, object] = {"generator": name}
    positional = {"constant": "level", "fbm": "H", "brownian": "seed", "file": "file", "linear": "slope"}
    for item in filter(None, rest.split(",")):
        if "=" in item:
            key, val = item.split("=", 1)
        elif name in positional:
            key, val = positional[name], item
        else:
            raise UsageError(f"path spec {text!r}: {item!r} is not key=value")
        spec[key] = val if key == "file" else _number(val)
    return spec


def _number(val: str):
    try:
        return int(val)
    except ValueError:
        try:
            return float(val)
        except ValueError:
            raise UsageError(f"not a number: {val!r}") from None


def _functional_spec(text: str):
    if text in fn.BUILTINS:
        return text
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise UsageError(f"unknown functional {text!r}; built-ins: {', '.join(sorted(fn.BUILTINS))}") from None


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ex.ConfigError("--config", str(exc)) from None


def config_from_args(args, kind: str) -> ex.ExperimentConfig:
    raw = _load_config(args.config)
    raw["kind"] = kind
    path = dict(raw.get("path", {"generator": "brownian", "seed": 42}))
    if args.path:
        path = parse_path_spec(args.path)
    if args.seed is not None:
        path["seed"] = args.seed
    if args.grid is not None:
        path["M"] = args.grid
    if args.horizon is not None:
        path["T"] = args.horizon
    raw["path"] = path
    if args.functional:
        raw["functional"] = _functional_spec(args.functional)
    part = dict(raw.get("partition", {}))
    if kind == "isometry_lebesgue":
        part.setdefault("kind", "lebesgue")
        part.setdefault("n_min", 4)
        part.setdefault("n_max", 9)
    if args.dyadic:
        part.update(kind="dyadic", n_min=args.dyadic[0], n_max=args.dyadic[1])
    levels = getattr(args, "levels", None)
    if levels and not args.lebesgue:
        args.lebesgue = levels
    if args.lebesgue:
        part.update(kind="lebesgue", n_min=args.lebesgue[0], n_max=args.lebesgue[1])
        if args.lebesgue[2] is not None:
            part["level_base"] = args.lebesgue[2]
    raw["partition"] = part
    tols = dict(raw.get("tolerances", {}))
    tols.update(dict(args.tol))
    raw["tolerances"] = tols
    opts = dict(raw.get("options", {}))
    if args.workers != 1:
        opts["workers"] = args.workers
    for flag, key in (("count", "count"), ("seeds", "seeds"), ("pairs", "pairs")):
        val = getattr(args, flag, None)
        if val is not None:
            opts[key] = val
    if opts:
        raw["options"] = opts
    return ex.ExperimentConfig.from_dict(raw)


def _write_manifest(out: Path, hashes: Dict[str, str], command: str) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "files": {k: hashes[k] for k in sorted(hashes)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _write(out: Path, name: str, data, hashes: Dict[str, str]) -> None:
    blob = data.encode() if isinstance(data, str) else data
    (out / name).write_bytes(blob)
    hashes[name] = hashlib.sha256(blob).hexdigest()


def _summary(report: ex.ConvergenceReport) -> str:
    lines = [f"{report.config.kind}: {report.metadata.get('label', '')}"]
    for name, ok in report.flags.items():
        lines.append(f"  {'PASS' if ok else 'FAIL'} {name}")
    rate = report.fitted_rate.to_dict()
    if "slope" in rate:
        lines.append(f"  fitted rate {rate['slope']:.4f} (r2 {rate['r_squared']:.3f})")
    return "\n".join(lines)


def cmd_generate(args) -> int:
    # no partition is built here; keep the default ladder from rejecting small grids
    if not args.dyadic and not args.lebesgue:
        args.dyadic = (0, 0)
    cfg = config_from_args(args, "qv")
    path = ex.build_path(cfg.path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hashes: Dict[str, str] = {}
    save_path(path, out / "path.fqvp")
    hashes["path.fqvp"] = hashlib.sha256((out / "path.fqvp").read_bytes()).hexdigest()
    _write(out, "path.csv", to_csv(path), hashes)
    _write_manifest(out, hashes, "generate")
    print(f"wrote {path.label} to {out}")
    return 0


def cmd_partition(args) -> int:
    cfg = config_from_args(args, "qv")
    path = ex.build_path(cfg.path)
    seq = ex.build_partitions(cfg, path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hashes: Dict[str, str] = {}
    _write(out, "partitions.csv", parts.to_csv(seq), hashes)
    _write(out, "partitions.json", json.dumps(parts.to_json(seq), sort_keys=True) + "\n", hashes)
    _write_manifest(out, hashes, "partition")
    for n, p in seq:
        print(f"n={n} points={len(p)} mesh={parts.mesh(p)!r}")
    return 0


def cmd_experiment(args) -> int:
    kind = EXPERIMENT_COMMANDS[args.command]
    if args.command == "remainder" and args.expansion:
        kind = "expansion"
    cfg = config_from_args(args, kind)
    report = ex.run_experiment(cfg)
    out = Path(args.out)
    hashes = ex.write_report(report, out)
    _write_manifest(out, hashes, args.command)
    print(_summary(report))
    return 0 if report.passed else 1


def cmd_report(args) -> int:
    try:
        data = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ex.ConfigError("report", str(exc)) from None
    cols = data["columns"]
    lines = [",".join(cols)]
    for row in data["rows"]:
        lines.append(",".join("" if row.get(c) is None else repr(row[c]) for c in cols))
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        hashes: Dict[str, str] = {}
        _write(out, "report.csv", csv_text, hashes)
        _write_manifest(out, hashes, "report")
    if args.csv:
        sys.stdout.write(csv_text)
    else:
        print(f"{data['config']['kind']}: passed={data['passed']}")
        for name, ok in sorted(data["flags"].items()):
            print(f"  {'PASS' if ok else 'FAIL'} {name}")
    return 0 if data["passed"] else 1


def _suggest(parser: argparse.ArgumentParser, argv: List[str], unknown: List[str]) -> str:
    options = set()
    for action in parser._subparsers._group_actions if parser._subparsers else []:
        for name, sp in action.choices.items():
            if argv and argv[0] == name:
                for a in sp._actions:
                    options.update(a.option_strings)
    msgs = []
    flags = [u for u in unknown if u.startswith("-")]
    for u in flags or unknown:
        flag = u.split("=", 1)[0]
        close = difflib.get_close_matches(flag, sorted(options), n=1)
        hint = f" (did you mean {close[0]}?)" if close else ""
        msgs.append(f"unrecognized argument {u}{hint}")
    return "; ".join(msgs)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, unknown = parser.parse_known_args(argv)
        if unknown:
            raise UsageError(f"fqv: error: {_suggest(parser, argv, unknown)}")
        if not args.command:
            parser.print_help(sys.stderr)
            return 2
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "partition":
            return cmd_partition(args)
        if args.command == "report":
            return cmd_report(args)
        return cmd_experiment(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ex.ConfigError, ParameterError, fn.CapabilityError) as exc:
        print(f"fqv: config error: {exc}", file=sys.stderr)
        return 2
