"""Command-line front end.

Exit codes: 0 success, 2 usage or parameter error, 3 malformed input file,
4 certificate violation, 5 collapse construction failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .collapse import (CollapseError, CollapseParams, build_collapse_map, displacement_report,
                       evaluate_collapse, sample_voxels)
from .evalmap import (UndersamplingError, VoxelSet, area_formula_check, auto_subdivide,
                      cover_image, degree_bound_check, evaluate_map)
from .grid import DomainError, TorusDomain, _require_shared_domain, bracket, bracket_report, sample_field
from .io import FormatError, read_fgrid, read_report, read_voxset, write_fgrid, write_report, write_voxset
from .pipeline import commuting_approximation, commuting_sequence, thickness_upper_bound
from .testsets import random_voxel_set

EXIT_USAGE, EXIT_FORMAT, EXIT_VIOLATION, EXIT_CONSTRUCTION = 2, 3, 4, 5
# simplex pieces processed by the area-formula check before it is skipped
AREA_BUDGET = 50_000_000


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing

def _collapse_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps", type=float, default=1 / 6, help="centre-ball radius cap, in (0, 1/6]")
    p.add_argument("--lambda-cap", type=float, default=30.0, help="steepness of the face map")
    p.add_argument("--flow-steps", type=int, default=64, help="minimum RK4 steps of the clearing flow")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file supplying defaults for any option")
    common.add_argument("--seed", type=int, default=0, help="seed for sampled verification points")

    parser = argparse.ArgumentParser(prog="volbracket", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bracket", parents=[common], help="volume bracket and its norms")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--out", help="write the bracket as an FGRID file")
    p.add_argument("--voxel-size", type=float, default=1 / 128)
    p.add_argument("--dilation", type=int, default=0)
    p.add_argument("--supersample", type=int, default=1)

    p = sub.add_parser("approximate", parents=[common], help="commuting approximation")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--voxel-size", type=float, required=True)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--report", required=True)
    _collapse_options(p)

    p = sub.add_parser("collapse", parents=[common], help="collapse map of a voxel set")
    p.add_argument("--voxels", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--samples", type=int, default=16, help="sample points per voxel")
    p.add_argument("--graph-csv", help="write sampled points and their images as CSV")
    _collapse_options(p)

    p = sub.add_parser("thickness", parents=[common], help="upper bound on thickness")
    p.add_argument("--voxels", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--samples", type=int, default=16)
    _collapse_options(p)

    p = sub.add_parser("sequence", parents=[common], help="approximate a list of surface pairs")
    p.add_argument("--manifest", required=True, help="one 'F.fgrd G.fgrd' pair per line")
    p.add_argument("--report", required=True)
    p.add_argument("--voxel-size", type=float, default=1 / 256)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--out-prefix", help="write approximants as PREFIX<k>_<i>.fgrd")
    _collapse_options(p)

    p = sub.add_parser("verify", parents=[common], help="re-run a saved report and compare")
    p.add_argument("--report", required=True)

    p = sub.add_parser("sample", parents=[common], help="sample an expression into FGRID")
    p.add_argument("--expr", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--period", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("voxels", parents=[common], help="write a seeded random VOXSET")
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--measure", type=float, default=0.01)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--out", required=True)
    return parser


def _read_config(path: str) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{number}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; a ``--config`` file provides defaults that flags override."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        config = _read_config(known.config)
        first = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[first.command]
        allowed = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = sorted(set(config) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys for {first.command}: {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in config and action.nargs == "+":
                config[action.dest] = config[action.dest].split()
        sub.set_defaults(**config)
    return parser.parse_args(argv)


def _params(args) -> CollapseParams:
    try:
        return CollapseParams(eps=args.eps, lambda_cap=args.lambda_cap, flow_steps=args.flow_steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _collapse_config(args) -> dict:
    return {"eps": args.eps, "lambda_cap": args.lambda_cap, "flow_steps": args.flow_steps}


def _envelope(command: str, config: dict, report: dict) -> dict:
    return {"command": command, "config": config, "report": report,
            "metadata": {"tool": "volbracket", "version": __version__}}


def _read_fields(paths):
    fields = [read_fgrid(p) for p in paths]
    domain = _require_shared_domain(fields)
    if len(fields) != domain.n:
        raise DomainError(f"{domain.n}-torus needs {domain.n} fields, got {len(fields)}")
    return fields


# ---------------------------------------------------------------------------
# commands return (envelope, violations); with emit=False they write no
# artifacts, which lets ``verify`` re-run them dry

def cmd_bracket(args, emit=True):
    fields = _read_fields(args.inputs)
    rep = bracket_report(fields)
    voxels = cover_image(fields, args.voxel_size, args.dilation)
    degree = degree_bound_check(voxels, rep)
    sample = evaluate_map(fields, args.supersample)
    k = auto_subdivide(sample, args.voxel_size)
    pieces = len(sample.points) * math.factorial(sample.domain.n) * k ** sample.domain.n
    residual = None
    if pieces <= AREA_BUDGET:
        residual = area_formula_check(fields, sample, args.voxel_size, k)
    report = {**rep.to_dict(), "measure_K": voxels.measure, "area_formula_residual": residual,
              "degree_bound_ok": degree.ok}
    if degree.note:
        report["degree_note"] = degree.note
    if residual is None:
        report["area_formula_note"] = f"skipped: {pieces} simplex pieces exceed budget"
    if emit and args.out:
        write_fgrid(args.out, bracket(fields))
    config = {"inputs": list(args.inputs), "voxel_size": args.voxel_size,
              "dilation": args.dilation, "supersample": args.supersample}
    violations = [] if rep.epsilon == rep.l1_norm / 2 else ["epsilon != l1_norm / 2"]
    return _envelope("bracket", config, report), violations


def cmd_approximate(args, emit=True):
    fields = _read_fields(args.inputs)
    new, rep = commuting_approximation(fields, args.voxel_size, args.dilation, _params(args))
    if emit:
        for i, f in enumerate(new, 1):
            write_fgrid(f"{args.out_prefix}{i}.fgrd", f)
    config = {"inputs": list(args.inputs), "voxel_size": args.voxel_size,
              "dilation": args.dilation, **_collapse_config(args)}
    return _envelope("approximate", config, rep.to_dict()), list(rep.violations)


def _displacement_violations(cert) -> list[str]:
    out = []
    if cert.max_displacement > cert.bound * (1 + 1e-6):
        out.append(f"displacement {cert.max_displacement:.6g} exceeds |K|^(1/n) = {cert.bound:.6g}")
    if cert.skeleton_max_distance is not None and cert.skeleton_max_distance > 1e-9:
        out.append(f"image lies {cert.skeleton_max_distance:.3g} off the skeleton")
    return out


def cmd_collapse(args, emit=True):
    k = read_voxset(args.voxels)
    cmap = build_collapse_map(k, _params(args))
    cert = displacement_report(cmap, k, args.samples, args.seed)
    report = {**cmap.to_dict(), "measure": k.measure, "displacement": cert.to_dict()}
    if emit and args.graph_csv:
        pts = sample_voxels(k, args.samples, args.seed)
        img = evaluate_collapse(cmap, pts) if len(pts) else pts
        with open(args.graph_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(k.n)] + [f"phi{i}" for i in range(k.n)])
            for a, b in zip(pts, img):
                w.writerow([repr(float(v)) for v in (*a, *b)])
    config = {"voxels": args.voxels, "samples": args.samples, "seed": args.seed,
              **_collapse_config(args)}
    return _envelope("collapse", config, report), _displacement_violations(cert)


def cmd_thickness(args, emit=True):
    k = read_voxset(args.voxels)
    try:
        rep, _ = thickness_upper_bound(k, _params(args), args.samples, args.seed)
    except ValueError as exc:
        if isinstance(exc, (FormatError, UndersamplingError)):
            raise
        raise UsageError(str(exc)) from None
    violations = _displacement_violations(rep.certificate)
    if rep.thickness_upper ** k.n > rep.measure * (1 + 1e-3):
        violations.append("thickness_upper^n exceeds the measure")
    config = {"voxels": args.voxels, "samples": args.samples, "seed": args.seed,
              **_collapse_config(args)}
    return _envelope("thickness", config, rep.to_dict()), violations


def _read_manifest(path: str) -> list[tuple[str, str]]:
    base = Path(path).parent
    pairs = []
    for number, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise UsageError(f"{path}:{number}: expected two FGRID paths")
        pairs.append(tuple(str(base / p) for p in parts))
    return pairs


def cmd_sequence(args, emit=True):
    paths = _read_manifest(args.manifest)
    pairs = [(read_fgrid(a), read_fgrid(b)) for a, b in paths]
    outputs, rep = commuting_sequence(pairs, args.voxel_size, _params(args), args.dilation)
    if emit and args.out_prefix:
        for k, out in enumerate(outputs, 1):
            if out is not None:
                for i, f in enumerate(out, 1):
                    write_fgrid(f"{args.out_prefix}{k}_{i}.fgrd", f)
    config = {"manifest": args.manifest, "voxel_size": args.voxel_size,
              "dilation": args.dilation, **_collapse_config(args)}
    report = rep.to_dict()
    failures = [e for e in rep.entries if e.error]
    violations = [f"pair {e.index}: displacement {e.displacement:.6g} exceeds {e.measure_bound:.6g}"
                  for e in rep.entries
                  if e.displacement is not None and e.displacement > e.measure_bound * (1 + 1e-6)]
    env = _envelope("sequence", config, report)
    if failures:
        env["failed_pairs"] = [e.index for e in failures]
    return env, violations


COMMANDS = {"bracket": cmd_bracket, "approximate": cmd_approximate, "collapse": cmd_collapse,
            "thickness": cmd_thickness, "sequence": cmd_sequence}


def _namespace_from(saved: dict) -> argparse.Namespace:
    command, config = saved.get("command"), saved.get("config")
    if command not in COMMANDS or not isinstance(config, dict):
        raise FormatError("report has no re-runnable command/config")
    defaults = {"out": None, "graph_csv": None, "out_prefix": None, "seed": 0}
    return argparse.Namespace(**{**defaults, **config})


def cmd_verify(args):
    saved = read_report(args.report)
    ns = _namespace_from(saved)
    env, violations = COMMANDS[saved["command"]](ns, emit=False)
    problems = list(violations)
    if env["report"] != saved.get("report"):
        differing = sorted(k for k in set(env["report"]) | set(saved.get("report") or {})
                           if env["report"].get(k) != (saved.get("report") or {}).get(k))
        problems.append(f"re-run differs from saved report in: {', '.join(differing)}")
    for p in problems:
        print(f"verify: {p}", file=sys.stderr)
    print("verify: ok" if not problems else "verify: FAILED")
    return EXIT_VIOLATION if problems else 0


def cmd_sample(args):
    domain = TorusDomain(args.n, args.resolution, (args.period,) * args.n)
    write_fgrid(args.out, sample_field(domain, args.expr))
    return 0


def cmd_voxels(args):
    if args.count == 0:
        write_voxset(args.out, VoxelSet(args.n, 1.0, np.zeros(args.n), np.zeros((0, args.n))))
    else:
        write_voxset(args.out, random_voxel_set(args.seed, args.n, args.measure, args.count))
    return 0


def run(args) -> int:
    if args.command == "verify":
        return cmd_verify(args)
    if args.command == "sample":
        return cmd_sample(args)
    if args.command == "voxels":
        return cmd_voxels(args)
    env, violations = COMMANDS[args.command](args)
    write_report(args.report, env)
    for v in violations:
        print(f"certificate violation: {v}", file=sys.stderr)
    if violations:
        return EXIT_VIOLATION
    if env.get("failed_pairs"):
        return EXIT_CONSTRUCTION
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return run(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except CollapseError as exc:
        print(f"construction failed: {exc}", file=sys.stderr)
        return EXIT_CONSTRUCTION
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
