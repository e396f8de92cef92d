"""Command-line front end: ``bondsim check|simulate|linearize|render|models``.

Exit status is 0 on success, 1 when the model has errors (diagnostics,
algebraic loops, runtime failures) and 2 for usage or I/O problems.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from . import models
from .causality import assign
from .compiler import BondGraphError, derive
from .core import validate
from .dsl import ParseError, emit_dot, load
from .expr import ExpressionError, parse_expr
from .lti import extract, transfer_function
from .sim import SimConfig, energy_report, simulate


class UsageError(Exception):
    """Bad flag values or bindings (exit 2)."""


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0 or v != v or v == float("inf"):
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _index(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0: {text!r}")
    return v


def _assignment(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep or not name.strip() or not value.strip():
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    return name.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bondsim", description="Bond-graph modelling tools.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="validate and assign causality")
    c.add_argument("input")

    s = sub.add_parser("simulate", help="integrate and write a CSV trajectory")
    s.add_argument("input")
    s.add_argument("--dt", type=_positive_float, default=1e-3)
    s.add_argument("--t-end", type=_positive_float, default=1.0)
    s.add_argument("--record-every", type=_positive_int, default=1)
    s.add_argument("-o", dest="output_path")
    s.add_argument("--set", dest="bindings", type=_assignment, action="append", default=[])

    li = sub.add_parser("linearize", help="state-space model and transfer function")
    li.add_argument("input")
    li.add_argument("--input", dest="input_index", type=_index, default=0)
    li.add_argument("--output", dest="output_index", type=_index, default=0)
    li.add_argument("-o", dest="output_path")
    li.add_argument("--set", dest="bindings", type=_assignment, action="append", default=[])

    r = sub.add_parser("render", help="write a DOT rendering")
    r.add_argument("input")
    r.add_argument("-o", dest="output_path")

    m = sub.add_parser("models", help="list or export the built-in models")
    m.add_argument("name", nargs="?")
    m.add_argument("-o", dest="output_path")
    return p


def _write(text: str, path: str | None, out) -> None:
    if path is None:
        out.write(text)
    else:
        Path(path).write_text(text)


def _load(path: str):
    try:
        return load(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise UsageError(f"cannot read {path}: not UTF-8 text") from None


def _bindings(system, pairs) -> dict:
    known = {u.element for u in system.inputs}
    out = {}
    for name, value in pairs:
        if name not in known:
            raise UsageError(f"--set {name}: not an external source (have {', '.join(sorted(known)) or 'none'})")
        try:
            out[name] = float(value)
        except ValueError:
            try:
                parse_expr(value)
            except ExpressionError as exc:
                raise UsageError(f"--set {name}: {exc}") from None
            out[name] = value
    return out


def _compile(graph, err) -> object | None:
    errors = [d for d in validate(graph) if d.severity == "error"]
    for d in errors:
        print(d, file=err)
    if errors:
        return None
    a = assign(graph)
    bad = [d for d in a.diagnostics if d.kind in ("Conflict", "DerivativeCausality")]
    for d in bad:
        print(d, file=err)
    if bad:
        return None
    return derive(graph, a)


def cmd_check(args, out, err) -> int:
    graph = _load(args.input)
    status = 0
    for d in validate(graph):
        if d.severity == "error":
            print(d, file=err)
            status = 1
        else:
            print(d, file=out)
    if status:
        return 1
    a = assign(graph)
    for d in a.diagnostics:
        fatal = d.kind in ("Conflict", "DerivativeCausality")
        print(d, file=err if fatal else out)
        status |= fatal
    if status == 0:
        try:
            derive(graph, a)
        except BondGraphError as exc:
            print(f"error: {exc}", file=err)
            status = 1
    dims = {s.id: sum(p.bond.dim for p in graph.ports(s.id)) for s in graph.storages()}
    nstates = sum(dims[e] for e in a.integral)
    print(f"states: {nstates}, differential: {len(a.differential)}", file=out)
    return status


def cmd_simulate(args, out, err) -> int:
    graph = _load(args.input)
    system = _compile(graph, err)
    if system is None:
        return 1
    cfg = SimConfig(args.t_end, args.dt, args.record_every, _bindings(system, args.bindings))
    traj = simulate(system, cfg)
    csv = traj.to_csv()
    summary = energy_report(traj).summary()
    if args.output_path is None:
        out.write(csv)
        err.write(summary)
    else:
        _write(csv, args.output_path, out)
        out.write(summary)
    return 0


def cmd_linearize(args, out, err) -> int:
    graph = _load(args.input)
    system = _compile(graph, err)
    if system is None:
        return 1
    u0 = system.inputs_vector({k: float(v) for k, v in _bindings(system, args.bindings).items() if not isinstance(v, str)})
    ss = extract(system, operating_point=(0.0, system.x0, u0))
    text = ss.to_text()
    m, p = ss.B.shape[1], ss.C.shape[0]
    if m and p:
        if args.input_index >= m or args.output_index >= p:
            raise UsageError(f"--input/--output out of range (inputs {m}, outputs {p})")
        tf = transfer_function(ss, args.input_index, args.output_index)
        text += f"# transfer function {ss.input_labels[args.input_index]} -> {ss.output_labels[args.output_index]}\n"
        text += tf.to_text()
    else:
        text += "# no transfer function: model has no inputs or no probes\n"
    _write(text, args.output_path, out)
    return 0


def cmd_render(args, out, err) -> int:
    graph = _load(args.input)
    errors = [d for d in validate(graph) if d.severity == "error"]
    _write(emit_dot(graph, None if errors else assign(graph)), args.output_path, out)
    return 0


def cmd_models(args, out, err) -> int:
    if args.name is None:
        for name in models.CORPUS:
            print(name, file=out)
        return 0
    if args.name not in models.CORPUS:
        raise UsageError(f"unknown model {args.name!r} (have {', '.join(models.CORPUS)})")
    _write(models.corpus_text(args.name), args.output_path, out)
    return 0


COMMANDS = {
    "check": cmd_check,
    "simulate": cmd_simulate,
    "linearize": cmd_linearize,
    "render": cmd_render,
    "models": cmd_models,
}


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, out, err)
    except ParseError as exc:
        for issue in exc.issues:
            print(f"{args.input}:{issue}", file=err)
        return 1
    except UsageError as exc:
        print(f"bondsim: {exc}", file=err)
        return 2
    except OSError as exc:
        print(f"bondsim: {exc}", file=err)
        return 2
    except BondGraphError as exc:
        print(f"bondsim: {exc}", file=err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
