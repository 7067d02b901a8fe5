"""Command line front end: ``cosim run | converge | stability``.

Runs are described by a plain ``key = value`` file (``#`` starts a comment);
every key has a command line flag twin and flags override the file. Results
are CSV with ``#`` header lines echoing the complete configuration, so a file
documents how to reproduce itself.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import DEFAULT_H_SERIES, convergence_study, energy_drift
from .coupling import CouplingError, MasterConfig, Scheme, run_master
from .models import MODEL_NAMES, build_problem, default_params
from .solvers import IntegratorConfig, Method

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "format_config",
    "cmd_run",
    "cmd_converge",
    "cmd_stability",
    "read_csv",
    "CsvData",
    "main",
]


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    model: str = "spring-mass"
    scheme: Scheme = Scheme.PLAIN
    extrap: int = 0
    hermite: bool = False
    H: float = 0.2
    t_end: float = 20.0
    method: Method = Method.RK54
    abs_tol: float = 1e-12
    rel_tol: float = 1e-12
    max_step: float = math.inf
    initial_step: Optional[float] = None
    inversion_epsilon: float = 1e-6
    samples_per_interval: int = 10
    H_list: tuple[float, ...] = DEFAULT_H_SERIES
    workers: int = 1
    params: tuple[tuple[str, float], ...] = ()
    out: Optional[str] = None

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.method, self.abs_tol, self.rel_tol, self.max_step, self.initial_step)

    def master(self) -> MasterConfig:
        return MasterConfig(
            scheme=self.scheme, H=self.H, t_end=self.t_end, degree=self.extrap,
            hermite=self.hermite, integrator=self.integrator(),
            inversion_epsilon=self.inversion_epsilon,
            samples_per_interval=self.samples_per_interval)

    def param_dict(self) -> dict[str, float]:
        return dict(self.params)


# -- value parsers --------------------------------------------------------------

def _float(text):
    value = float(text)
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


def _positive(text):
    value = _float(text)
    if not value > 0:
        raise ValueError("must be positive")
    return value


def _nonneg(text):
    value = _float(text)
    if not value >= 0:
        raise ValueError("must be non-negative")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise ValueError("must be a positive integer")
    return value


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _model(text):
    if text not in MODEL_NAMES:
        raise ValueError(f"unknown model; choose from {', '.join(MODEL_NAMES)}")
    return text


def _scheme(text):
    try:
        return Scheme(text.replace("-", "_"))
    except ValueError:
        raise ValueError(f"unknown scheme; choose from {', '.join(s.value for s in Scheme)}") from None


def _method(text):
    try:
        return Method(text)
    except ValueError:
        raise ValueError(f"unknown method; choose from {', '.join(m.value for m in Method)}") from None


def _extrap(text):
    value = int(text)
    if value not in (0, 1):
        raise ValueError("extrapolation degree must be 0 or 1")
    return value


def _h_list(text):
    values = tuple(_positive(v) for v in text.split(",") if v.strip())
    if len(values) < 4:
        raise ValueError("needs at least 4 step sizes")
    return values


def _optional_positive(text):
    return None if text.strip().lower() == "none" else _positive(text)


_PARSERS = {
    "model": _model,
    "scheme": _scheme,
    "extrap": _extrap,
    "hermite": _bool,
    "H": _positive,
    "t_end": _positive,
    "method": _method,
    "abs_tol": _nonneg,
    "rel_tol": _nonneg,
    "max_step": _positive,
    "initial_step": _optional_positive,
    "inversion_epsilon": _positive,
    "samples_per_interval": _positive_int,
    "H_list": _h_list,
    "workers": _positive_int,
    "out": str,
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _validate(cfg: RunConfig) -> RunConfig:
    """Cross-field checks; returns the config with model parameters completed."""
    try:
        cfg.integrator()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        MasterConfig(H=cfg.H, t_end=cfg.t_end)
    except ValueError as exc:
        raise ConfigError(str(exc), key="t_end") from None
    known = default_params(cfg.model)
    for name, _ in cfg.params:
        if name not in known:
            raise ConfigError(f"model {cfg.model!r} has no parameter {name!r}", key=f"param.{name}")
    known.update(cfg.params)
    return replace(cfg, params=tuple(sorted(known.items())))


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    """Parse ``key = value`` lines into a validated :class:`RunConfig`.

    Model parameters are given as ``param.<name> = <value>``. ``overrides``
    (already keyed by config name, values as strings) take precedence over
    the file.

    Raises
    ------
    ConfigError
        Unknown key, duplicate key, malformed or out-of-range value; the
        message names the line and key.
    """
    values: dict = {}
    params: dict = {}
    seen: dict = {}

    def apply(key, raw, line):
        if key.startswith("param."):
            name = key[len("param."):]
            try:
                params[name] = _float(raw)
            except ValueError as exc:
                raise ConfigError(str(exc), line, key) from None
            return
        if key not in _PARSERS:
            raise ConfigError("unknown key", line, key)
        try:
            values[key] = _PARSERS[key](raw.strip())
        except ValueError as exc:
            raise ConfigError(str(exc), line, key) from None

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("missing key", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", lineno, key)
        seen[key] = lineno
        apply(key, raw, lineno)
    for key, raw in (overrides or {}).items():
        apply(key, str(raw), None)
    return _validate(RunConfig(**values, params=tuple(sorted(params.items()))))


def format_config(cfg: RunConfig) -> list[str]:
    """``key = value`` lines reproducing ``cfg`` (output path excluded)."""
    lines = []
    for f in fields(cfg):
        if f.name in ("params", "out"):
            continue
        value = getattr(cfg, f.name)
        if value is None:
            value = "none"
        lines.append(f"{f.name} = {_format_value(value)}")
    for name, value in cfg.params:
        lines.append(f"param.{name} = {value!r}")
    return lines


# -- CSV output -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "%.17g" % v


def _header(kind: str, cfg: RunConfig) -> list[str]:
    lines = [f"# cosim {__version__} {kind}"]
    lines += [f"# config: {line}" for line in format_config(cfg)]
    return lines


def _write_atomic(path: Optional[str], lines: Sequence[str]) -> None:
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".cosim-", suffix=".csv", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _simulate(cfg: RunConfig):
    problem = build_problem(cfg.model, cfg.param_dict())
    trace = run_master(problem.blocks, problem.connections, problem.x0, cfg.master(), problem.energy)
    return problem, trace


def run_lines(cfg: RunConfig) -> list[str]:
    """CSV lines of a ``run`` (header, samples, span annotations)."""
    _, trace = _simulate(cfg)
    n = trace.states.shape[1]
    cols = ["t"] + [f"x_{i + 1}" for i in range(n)]
    blocks = [trace.states]
    if trace.energies is not None:
        cols.append("E")
        blocks.append(trace.energies[:, None])
    cols += [f"P_hat_{i + 1}" for i in range(trace.phat_samples.shape[1])]
    cols += [f"dE_{i + 1}" for i in range(trace.dE_samples.shape[1])]
    blocks += [trace.phat_samples, trace.dE_samples]
    data = np.hstack([trace.sample_times[:, None]] + blocks)
    lines = _header("run", cfg) + [",".join(cols)]
    lines += [",".join(_fmt(v) for v in row) for row in data]
    for s in trace.spans:
        lines.append(f"# span: block={s.block} start={_fmt(s.start)} end={_fmt(s.end)}")
    return lines


def cmd_run(cfg: RunConfig) -> None:
    _write_atomic(cfg.out, run_lines(cfg))


def cmd_converge(cfg: RunConfig) -> None:
    """Endpoint error per step size and the fitted order."""
    if len(cfg.H_list) < 4:
        raise ConfigError("converge needs at least 4 step sizes", key="H_list")
    problem = build_problem(cfg.model, cfg.param_dict())
    if problem.reference is None:
        raise ConfigError(f"model {cfg.model!r} has no reference solution", key="model")
    study = convergence_study(cfg.model, cfg.master(), cfg.H_list, cfg.param_dict(), cfg.workers)
    n = study.component_errors.shape[1]
    lines = _header("converge", cfg)
    lines.append(",".join(["H", "error"] + [f"err_x{i + 1}" for i in range(n)]))
    for H, e, comp in zip(study.H, study.errors, study.component_errors):
        lines.append(",".join(_fmt(v) for v in (H, e, *comp)))
    lines.append(f"# slope: {_fmt(study.slope)}")
    lines.append(f"# intercept: {_fmt(study.intercept)}")
    _write_atomic(cfg.out, lines)


def cmd_stability(cfg: RunConfig) -> None:
    """Energy at exchange times, per-interval production, drift and span totals."""
    _, trace = _simulate(cfg)
    if trace.energy is None:
        raise ConfigError(f"model {cfg.model!r} has no energy functional", key="model")
    rep = energy_drift(trace)
    lines = _header("stability", cfg) + ["t,E,production"]
    prod = np.concatenate([[0.0], rep.interval_production])
    for t, e, p in zip(rep.exchange_times, rep.exchange_energies, prod):
        lines.append(",".join(_fmt(v) for v in (t, e, p)))
    lines.append(f"# drift: {_fmt(rep.drift)}")
    lines.append(f"# spans: {len(rep.spans)}")
    lines.append(f"# span_production: {_fmt(float(np.sum(rep.span_production)))}")
    lines.append(f"# outside_production: {_fmt(float(np.sum(rep.outside_production)))}")
    lines.append(f"# span_fraction: {_fmt(rep.span_fraction)}")
    _write_atomic(cfg.out, lines)


# -- CSV input ----------------------------------------------------------------------

@dataclass
class CsvData:
    """Parsed result file: ``# key: value`` header/footer lines, columns, data."""

    meta: list[tuple[str, str]]
    columns: list[str]
    data: np.ndarray
    spans: list[tuple[int, float, float]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def footer(self, key: str) -> str:
        for k, v in self.meta:
            if k == key:
                return v
        raise KeyError(key)

    def config_text(self) -> str:
        return "\n".join(v for k, v in self.meta if k == "config") + "\n"


def read_csv(path: str) -> CsvData:
    meta, spans, rows, columns = [], [], [], None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                key, _, value = body.partition(":")
                if key == "span":
                    parts = dict(p.split("=", 1) for p in value.split())
                    spans.append((int(parts["block"]), float(parts["start"]), float(parts["end"])))
                elif _:
                    meta.append((key.strip(), value.strip()))
            elif columns is None:
                columns = line.split(",")
            elif line:
                rows.append([float(v) for v in line.split(",")])
    data = np.array(rows, dtype=float).reshape(len(rows), len(columns or []))
    return CsvData(meta, columns or [], data, spans)


# -- entry point ------------------------------------------------------------------

_COMMANDS = {"run": cmd_run, "converge": cmd_converge, "stability": cmd_stability}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosim", description="Explicit co-simulation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "simulate and write the sampled trace"),
                            ("converge", "endpoint error over a series of exchange steps"),
                            ("stability", "energy at exchange times and drift summary")):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="key = value configuration file")
        s.add_argument("--model", choices=MODEL_NAMES)
        s.add_argument("--scheme", choices=[sc.value for sc in Scheme])
        s.add_argument("--extrap", choices=["0", "1"])
        s.add_argument("--hermite", action="store_true", default=None,
                       help="extrapolate with exchanged derivatives")
        s.add_argument("--H", dest="H", help="exchange step")
        s.add_argument("--t-end", dest="t_end")
        s.add_argument("--out", help="output CSV path (default: stdout)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    overrides = {k: v for k in ("model", "scheme", "extrap", "H", "t_end", "out")
                 if (v := getattr(args, k)) is not None}
    if args.hermite:
        overrides["hermite"] = "true"
    try:
        text = ""
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        cfg = parse_config(text, overrides)
    except (OSError, ConfigError) as exc:
        print(f"cosim: config error: {exc}", file=sys.stderr)
        return 2
    try:
        _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"cosim: config error: {exc}", file=sys.stderr)
        return 2
    except (CouplingError, ValueError, ArithmeticError) as exc:
        print(f"cosim: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
