"""Command-line front end: ``degdiff simulate | check | sweep``.

Settings come from, in increasing precedence: built-in defaults, the
DEGDIFF_SEED environment variable (seed only), a config file given with
``--config``, and command-line flags.  A config file is either

* flat ``key = value`` lines (``#`` comments) with an optional ``[model]``
  section for model parameters, matrices written row-wise as "0,1;-1,0"; or
* a JSON report written by ``check``/``sweep``, whose echoed ``config``
  reproduces that run.

Exit codes: 0 when the check passes, 2 when it runs but fails, 1 on a
configuration or runtime error.
"""

import argparse
import configparser
import dataclasses
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from .expr import ExprError, parse
from .models import MODEL_NAMES, default_x0, make_model, right_factor
from .rng import BrownianDriver
from .sde import SimulationError, TimeGrid, simulate, write_path_csv
from .estimators import checks, diagnostics, heisenberg
from .estimators.core import to_json

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    command: str = "check"
    check: str = None
    model: str = "heisenberg"
    model_params: dict = dataclasses.field(default_factory=dict)
    T: float = 1.0
    steps: int = None
    paths: int = None
    inner: int = None
    outer: int = None
    seed: int = 0
    f: str = None
    g: str = None
    times: list = None
    t: float = None
    degree: int = None
    levels: list = None
    x0: list = None
    factors: list = None
    workers: int = dataclasses.field(default_factory=lambda: os.cpu_count() or 1)
    out: str = None

    def echo(self):
        """The settings that determine the result (output path and workers excluded)."""
        d = dataclasses.asdict(self)
        d.pop("out")
        d.pop("workers")
        return d


def _positive(name, value, kind=int):
    try:
        v = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if v <= 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return v


def parse_floats(text, name):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def parse_matrix(text, name="matrix"):
    """'a,b;c,d' -> 2x2 array (rows separated by ';')."""
    rows = [parse_floats(r, name) for r in str(text).split(";")]
    if len({len(r) for r in rows}) != 1 or not rows[0]:
        raise ConfigError(f"{name}: ragged or empty matrix {text!r}")
    return np.array(rows)


MATRIX_PARAMS = ("A", "Sigma")


def _model_params(raw):
    out = {}
    for k, v in raw.items():
        if isinstance(v, str) and k in MATRIX_PARAMS:
            out[k] = parse_matrix(v, k).tolist()
        elif isinstance(v, str):
            try:
                out[k] = int(v) if v.strip().lstrip("-").isdigit() else float(v)
            except ValueError:
                raise ConfigError(f"model parameter {k}: not a number: {v!r}") from None
        else:
            out[k] = v
    return out


FIELD_TYPES = {"T": float, "steps": int, "paths": int, "inner": int, "outer": int, "seed": int,
               "degree": int, "workers": int, "t": float}


def _coerce(key, value):
    if value is None:
        return None
    if key in FIELD_TYPES:
        try:
            return FIELD_TYPES[key](value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected {FIELD_TYPES[key].__name__}, got {value!r}") from None
    if key in ("times", "x0") and isinstance(value, str):
        return parse_floats(value, key)
    if key == "levels" and isinstance(value, str):
        return [int(v) for v in parse_floats(value, key)]
    if key == "factors" and isinstance(value, str):
        return [parse_matrix(m, "factors").tolist() for m in value.split("|") if m.strip()]
    return value


def read_config_file(path):
    """Settings dict from an INI-style file or a JSON report."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        data = data.get("config", data)
        return {k: v for k, v in data.items() if k in {f.name for f in dataclasses.fields(RunConfig)}}
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"config {path}: {e}") from None
    settings = dict(cp["run"])
    if cp.has_section("model"):
        settings["model_params"] = dict(cp["model"])
    unknown = set(settings) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    return settings


def build_config(args):
    settings = {}
    env_seed = os.environ.get("DEGDIFF_SEED")
    if env_seed is not None:
        settings["seed"] = env_seed
    if args.config:
        settings.update(read_config_file(args.config))
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "model_params":
            settings[f.name] = v
    params = dict(settings.get("model_params") or {})
    for item in args.param or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = v.strip()
    settings["model_params"] = _model_params(params)
    settings = {k: _coerce(k, v) for k, v in settings.items()}
    cfg = RunConfig(**settings)
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.model not in MODEL_NAMES:
        raise ConfigError(f"model: unknown {cfg.model!r}; expected one of {', '.join(MODEL_NAMES)}")
    for name in ("steps", "paths", "inner", "outer", "degree", "workers"):
        if getattr(cfg, name) is not None:
            _positive(name, getattr(cfg, name))
    _positive("T", cfg.T, float)
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if cfg.command == "check" and cfg.check not in CHECKS:
        raise ConfigError(f"unknown check {cfg.check!r}; registry: {' | '.join(CHECKS)}")
    if cfg.command == "sweep" and cfg.check not in SWEEPS:
        raise ConfigError(f"unknown sweep {cfg.check!r}; available: {' | '.join(SWEEPS)}")
    if cfg.levels is not None:
        try:
            diagnostics.check_levels(cfg.levels)
        except ValueError as e:
            raise ConfigError(f"levels: {e}") from None


# --- helpers shared by the commands ----------------------------------------

def model_of(cfg):
    try:
        model = make_model(cfg.model, **cfg.model_params)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model parameters: {e}") from None
    return model


def x0_of(cfg, model):
    if cfg.x0 is None:
        return None
    x0 = np.asarray(cfg.x0, dtype=float)
    if x0.shape != (model.n,):
        raise ConfigError(f"x0 must have {model.n} entries for {model.name}, got {len(x0)}")
    if model.drift_singular and not np.all(np.diff(x0) > 0):
        raise ConfigError(f"x0 must be strictly increasing for {model.name}, got {cfg.x0}")
    return x0


def function_of(cfg, model, default, arity=None):
    text = cfg.f or default
    try:
        return parse(text, arity or model.n)
    except ExprError as e:
        raise ConfigError(f"f: {e}") from None


def grid_of(cfg, default_steps):
    return TimeGrid(cfg.T, cfg.steps or default_steps)


def _or(v, default):
    return default if v is None else v


# --- check registry ----------------------------------------------------------

def _levels(cfg):
    return cfg.levels or ([cfg.steps] if cfg.steps else [256, 512, 1024])


def _jk(cfg):
    m = model_of(cfg)
    return diagnostics.jk_inverse_sweep(m, _levels(cfg), _or(cfg.paths, 1000), cfg.seed, cfg.T,
                                        x0_of(cfg, m), cfg.workers)


def _calcul1(cfg):
    m = model_of(cfg)
    return diagnostics.representation_sweep(m, _levels(cfg), _or(cfg.paths, 1000), cfg.seed, cfg.T,
                                     x0_of(cfg, m), workers=cfg.workers)


def _clark_ocone(cfg):
    m = model_of(cfg)
    return checks.clark_ocone_check(m, function_of(cfg, m, "x1"), grid_of(cfg, 256),
                                    _or(cfg.paths, 10000), cfg.seed, x0_of(cfg, m), cfg.workers,
                                    _or(cfg.degree, 3), n_outer=_or(cfg.outer, 64))


def _cond_exp(cfg):
    m = model_of(cfg)
    return diagnostics.cond_exp_check(m, grid_of(cfg, 256), _or(cfg.paths, 5000), cfg.seed,
                                      x0_of(cfg, m), degree=_or(cfg.degree, 2), workers=cfg.workers)


def _wick(cfg):
    m = model_of(cfg)
    return diagnostics.wick_check(m, grid_of(cfg, 256), _or(cfg.paths, 5000), cfg.seed, x0_of(cfg, m),
                                  degree=_or(cfg.degree, 2), workers=cfg.workers)


def _chaos(cfg):
    m = model_of(cfg)
    return diagnostics.chaos_check(m, grid_of(cfg, 128), _or(cfg.paths, 5000), cfg.seed, x0_of(cfg, m),
                                   workers=cfg.workers)


def _ibp(cfg):
    m = model_of(cfg)
    return diagnostics.ibp_check(m, grid_of(cfg, 256), _or(cfg.paths, 5000), cfg.seed, x0_of(cfg, m),
                                 f_text=cfg.f or "x1", g_text=cfg.g, workers=cfg.workers)


def _times(cfg):
    return cfg.times or [cfg.T]


def _poincare_path(cfg):
    m = model_of(cfg)
    times = _times(cfg)
    f = function_of(cfg, m, "x1", m.n * len(times))
    return checks.check_poincare_path(m, f, times, grid_of(cfg, 256), _or(cfg.paths, 10000), cfg.seed,
                                      x0_of(cfg, m), cfg.workers)


def _logsob_path(cfg):
    m = model_of(cfg)
    times = _times(cfg)
    f = function_of(cfg, m, "exp(x1/2)", m.n * len(times))
    return checks.check_logsob_path(m, f, times, grid_of(cfg, 256), _or(cfg.paths, 10000), cfg.seed,
                                    x0_of(cfg, m), cfg.workers)


def _state(kind):
    def run(cfg):
        m = model_of(cfg)
        return checks.check_state_inequalities(m, function_of(cfg, m, "x1"), grid_of(cfg, 256),
                                               _or(cfg.paths, 10000), kind, cfg.seed, x0_of(cfg, m),
                                               cfg.workers, _or(cfg.degree, 3))
    return run


def _factorization(cfg):
    m = model_of(cfg)
    models = [m] + [right_factor(m, R, name=f"{m.name}*R{j + 1}") for j, R in enumerate(cfg.factors or [])]
    try:
        return checks.factorization_sweep(models, function_of(cfg, m, "x1"), grid_of(cfg, 256),
                                          _or(cfg.paths, 10000), "mod-poincare", cfg.seed, x0_of(cfg, m),
                                          cfg.workers, _or(cfg.degree, 3))
    except ValueError as e:
        raise ConfigError(f"factors: {e}") from None


def _intertwine(cfg):
    m = model_of(cfg)
    return checks.intertwine_check(m, function_of(cfg, m, "x3" if m.n == 3 else "x1"), _or(cfg.t, 0.5),
                                   grid_of(cfg, 256), _or(cfg.outer, 100), _or(cfg.inner, 10000),
                                   cfg.seed, x0_of(cfg, m), _or(cfg.degree, 3), workers=cfg.workers)


def _mart_lemma(cfg):
    m = model_of(cfg)
    return checks.projected_martingale_check(m, function_of(cfg, m, "x1"), grid_of(cfg, 256), _or(cfg.paths, 4000),
                                   cfg.times or [0.25, 0.5, 0.75], cfg.seed, x0_of(cfg, m),
                                   _or(cfg.inner, 1024), _or(cfg.degree, 2))


def _heisenberg_suite(cfg):
    if cfg.model != "heisenberg":
        raise ConfigError("heisenberg-suite needs --model heisenberg")
    f = function_of(cfg, model_of(cfg), "x1")
    return heisenberg.heisenberg_suite(f, grid_of(cfg, 256), _or(cfg.paths, 10000), cfg.seed,
                                       t=_or(cfg.t, 0.5), n_outer=_or(cfg.outer, 200),
                                       n_inner=_or(cfg.inner, 512), degree=_or(cfg.degree, 3),
                                       workers=cfg.workers)


def _dyson_suite(cfg):
    if cfg.model != "dyson":
        raise ConfigError("dyson-suite needs --model dyson")
    m = model_of(cfg)
    return diagnostics.dyson_suite(m, grid_of(cfg, 4096), _or(cfg.paths, 10000), cfg.seed, x0_of(cfg, m),
                                   n_pairs=_or(cfg.outer, 1000), f_text=cfg.f or "x1", workers=cfg.workers)


def _lipschitz(cfg):
    m = model_of(cfg)
    if not m.drift_singular:
        raise ConfigError("lipschitz-shift needs --model dyson")
    return diagnostics.lipschitz_shift_check(m, grid_of(cfg, 4096), _or(cfg.paths, 1000), cfg.seed,
                                             x0_of(cfg, m))


CHECKS = {
    "jk-inverse": _jk,
    "calcul1": _calcul1,
    "clark-ocone": _clark_ocone,
    "cond-exp": _cond_exp,
    "wick": _wick,
    "chaos": _chaos,
    "ibp": _ibp,
    "poincare-path": _poincare_path,
    "logsob-path": _logsob_path,
    "mod-poincare": _state("mod-poincare"),
    "state-lsi": _state("state-lsi"),
    "factorization-sweep": _factorization,
    "intertwine": _intertwine,
    "mart-lemma": _mart_lemma,
    "heisenberg-suite": _heisenberg_suite,
    "dyson-suite": _dyson_suite,
    "lipschitz-shift": _lipschitz,
}

SWEEPS = {"jk-inverse": ("median_sup_error", _jk), "calcul1": ("relative_l2", _calcul1)}


def passed(report):
    if hasattr(report, "passed"):
        return bool(report.passed)
    return bool(report.get("passed", False))


def _report_dict(report):
    return report.to_dict() if hasattr(report, "to_dict") else dict(report)


def _emit(text, out):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")


# --- commands ----------------------------------------------------------------

def cmd_simulate(cfg):
    """Write one CSV per path (or a single path to stdout)."""
    m = model_of(cfg)
    x0 = x0_of(cfg, m)
    grid = grid_of(cfg, 256)
    n_paths = _or(cfg.paths, 1)
    bundle = simulate(m, grid, BrownianDriver(cfg.seed), default_x0(m) if x0 is None else x0,
                      streams=np.arange(n_paths), flows=False)
    if cfg.out is None and n_paths == 1:
        write_path_csv(bundle, 0, sys.stdout)
        return EXIT_PASS
    out = Path(cfg.out or "path.csv")
    stem, suffix = out.with_suffix(""), out.suffix or ".csv"
    for k in range(n_paths):
        with open(f"{stem}_{k}{suffix}", "w", newline="") as fh:
            write_path_csv(bundle, k, fh)
    return EXIT_PASS


def cmd_check(cfg, omit_runtime=False):
    start = time.perf_counter()
    report = CHECKS[cfg.check](cfg)
    data = _report_dict(report)
    data["config"] = cfg.echo()
    runtime = None if omit_runtime else (time.perf_counter() - start) * 1e3
    _emit(to_json(data, runtime), cfg.out)
    return EXIT_PASS if passed(report) else EXIT_FAIL


def cmd_sweep(cfg):
    """Error-versus-dt table as CSV (paths coupled across levels by bridge bisection)."""
    column, run = SWEEPS[cfg.check]
    report = run(cfg)
    lines = [f"steps,dt,{column}"]
    for row in report["table"]:
        lines.append(f"{row['steps']},{row['dt']!r},{row[column]!r}")
    _emit("\n".join(lines) + "\n", cfg.out)
    return EXIT_PASS if passed(report) else EXIT_FAIL


def build_parser():
    p = argparse.ArgumentParser(prog="degdiff", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI-style config file or a JSON report to re-run")
        sp.add_argument("--model", help=f"one of {', '.join(MODEL_NAMES)} (default heisenberg)")
        sp.add_argument("--param", action="append", metavar="KEY=VALUE",
                        help="model parameter, e.g. gamma=1 or A='0,1;-1,0' (repeatable)")
        sp.add_argument("--T", type=float, help="horizon (default 1)")
        sp.add_argument("--steps", type=int, help="time steps")
        sp.add_argument("--paths", type=int, help="Monte Carlo paths")
        sp.add_argument("--seed", type=int, help="seed (default $DEGDIFF_SEED or 0)")
        sp.add_argument("--x0", help="initial state, comma-separated")
        sp.add_argument("--workers", type=int, help="worker threads (default: CPU count; results do not depend on it)")
        sp.add_argument("--out", help="output file")

    s = sub.add_parser("simulate", help="dump simulated paths as CSV")
    common(s)

    c = sub.add_parser("check", help="run a registered check and print a JSON report")
    c.add_argument("check", help=" | ".join(CHECKS))
    common(c)
    c.add_argument("--inner", type=int, help="inner nested Monte Carlo paths")
    c.add_argument("--outer", type=int, help="outer paths for nested checks (pairs for shift checks)")
    c.add_argument("--f", help="function text, e.g. 'x1*x3 + x2^2'")
    c.add_argument("--g", help="second function (ibp)")
    c.add_argument("--times", help="cylinder or martingale times, comma-separated")
    c.add_argument("--t", type=float, help="conditioning time")
    c.add_argument("--degree", type=int, help="regression degree")
    c.add_argument("--levels", help="step counts for sweeps, comma-separated powers of two")
    c.add_argument("--factors", help="right factors R for factorization-sweep, '1,0;0,1|...'")
    c.add_argument("--omit-runtime", action="store_true",
                   help="leave runtime_ms out so repeated reports are byte-identical")

    w = sub.add_parser("sweep", help="error-versus-dt table as CSV")
    w.add_argument("check", help=" | ".join(SWEEPS))
    common(w)
    w.add_argument("--levels", help="step counts, comma-separated powers of two (default 256,512,1024)")
    return p


_LIST_OPTIONS = ("--x0", "--times", "--levels")
_NUMBER_LIST = re.compile(r"^-[0-9.eE+-]*(,[0-9.eE+-]*)*$")


def _attach_negative_lists(argv):
    """Join '--x0 -1,0,1' into '--x0=-1,0,1'; argparse would read '-1,0,1' as an option."""
    out = []
    it = iter(argv)
    for a in it:
        if a in _LIST_OPTIONS:
            nxt = next(it, None)
            if nxt is not None and _NUMBER_LIST.match(nxt):
                out.append(f"{a}={nxt}")
                continue
            out.append(a)
            if nxt is not None:
                out.append(nxt)
        else:
            out.append(a)
    return out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(_attach_negative_lists(sys.argv[1:] if argv is None else list(argv)))
    try:
        cfg = build_config(args)
        if cfg.command == "simulate":
            return cmd_simulate(cfg)
        if cfg.command == "check":
            return cmd_check(cfg, args.omit_runtime)
        return cmd_sweep(cfg)
    except (ConfigError, ExprError, ValueError, SimulationError, checks.CheckError, OSError) as e:
        print(f"degdiff: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
