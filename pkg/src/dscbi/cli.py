"""Batch command-line front end.

Usage::

    dscbi SUBCOMMAND --config model.cfg [--out FILE] [overrides]

The configuration file is line oriented, with ``key = value`` pairs inside
``[model]`` and ``[experiment]`` sections and ``#`` comments::

    [model]
    c1 = 0
    c2 = 0
    beta1 = 0.5
    beta2 = 0.5
    b11 = -1
    b12 = 1
    b21 = 1
    b22 = -1
    nu_atom = 1 1 1        # z1 z2 weight, may be repeated

    [experiment]
    n = 1000
    reps = 4000
    seed = 7

CSV files use ``,`` separators, LF line endings, a header row and 17
significant digits, so every number survives a write/read round trip.
Exit status is 0 on success, 1 for invalid input and 2 for a numerical
failure; diagnostics go to stderr and stdout carries only the summary.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import asymptotics, estimate, mechanisms, moments, simulate
from .errors import (
    CBIError,
    ConfigTypeError,
    InvalidMeasureAtom,
    MissingKey,
    NumericalError,
    UnknownKey,
    ValidationError,
)
from .model import JumpMeasure, ModelParams, build_derived

MODEL_SCALARS = ("c1", "c2", "beta1", "beta2", "b11", "b12", "b21", "b22")
MODEL_ATOMS = ("nu_atom", "mu1_atom", "mu2_atom")
EXPERIMENT_KEYS = {
    "n": int,
    "reps": int,
    "seed": int,
    "euler_h": float,
    "limit_h": float,
    "output": str,
    "t": float,
    "nsteps": int,
}
DEFAULT_LAMBDA_GRID = (0.0, 0.5, 1.0, 2.0)
ESTIMATE_HEADER = (
    "n",
    "seed",
    "H",
    "Htilde",
    "rho_hat",
    "delta_hat",
    "obeta1",
    "obeta2",
    "s_hat",
    "gamma_hat",
    "kappa_hat",
    "tbeta1",
    "tbeta2",
)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Parsed configuration.

    Attributes
    ----------
    params : ModelParams
    experiment : dict
        Typed values of the ``[experiment]`` keys that were given.
    """

    params: ModelParams
    experiment: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------
def _number(text, key, line, kind=float):
    try:
        val = int(text, 10) if kind is int else float(text)
    except ValueError:
        raise ConfigTypeError(f"{key}: cannot parse {text!r} as {kind.__name__}", key, line) from None
    if kind is float and not math.isfinite(val):
        raise ConfigTypeError(f"{key}: value {text!r} is not finite", key, line)
    return val


def _atom(text, key, line):
    parts = text.split()
    if len(parts) != 3:
        raise ConfigTypeError(f"{key}: expected 'z1 z2 weight', got {text!r}", key, line)
    z1, z2, w = (_number(p, key, line) for p in parts)
    try:
        JumpMeasure([(z1, z2, w)])
    except InvalidMeasureAtom as exc:
        raise InvalidMeasureAtom(f"line {line}: {key}: {exc}") from None
    return (z1, z2, w)


def parse_config(text):
    """Parse configuration text into an :class:`ExperimentConfig`.

    Raises
    ------
    UnknownKey
        For a key outside the schema of its section, or an unknown section.
    MissingKey
        When a required model key is absent.
    ConfigTypeError
        For a value that does not parse, a duplicated key or a line outside
        any section.
    InvalidMeasureAtom
        For an atom at the origin, with a negative coordinate or with a
        nonpositive weight.
    """
    section = None
    scalars = {}
    atoms = {k: [] for k in MODEL_ATOMS}
    experiment = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("model", "experiment"):
                raise UnknownKey(f"unknown section [{section}]", section, lineno)
            continue
        if "=" not in line:
            raise ConfigTypeError(f"expected 'key = value', got {line!r}", None, lineno)
        key, value = (x.strip() for x in line.split("=", 1))
        if section is None:
            raise ConfigTypeError(f"key {key!r} appears before any section", key, lineno)
        if section == "model":
            if key in MODEL_ATOMS:
                atoms[key].append(_atom(value, key, lineno))
            elif key in MODEL_SCALARS:
                if key in scalars:
                    raise ConfigTypeError(f"duplicate key {key!r}", key, lineno)
                scalars[key] = _number(value, key, lineno)
            else:
                raise UnknownKey(f"unknown key {key!r} in [model]", key, lineno)
        else:
            if key not in EXPERIMENT_KEYS:
                raise UnknownKey(f"unknown key {key!r} in [experiment]", key, lineno)
            if key in experiment:
                raise ConfigTypeError(f"duplicate key {key!r}", key, lineno)
            kind = EXPERIMENT_KEYS[key]
            experiment[key] = value if kind is str else _number(value, key, lineno, kind)
    for key in MODEL_SCALARS:
        if key not in scalars:
            raise MissingKey(f"missing required key {key!r} in [model]", key)
    g = scalars.get
    params = ModelParams(
        c=[g("c1"), g("c2")],
        beta=[g("beta1"), g("beta2")],
        B=[[g("b11"), g("b12")], [g("b21"), g("b22")]],
        nu=JumpMeasure(atoms["nu_atom"]),
        mu1=JumpMeasure(atoms["mu1_atom"]),
        mu2=JumpMeasure(atoms["mu2_atom"]),
    )
    return ExperimentConfig(params, experiment)


def load_config(path):
    """Read and parse a UTF-8 configuration file."""
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# --------------------------------------------------------------------------
# CSV helpers
# --------------------------------------------------------------------------
def fmt(x):
    """17-significant-digit decimal, ``nan`` for NaN."""
    x = float(x)
    return "nan" if math.isnan(x) else "%.17g" % x


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(header, rows))


def read_path_csv(path):
    """Read a ``k,x1,x2`` path file into an ``(n + 1, 2)`` array.

    Raises
    ------
    ConfigTypeError
        If the header or a row is malformed, or ``k`` is not ``0, 1, ...``.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["k", "x1", "x2"]:
        raise ConfigTypeError(f"{path}: header must be 'k,x1,x2'")
    out = []
    for i, r in enumerate(rows[1:]):
        if len(r) != 3:
            raise ConfigTypeError(f"{path}: row {i + 2} must have 3 fields", None, i + 2)
        try:
            k = int(r[0])
            x = (float(r[1]), float(r[2]))
        except ValueError:
            raise ConfigTypeError(f"{path}: row {i + 2} is not numeric", None, i + 2) from None
        if k != i:
            raise ConfigTypeError(f"{path}: expected k = {i}, got {k}", None, i + 2)
        out.append(x)
    return np.array(out, dtype=float).reshape(-1, 2)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------
def _setting(args, cfg, key, default=None, required=False):
    val = getattr(args, key, None)
    if val is None and cfg is not None:
        val = cfg.experiment.get(key)
    if val is None:
        if required:
            raise MissingKey(f"{key} must be given on the command line or in [experiment]", key)
        val = default
    return val


def _output_path(args, cfg):
    if args.out is not None:
        return args.out
    return None if cfg is None else cfg.experiment.get("output")


def _emit(args, cfg, header, rows, summary, out):
    """Write the CSV to the output path and the summary to ``out``.

    Without an output path the CSV itself is the summary.
    """
    path = _output_path(args, cfg)
    if path is None:
        out.write(csv_text(header, rows))
    else:
        write_csv(path, header, rows)
        out.write(summary)


def _need_config(args):
    if args.config is None:
        raise MissingKey("--config is required for this command", "config")
    return load_config(args.config)


def cmd_simulate(args, out):
    cfg = _need_config(args)
    params = cfg.params
    derived = build_derived(params)
    n = _setting(args, cfg, "n", required=True)
    seed = _setting(args, cfg, "seed", required=True)
    h = _setting(args, cfg, "euler_h", asymptotics.DEFAULT_EULER_H)
    path = simulate.simulate_skeleton(params, derived, n, seed, h=h)
    rows = [[str(k), fmt(x[0]), fmt(x[1])] for k, x in enumerate(path.states)]
    summary = f"scheme: {path.scheme}\nn: {path.n}\nseed: {seed}\nclamp_count: {path.clamp_count}\n"
    _emit(args, cfg, ("k", "x1", "x2"), rows, summary, out)


def estimate_row(X, seed=None):
    """Estimate row for :data:`ESTIMATE_HEADER`; undefined entries are NaN.

    Returns
    -------
    row : list of str
    error : CBIError or None
        The first estimator failure, if any.
    """
    r = estimate.cls_estimate(X, strict=False)
    err = None
    s = g = k = math.nan
    tb = (math.nan, math.nan)
    if r.failed:
        err = estimate.EstimatorUndefined(r.failed)
    if r.H:
        try:
            s = estimate.s_hat(r)
        except CBIError as exc:
            err = err or exc
    if not r.failed:
        try:
            s, g, k, tb = estimate.transform_estimates(r)
        except CBIError as exc:
            err = err or exc
    row = [str(r.n), "" if seed is None else str(seed), str(int(r.H)), str(int(r.Htilde))]
    row += [fmt(v) for v in (r.rho_hat, r.delta_hat, r.obeta_hat[0], r.obeta_hat[1], s, g, k, tb[0], tb[1])]
    return row, err


def cmd_estimate(args, out):
    if args.infile is None:
        raise MissingKey("--in is required for estimate", "in")
    X = read_path_csv(args.infile)
    if X.shape[0] < 3:
        raise ConfigTypeError(f"{args.infile}: need at least 3 observations")
    row, err = estimate_row(X, args.seed)
    summary = "".join(f"{h}: {v}\n" for h, v in zip(ESTIMATE_HEADER, row))
    _emit(args, None, ESTIMATE_HEADER, [row], summary, out)
    if err is not None:
        raise err


def _scalar_rows(name, value):
    return [[name, "", "", fmt(value)]]


def _matrix_rows(name, M):
    return [[name, str(i + 1), str(j + 1), fmt(M[i, j])] for i in range(M.shape[0]) for j in range(M.shape[1])]


def moment_identities(params, derived, kit):
    """Residuals of the exact scalar identities satisfied by the moment matrices.

    Returns
    -------
    dict
        ``Ctilde_uu``: ``<Ctilde u,u> - <Cbar u,u>``;
        ``Ctilde_vv``: ``<Ctilde v,v> - (1-delta^2)/(2 log(1/delta)) <Cbar v,v>``;
        and, when ``c = 0`` and there are no branching jumps,
        ``V0_uu``: ``<V0 u,u> - int (z1+z2)^2 nu`` and
        ``V0_vv``: ``<V0 v,v> - (1-delta^2)/(2 log(1/delta)) int (z1-z2)^2 nu``.
    """
    u = np.array([1.0, 1.0])
    v = np.array([1.0, -1.0])
    delta = derived.delta
    fac = (1.0 - delta**2) / (2.0 * math.log(1.0 / delta))
    out = {
        "Ctilde_uu": kit.Ctilde_uu - float(u @ kit.Cbar @ u),
        "Ctilde_vv": kit.Ctilde_vv - fac * float(v @ kit.Cbar @ v),
    }
    if params.is_pure_immigration():
        sf = moments.scalar_functionals(params.nu)
        out["V0_uu"] = kit.V0_uu - sf.s_plus
        out["V0_vv"] = kit.V0_vv - fac * sf.s_minus
    return out


def cmd_moments(args, out):
    cfg = _need_config(args)
    params = cfg.params
    derived = build_derived(params)
    kit = moments.v_matrices(params, derived)
    rows = []
    for name in ("C1", "C2", "Cbar", "Ctilde", "V1", "V2", "V0"):
        rows += _matrix_rows(name, getattr(kit, name))
    for name in ("Ctilde_uu", "Ctilde_vv", "V0_uu", "V0_vv", "V0_uv", "quadrature_error"):
        rows += _scalar_rows(name, getattr(kit, name))
    ids = moment_identities(params, derived, kit)
    for name, val in ids.items():
        rows += _scalar_rows("residual_" + name, val)
    worst = max(abs(x) for x in ids.values())
    summary = (
        f"V0_uu: {kit.V0_uu:.10g}\nV0_vv: {kit.V0_vv:.10g}\n"
        f"Ctilde_uu: {kit.Ctilde_uu:.10g}\nCtilde_vv: {kit.Ctilde_vv:.10g}\n"
        f"max_identity_residual: {worst:.3e}\nquadrature_error: {kit.quadrature_error:.3e}\n"
    )
    _emit(args, cfg, ("name", "row", "col", "value"), rows, summary, out)


def _grid(text):
    if text is None:
        return DEFAULT_LAMBDA_GRID
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigTypeError(f"--grid must be comma separated numbers, got {text!r}", "grid") from None
    if any(not (x >= 0 and math.isfinite(x)) for x in vals):
        raise ConfigTypeError("--grid values must be finite and nonnegative", "grid")
    return vals


def cmd_mechanisms(args, out):
    cfg = _need_config(args)
    ctx = mechanisms.MechanismContext.from_params(cfg.params)
    t = _setting(args, cfg, "t", 1.0)
    nsteps = _setting(args, cfg, "nsteps")
    grid = _grid(args.grid)
    rows = []
    for l1 in grid:
        for l2 in grid:
            val = mechanisms.laplace_from_zero(ctx, t, (l1, l2), nsteps)
            rows.append([fmt(l1), fmt(l2), fmt(t), fmt(val)])
    summary = f"t: {t:g}\ngrid_points: {len(rows)}\n"
    _emit(args, cfg, ("lambda1", "lambda2", "t", "laplace"), rows, summary, out)


def cmd_limits(args, out):
    cfg = _need_config(args)
    params = cfg.params
    derived = build_derived(params)
    kit = moments.v_matrices(params, derived)
    law = asymptotics.theoretical_law(params, derived, kit)
    rows = asymptotics.law_rows(law)
    lines = [f"regime: {law.regime.value}", f"v_degenerate: {int(law.v_degenerate)}"]
    if law.sigma2_s is not None:
        lines.append(f"sigma2_s: {law.sigma2_s:.10g}")
    if law.Mconst is not None:
        lines.append(f"Mconst: {law.Mconst:.10g}")
    present = [k for k in ("R", "S", "Sigma") if getattr(law, k) is not None]
    lines.append("matrices: " + (" ".join(present) if present else "none"))
    _emit(args, cfg, ("matrix", "row", "col", "value"), rows, "\n".join(lines) + "\n", out)


def cmd_montecarlo(args, out):
    cfg = _need_config(args)
    n = _setting(args, cfg, "n", required=True)
    reps = _setting(args, cfg, "reps", required=True)
    seed = _setting(args, cfg, "seed", required=True)
    h = _setting(args, cfg, "euler_h", asymptotics.DEFAULT_EULER_H)
    hl = _setting(args, cfg, "limit_h", 5e-4)
    summ = asymptotics.run_monte_carlo(cfg.params, n, reps, seed, h_limit=hl, euler_h=h)
    header, rows = asymptotics.mc_rows(summ)
    path = _output_path(args, cfg)
    if path is not None:
        write_csv(path, header, rows)
    out.write(asymptotics.summary_text(summ))


def cmd_lln(args, out):
    cfg = _need_config(args)
    params = cfg.params
    derived = build_derived(params)
    kit = moments.v_matrices(params, derived)
    n = _setting(args, cfg, "n", required=True)
    seed = _setting(args, cfg, "seed", required=True)
    h = _setting(args, cfg, "euler_h", asymptotics.DEFAULT_EULER_H)
    path = simulate.simulate_skeleton(params, derived, n, seed, h=h)
    checks = asymptotics.lln_checks(path, derived, kit)
    rows = [[k, fmt(c.statistic), fmt(c.limit), fmt(c.deviation)] for k, c in checks.items()]
    summary = "".join(f"{k}: {c.deviation:.6g}\n" for k, c in checks.items())
    _emit(args, cfg, ("quantity", "statistic", "limit", "deviation"), rows, summary, out)


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "moments": cmd_moments,
    "mechanisms": cmd_mechanisms,
    "limits": cmd_limits,
    "montecarlo": cmd_montecarlo,
    "lln": cmd_lln,
}


def build_parser():
    p = argparse.ArgumentParser(prog="dscbi", description="Critical two-type CBI process: simulation and CLS estimation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="configuration file")
    p.add_argument("--out", help="output CSV path (the CSV goes to stdout when omitted)")
    p.add_argument("--in", dest="infile", help="input path CSV for estimate")
    p.add_argument("--n", type=int, help="number of unit observation steps")
    p.add_argument("--reps", type=int, help="Monte-Carlo replications")
    p.add_argument("--seed", type=int, help="64-bit unsigned seed")
    p.add_argument("--h", dest="euler_h", type=float, help="Euler substep length")
    p.add_argument("--limit-h", dest="limit_h", type=float, help="step of the limit-process sampler")
    p.add_argument("--t", type=float, help="time horizon for mechanisms")
    p.add_argument("--nsteps", type=int, help="ODE steps for mechanisms")
    p.add_argument("--grid", help="comma separated lambda grid for mechanisms")
    return p


def run_command(argv, stdout=None, stderr=None):
    """Run one subcommand and return its exit status.

    Returns
    -------
    int
        0 on success, 1 on a validation error, 2 on a numerical error.
    """
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        COMMANDS[args.command](args, stdout)
    except NumericalError as exc:
        stderr.write(f"{type(exc).__name__}: {exc}\n")
        return 2
    except (ValidationError, ValueError, OSError) as exc:
        stderr.write(f"{type(exc).__name__}: {exc}\n")
        return 1
    return 0


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
