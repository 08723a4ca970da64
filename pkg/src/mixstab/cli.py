"""
Command-line front end.

``mixstab <command> [--config FILE] [--model NAME] [--out DIR] [--seed N]``

Commands: ``equilibria``, ``stability-map``, ``simulate``, ``validate``.
Exit codes: 0 success, 1 configuration error, 2 no valid root, 3 the column
left the valid closure range.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .closures import ModelKind
from .column import (
    Verdict,
    run_perturbation_experiment,
    steadiness_residual,
)
from .config import RunConfig, load_config
from .equilibrium import (
    FixedPointProblem,
    build_equilibrium,
    equilibrium_at,
    fixed_point_constant,
    solve_fixed_points,
)
from .errors import ConfigError, ZeroFluxError, ZeroWindError
from .stability import stability_map

EXIT_OK, EXIT_CONFIG, EXIT_NO_ROOT, EXIT_INVALID_ZONE = 0, 1, 2, 3

ROOT_HEADER = ["model", "C", "root_index", "R_star", "nu1e", "nu2e", "valid"]
PROFILE_HEADER = ["z", "u", "v", "rho"]
MAP_HEADER = [
    "model", "R_e", "Q", "C",
    "lambda1_re", "lambda1_im", "lambda2_re", "lambda2_im", "lambda3_re", "lambda3_im",
    "det", "trace", "trace_adj", "paper_criteria_pass", "routh_hurwitz_pass", "classification",
]
SERIES_HEADER = ["t", "norm_u", "norm_v", "norm_rho", "R_surface", "R_min", "R_max", "valid"]
VALIDATE_HEADER = [
    "model", "R_e", "classification", "verdict", "growth_factor", "decay_rate",
    "stationarity_residual", "fallback_steps", "agree",
]
SUMMARY_HEADER = ["compared", "agreed", "agreement_fraction", "max_stationarity_residual"]


def fmt(x) -> str:
    """CSV text for one value; floats keep 17 significant digits."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def read_csv(path: Path):
    """Header and rows of a CSV written by this tool."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg["output"]["dir"])


def _write_resolved(cfg: RunConfig):
    _atomic_write(_out_dir(cfg) / "resolved_config.ini", cfg.resolved_text())


def _profile_rows(eq, grid):
    z = grid.z
    return zip(z, eq.u(z), eq.v(z), eq.rho(z))


def cmd_equilibria(cfg: RunConfig) -> int:
    """Roots of the fixed-point equation for each configured Q, with profiles."""
    model = cfg.model()
    forcings = cfg.forcings()
    opts = cfg.solver_options()
    boundary = cfg.boundary()
    grid = cfg.grid()
    out = _out_dir(cfg)
    rows = []
    n_valid = 0
    for qi, f in enumerate(forcings):
        try:
            C = fixed_point_constant(f)
        except (ZeroFluxError, ZeroWindError) as exc:
            raise ConfigError(f"[forcing]: {exc}") from None
        roots = solve_fixed_points(FixedPointProblem(model, C), raise_on_empty=False, **opts)
        for j, root in enumerate(roots):
            rows.append((model.name, C, j, root.R, model.f1(root.R), model.f2(root.R), root.valid))
            if root.valid:
                n_valid += 1
                eq = build_equilibrium(model, f, root.R, boundary)
                write_csv(out / f"profile_{model.name}_Q{qi}_root{j}.csv", PROFILE_HEADER,
                          _profile_rows(eq, grid))
    write_csv(out / "roots.csv", ROOT_HEADER, rows)
    print(f"{model.name}: {len(rows)} root(s), {n_valid} valid, written to {out / 'roots.csv'}")
    if n_valid == 0:
        print(f"{model.name}: no physically valid equilibrium", file=sys.stderr)
        return EXIT_NO_ROOT
    return EXIT_OK


def _grid(lo, hi, n, what):
    if n < 1:
        raise ConfigError(f"{what}: empty grid ({n} points)")
    if n > 1 and not lo < hi:
        raise ConfigError(f"{what}: need lo < hi")
    return np.linspace(lo, hi, n)


def _map_row(row):
    if row.report is None:
        lam = [math.nan] * 6
        return (row.model, row.R_e, row.Q, row.C, *lam, math.nan, math.nan, math.nan, None, None,
                row.classification)
    rep = row.report
    lam = []
    for ev in rep.eigenvalues:
        lam += [ev.real, ev.imag]
    return (row.model, row.R_e, row.Q, row.C, *lam, rep.det, rep.trace, rep.trace_adj,
            rep.coefficient_criteria_pass, rep.routh_hurwitz_pass, row.classification)


def cmd_stability_map(cfg: RunConfig) -> int:
    """Classification of equilibria over an R or C grid for each listed model."""
    s = cfg["stability"]
    Vx, Vy = cfg.wind()
    k = cfg.constants()
    boundary = cfg.boundary()
    out = _out_dir(cfg)
    rows = []
    for name in s["models"]:
        model = cfg.model(name)
        if s["sweep"] == "R":
            grid = _grid(s["R_lo"], s["R_hi"], s["R_points"], "[stability] R grid")
            rows += stability_map(model, R_grid=grid, Vx=Vx, Vy=Vy, constants=k, boundary=boundary)
        else:
            grid = _grid(s["C_lo"], s["C_hi"], s["C_points"], "[stability] C grid")
            rows += stability_map(model, C_grid=grid, Vx=Vx, Vy=Vy, constants=k, boundary=boundary,
                                  **cfg.solver_options())
    write_csv(out / "stability_map.csv", MAP_HEADER, (_map_row(r) for r in rows))
    _atomic_write(out / "plot_stability_map.py", PLOT_SCRIPT)
    counts = {}
    for r in rows:
        counts[r.classification] = counts.get(r.classification, 0) + 1
    print("  ".join(f"{c}={n}" for c, n in sorted(counts.items())))
    if all(r.report is None for r in rows):
        print("every row of the stability map failed", file=sys.stderr)
        return EXIT_NO_ROOT
    return EXIT_OK


def _load_profile(path, grid):
    if not path:
        raise ConfigError("[column] profile is required when initial = file")
    try:
        header, rows = read_csv(Path(path))
    except (OSError, StopIteration) as exc:
        raise ConfigError(f"[column] profile: cannot read {path}: {exc}") from None
    if header != PROFILE_HEADER:
        raise ConfigError(f"[column] profile: header must be {','.join(PROFILE_HEADER)}")
    try:
        data = np.array([[float(x) for x in r] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"[column] profile: {exc}") from None
    if data.shape != (grid.N + 1, 4) or not np.allclose(data[:, 0], grid.z, rtol=0, atol=1e-9 * grid.h):
        raise ConfigError(f"[column] profile: expected {grid.N + 1} rows on the column grid nodes")
    return data[:, 1:]


def cmd_simulate(cfg: RunConfig) -> int:
    """Column run from an equilibrium, a perturbed equilibrium or a profile file."""
    model = cfg.model()
    forcings = cfg.forcings()
    if len(forcings) != 1:
        raise ConfigError("[forcing] Q: simulate takes a single value")
    forcing = forcings[0]
    c = cfg["column"]
    try:
        C = fixed_point_constant(forcing)
    except (ZeroFluxError, ZeroWindError) as exc:
        raise ConfigError(f"[forcing]: {exc}") from None
    roots = [r for r in solve_fixed_points(FixedPointProblem(model, C), raise_on_empty=False,
                                           **cfg.solver_options()) if r.valid]
    if not roots:
        print(f"{model.name}: no physically valid equilibrium for Q={forcing.Q:g}", file=sys.stderr)
        return EXIT_NO_ROOT
    if not 0 <= c["root_index"] < len(roots):
        raise ConfigError(f"[column] root_index: {c['root_index']} out of range ({len(roots)} valid roots)")
    eq = build_equilibrium(model, forcing, roots[c["root_index"]].R, cfg.boundary())
    grid = cfg.grid()
    sim = cfg.sim_config(model, forcing)
    initial = _load_profile(c["profile"], grid) if c["initial"] == "file" else None
    amplitude = c["amplitude"] if c["initial"] == "perturbed" else 0.0
    run = run_perturbation_experiment(eq, amplitude, c["shape"], sim, grid, seed=c["seed"],
                                      sample_every=c["sample_every"], initial=initial)
    out = _out_dir(cfg)
    write_csv(out / "timeseries.csv", SERIES_HEADER, run.rows())
    final = run.final_state
    write_csv(out / "final_profile.csv", PROFILE_HEADER, zip(grid.z, final.u, final.v, final.rho))
    print(f"{model.name} R_e={eq.Re:.6g}: verdict {run.verdict.value}, "
          f"growth {run.growth_factor:.3g}, t={final.t:g} s")
    if run.verdict is Verdict.ZONE_EXIT:
        print(run.message, file=sys.stderr)
        return EXIT_INVALID_ZONE
    return EXIT_OK


def _agrees(classification, verdict):
    if classification == "Stable":
        return verdict is Verdict.DECAY
    if classification == "Unstable":
        return verdict in (Verdict.GROWTH, Verdict.ZONE_EXIT)
    return None


def cmd_validate(cfg: RunConfig) -> int:
    """Compare linear classifications with nonlinear column runs over an R grid."""
    v = cfg["validate"]
    c = cfg["column"]
    R_grid = _grid(v["R_lo"], v["R_hi"], v["points"], "[validate] grid")
    Vx, Vy = cfg.wind()
    k = cfg.constants()
    boundary = cfg.boundary()
    grid = cfg.grid()
    rows = []
    compared = agreed = 0
    worst = 0.0
    for name in v["models"]:
        model = cfg.model(name)
        for R in R_grid:
            label = stability_map(model, R_grid=[R], Vx=Vx, Vy=Vy, constants=k, boundary=boundary)[0].classification
            if label not in ("Stable", "Unstable"):
                rows.append((model.name, R, label, "skipped", math.nan, math.nan, math.nan, 0, None))
                continue
            eq, forcing = equilibrium_at(model, R, Vx, Vy, k, boundary)
            sim = cfg.sim_config(model, forcing)
            try:
                resid = steadiness_residual(eq, sim, grid, v["steady_steps"])
            except (ArithmeticError, RuntimeError):
                # unstable equilibria do not survive round-off
                resid = math.nan
            run = run_perturbation_experiment(eq, v["amplitude"], v["shape"], sim, grid, seed=c["seed"],
                                              sample_every=c["sample_every"])
            ok = _agrees(label, run.verdict)
            compared += 1
            agreed += bool(ok)
            if label == "Stable":
                worst = max(worst, resid) if not math.isnan(resid) else math.inf
            rows.append((model.name, R, label, run.verdict.value, run.growth_factor, run.decay_rate, resid,
                         run.fallback_steps, ok))
    out = _out_dir(cfg)
    write_csv(out / "validate.csv", VALIDATE_HEADER, rows)
    frac = agreed / compared if compared else math.nan
    write_csv(out / "validate_summary.csv", SUMMARY_HEADER, [(compared, agreed, frac, worst)])
    print(f"agreement {agreed}/{compared} ({frac:.1%}); max stationarity residual {worst:.3g}")
    return EXIT_OK


COMMANDS = {
    "equilibria": cmd_equilibria,
    "stability-map": cmd_stability_map,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="mixstab", description="Equilibria and stability of Richardson-number mixing closures.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI configuration file (defaults are used for anything missing)")
    p.add_argument("--model", help="closure name; overrides [model] name and the model lists")
    p.add_argument("--out", help="output directory; overrides [output] dir")
    p.add_argument("--seed", type=int, help="seed for the random perturbation shape")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    try:
        if args.model is not None:
            try:
                name = ModelKind.parse(args.model).value
            except ValueError as exc:
                raise ConfigError(f"--model: {exc}") from None
            overrides[("model", "name")] = name
            overrides[("stability", "models")] = name
            overrides[("validate", "models")] = name
        if args.out is not None:
            overrides[("output", "dir")] = args.out
        if args.seed is not None:
            overrides[("column", "seed")] = str(args.seed)
        cfg = load_config(args.config, overrides)
        _write_resolved(cfg)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"mixstab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


PLOT_SCRIPT = '''"""Render stability_map.csv as one strip of coloured zones per model.

Usage: python plot_stability_map.py [stability_map.csv] [output.png]
Needs matplotlib.
"""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

COLOURS = {"Stable": "tab:green", "Unstable": "tab:red", "PhysicallyInvalid": "0.6",
           "Marginal": "tab:orange", "Pole": "black", "Failed": "white"}

src = sys.argv[1] if len(sys.argv) > 1 else "stability_map.csv"
dst = sys.argv[2] if len(sys.argv) > 2 else "stability_map.png"
by_model = defaultdict(list)
with open(src, newline="") as fh:
    for row in csv.DictReader(fh):
        R = float(row["R_e"])
        if R == R:
            by_model[row["model"]].append((R, row["classification"]))

fig, ax = plt.subplots(figsize=(9, 1 + 0.6 * len(by_model)))
for i, (model, pts) in enumerate(sorted(by_model.items())):
    pts.sort()
    for j, (R, label) in enumerate(pts):
        lo = 0.5 * (R + pts[j - 1][0]) if j else R
        hi = 0.5 * (R + pts[j + 1][0]) if j + 1 < len(pts) else R
        ax.barh(i, hi - lo, left=lo, height=0.6, color=COLOURS.get(label, "white"), linewidth=0)
ax.set_yticks(range(len(by_model)), sorted(by_model))
ax.set_xlabel("equilibrium Richardson number")
handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in COLOURS.values()]
ax.legend(handles, COLOURS.keys(), ncol=3, fontsize="small", loc="upper left")
fig.tight_layout()
fig.savefig(dst, dpi=150)
print("wrote", dst)
'''


if __name__ == "__main__":
    sys.exit(main())
