"""Batch front-end: convergence runs, self-verification, slope fits.

No plots and no interactivity; ``run`` writes plot-ready CSV plus a
text summary, ``verify`` executes the property battery, ``slope``
refits MSE-versus-cost rates from an existing results file.  CSV output
uses the period as decimal separator regardless of locale.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import experiment, verify

__all__ = ["main", "load_config", "RESULT_COLUMNS", "SCHEDULE_COLUMNS"]

RESULT_COLUMNS = (
    "method", "example", "solver", "epsilon", "L",
    "cost_units", "wall_seconds", "mse", "realizations",
)
SCHEDULE_COLUMNS = (
    "method", "example", "solver", "epsilon", "level", "M", "N_modes", "J_substeps",
)

DEFAULTS = {
    "example": 1,
    "method": "mlenkf",
    "solver": "exact",
    "eps": "0.25,0.125,0.0625",
    "realizations": 20,
    "seed": 20260823,
    "n_ref": 1024,
    "n_steps": 10,
    "base_constant": 1.0,
    "jobs": 1,
}

_CASTS = {
    "example": int,
    "method": str,
    "solver": str,
    "eps": str,
    "realizations": int,
    "seed": int,
    "n_ref": int,
    "n_steps": int,
    "base_constant": float,
    "jobs": int,
}


class ConfigError(Exception):
    pass


def load_config(path):
    """Flat ``key = value`` file; '#' starts a comment, blank lines ok."""
    settings = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CASTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            settings[key] = _CASTS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return settings


def _validate(settings):
    if settings["example"] not in (1, 2):
        raise ConfigError("example must be 1 or 2")
    if settings["method"] not in ("enkf", "mlenkf"):
        raise ConfigError("method must be enkf or mlenkf")
    if settings["solver"] not in ("exact", "expeuler"):
        raise ConfigError("solver must be exact or expeuler")
    n = settings["n_ref"]
    if n < 2 or n & (n - 1):
        raise ConfigError("n_ref must be a power of two >= 2")
    try:
        eps = tuple(float(tok) for tok in str(settings["eps"]).split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad eps list: {exc}") from exc
    if not eps or any(e <= 0 for e in eps):
        raise ConfigError("eps must be a nonempty list of positive numbers")
    settings["eps"] = eps
    return settings


def _fmt(value):
    return repr(float(value)) if isinstance(value, float) else str(value)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _summary_text(records, hierarchy):
    lines = []
    try:
        slope, intercept, stderr = experiment.fit_loglog_slope(records)
        lines.append(
            f"log-log MSE vs cost: slope {slope:+.4f} +/- {stderr:.4f} "
            f"(intercept {intercept:+.4f}, {len(records)} points)"
        )
    except ValueError as exc:
        lines.append(f"slope fit skipped: {exc}")
    s = hierarchy.d * hierarchy.gamma_x + hierarchy.gamma_t
    if records and records[0].method == "mlenkf" and abs(hierarchy.beta - s) <= 1e-9:
        lines.append("balanced-rate branch: bounded mse*cost/L^3 expected")
        series = experiment.normalized_series(records)
        for eps, lvl, val in series:
            lines.append(f"  eps={_fmt(eps)} L={lvl} mse*cost/L^3={val:.6e}")
        vals = [v for _, _, v in series]
        if vals:
            lines.append(f"  spread max/min = {max(vals) / min(vals):.3f}")
    return "\n".join(lines) + "\n"


def _cmd_run(args):
    settings = dict(DEFAULTS)
    if args.config is not None:
        settings.update(load_config(args.config))
    for key in ("example", "method", "solver", "eps", "realizations", "seed", "n_ref", "jobs"):
        value = getattr(args, key.replace("-", "_"))
        if value is not None:
            settings[key] = value
    settings = _validate(settings)
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 1
    cfg = experiment.make_config(
        example=settings["example"],
        method=settings["method"],
        solver=settings["solver"],
        eps_grid=settings["eps"],
        n_steps=settings["n_steps"],
        realizations=settings["realizations"],
        master_seed=settings["seed"],
        n_ref=settings["n_ref"],
        base_constant=settings["base_constant"],
        jobs=settings["jobs"],
    )
    records, schedules = experiment.run_experiment(cfg)
    _write_csv(
        out_dir / "results.csv",
        RESULT_COLUMNS,
        [
            (r.method, r.example, r.solver, r.epsilon, r.L,
             r.cost_units, round(r.wall_seconds, 6), r.mse, r.realizations)
            for r in records
        ],
    )
    sched_rows = []
    for sched in schedules:
        sizes = sched.M if cfg.method == "mlenkf" else (sched.M,)
        for l, m_l in enumerate(sizes):
            level = l if cfg.method == "mlenkf" else sched.L
            n_l, j_l, _, _ = cfg.hierarchy.level_params(level)
            sched_rows.append(
                (cfg.method, cfg.example, cfg.solver, sched.epsilon, level, m_l, n_l, j_l)
            )
    _write_csv(out_dir / "schedule.csv", SCHEDULE_COLUMNS, sched_rows)
    (out_dir / "summary.txt").write_text(_summary_text(records, cfg.hierarchy))
    for r in records:
        print(
            f"{r.method} example={r.example} solver={r.solver} eps={_fmt(r.epsilon)} "
            f"L={r.L} cost={_fmt(r.cost_units)} mse={r.mse:.6e}"
        )
    print(f"wrote {out_dir / 'results.csv'}")
    return 0


def _cmd_verify(args):
    ok = verify.run_all(seed=args.seed)
    print("verify:", "all checks passed" if ok else "FAILURES above")
    return 0 if ok else 1


def _cmd_slope(args):
    try:
        with open(args.infile, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(RESULT_COLUMNS) <= set(reader.fieldnames):
                print("error: missing results columns", file=sys.stderr)
                return 1
            rows = list(reader)
    except OSError as exc:
        print(f"error: cannot read {args.infile}: {exc}", file=sys.stderr)
        return 1
    groups = {}
    try:
        for row in rows:
            key = (row["method"], row["example"], row["solver"])
            groups.setdefault(key, []).append(
                (float(row["cost_units"]), float(row["mse"]))
            )
    except (KeyError, ValueError) as exc:
        print(f"error: malformed results row: {exc}", file=sys.stderr)
        return 1
    if not groups:
        print("error: no data rows", file=sys.stderr)
        return 1
    fitted = 0
    print(f"{'method':>8} {'example':>7} {'solver':>8} {'points':>6} {'slope':>9} {'stderr':>8}")
    for key in sorted(groups):
        pts = groups[key]
        if len(pts) < 3 or len({c for c, _ in pts}) < 3:
            print(f"{key[0]:>8} {key[1]:>7} {key[2]:>8} {len(pts):>6} {'(needs >= 3 distinct points)':>20}")
            continue
        slope, _, stderr = experiment.fit_loglog_slope(pts)
        print(f"{key[0]:>8} {key[1]:>7} {key[2]:>8} {len(pts):>6} {slope:>+9.4f} {stderr:>8.4f}")
        fitted += 1
    return 0 if fitted else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mlenkf",
        description="Multilevel ensemble Kalman filter convergence studies.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_run = sub.add_parser("run", help="run a convergence study, write CSV + summary")
    p_run.add_argument("--config", help="flat key=value config file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--example", type=int, choices=(1, 2))
    p_run.add_argument("--method", choices=("enkf", "mlenkf"))
    p_run.add_argument("--solver", choices=("exact", "expeuler"))
    p_run.add_argument("--eps", help="comma-separated accuracy targets")
    p_run.add_argument("--realizations", type=int)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--n-ref", dest="n_ref", type=int, help="reference dimension (power of two)")
    p_run.add_argument("--jobs", type=int, help="max concurrent realizations")
    p_run.set_defaults(func=_cmd_run)

    p_verify = sub.add_parser("verify", help="run the property battery")
    p_verify.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    p_verify.set_defaults(func=_cmd_verify)

    p_slope = sub.add_parser("slope", help="fit slopes from a results.csv")
    p_slope.add_argument("--in", dest="infile", required=True)
    p_slope.set_defaults(func=_cmd_slope)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
