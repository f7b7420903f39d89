"""
Command-line runner for the vacuum-decay simulator.

  python src/lagvac_runner.py run --config configs/oracle_gamma2_beta1.ini
  python src/lagvac_runner.py sweep --config configs/bench_discontinuous_beta05.ini --grid "gamma=2;beta=0.5,1"
  python src/lagvac_runner.py verify lagvac_out

Exit codes: 0 pass, 1 runtime/config error, 2 verdict failure.
"""
import argparse
import itertools
import logging
import math
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

try:
    from engines.diagnostics import (TrajectoryMonitor, boundary_rate, energy, exact_boundary_q,
                                     fit_decay, identity_residual_trajectory, momentum, probe_cell,
                                     quadrature_error_estimate, reconstruct_eulerian, records_to_frame,
                                     theoretical_rate)
    from engines.errors import (ArtifactError, ConfigError, FitError, LagvacError, ReconstructionError,
                                SolverError)
    from engines.model_core import m_of_q, pressure
    from engines.solver import LagrangianState, iter_run
    from run_config import load_config, parse_config_text, parse_grid
except ImportError:
    # Handle case where run from root
    from src.engines.diagnostics import (TrajectoryMonitor, boundary_rate, energy, exact_boundary_q,
                                         fit_decay, identity_residual_trajectory, momentum, probe_cell,
                                         quadrature_error_estimate, reconstruct_eulerian, records_to_frame,
                                         theoretical_rate)
    from src.engines.errors import (ArtifactError, ConfigError, FitError, LagvacError, ReconstructionError,
                                    SolverError)
    from src.engines.model_core import m_of_q, pressure
    from src.engines.solver import LagrangianState, iter_run
    from src.run_config import load_config, parse_config_text, parse_grid

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERDICT = 2

FLOAT_FORMAT = "%.17g"
FIT_QUANTITIES = ("sup_m", "sup_n")
CELL_COLUMNS = ["xi_center", "c", "Q", "m", "n"]
NODE_COLUMNS = ["xi_node", "u", "x"]


def version_string():
    """git-describe style version of the working tree, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5, check=True)
        described = out.stdout.strip()
        if described:
            return described
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{VERSION}"


def resolve_output_dir(config, out=None):
    """LAGVAC_OUT wins over --out, which wins over [output] directory."""
    env_out = os.environ.get("LAGVAC_OUT", "").strip()
    return Path(env_out or out or config.output.directory)


# --- Run directory files ---

def snapshot_paths(run_dir, label):
    snap_dir = Path(run_dir) / "snapshots"
    return snap_dir / f"snap_{label}.cells.csv", snap_dir / f"snap_{label}.nodes.csv"


def write_snapshot(run_dir, label, state, params):
    cells_path, nodes_path = snapshot_paths(run_dir, label)
    cells_path.parent.mkdir(parents=True, exist_ok=True)
    grid = state.grid
    m = np.asarray(m_of_q(state.q, params.rho_l), dtype=float)
    try:
        x = reconstruct_eulerian(state, params).x
    except ReconstructionError:
        x = np.full(grid.n_cells + 1, np.nan)

    pd.DataFrame({"xi_center": grid.centers, "c": state.c, "Q": state.q, "m": m, "n": state.c * m}).to_csv(
        cells_path, index=False, float_format=FLOAT_FORMAT)
    pd.DataFrame({"xi_node": grid.nodes, "u": state.u, "x": x}).to_csv(
        nodes_path, index=False, float_format=FLOAT_FORMAT)


def _read_csv(path, columns):
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise ArtifactError(path, "missing") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ArtifactError(path, f"unreadable ({e})") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ArtifactError(path, f"missing column(s) {', '.join(missing)}")
    return frame


def read_snapshot(run_dir, label, t):
    cells_path, nodes_path = snapshot_paths(run_dir, label)
    cells = _read_csv(cells_path, CELL_COLUMNS)
    nodes = _read_csv(nodes_path, NODE_COLUMNS)
    try:
        c = cells["c"].to_numpy(dtype=float)
        q = cells["Q"].to_numpy(dtype=float)
        u = nodes["u"].to_numpy(dtype=float)
        x = nodes["x"].to_numpy(dtype=float)
    except ValueError as e:
        raise ArtifactError(cells_path.parent, f"non-numeric snapshot {label} ({e})") from e
    if len(c) < 1 or len(u) != len(c) + 1:
        raise ArtifactError(nodes_path, f"{len(u)} nodes do not match {len(c)} cells")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(q)) and np.all(np.isfinite(u))):
        raise ArtifactError(cells_path, "non-finite values")
    if np.any(q <= 0) or np.any(c < 0):
        raise ArtifactError(cells_path, "Q must be positive and c non-negative")
    a = float(x[0])
    return LagrangianState(t=float(t), c=c, q=q, u=u, a=a if math.isfinite(a) else 0.0)


def write_manifest(run_dir, entries):
    lines = [f"{key} = {value}" for key, value in entries.items()]
    (Path(run_dir) / "MANIFEST").write_text("\n".join(lines) + "\n")


def read_manifest(run_dir):
    path = Path(run_dir) / "MANIFEST"
    if not path.is_file():
        raise ArtifactError(path, "missing")
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ArtifactError(path, f"line {lineno} is not 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    for key in ("status", "n_snapshots", "snapshot_times"):
        if key not in entries:
            raise ArtifactError(path, f"missing key {key!r}")
    try:
        times = [float(t) for t in entries["snapshot_times"].split(",") if t.strip()]
        n_snapshots = int(entries["n_snapshots"])
    except ValueError as e:
        raise ArtifactError(path, f"bad snapshot entries ({e})") from e
    if len(times) != n_snapshots:
        raise ArtifactError(path, f"n_snapshots={n_snapshots} but {len(times)} snapshot times")
    entries["snapshot_times"] = times
    entries["n_snapshots"] = n_snapshots
    return entries


# --- run ---

@dataclass
class RunOutcome:
    exit_code: int
    run_dir: str
    fits: Dict[str, dict] = field(default_factory=dict)
    error: Optional[str] = None


def _exact_rate(config):
    """Exact decay exponent of Q at a free end; NaN where no end is free."""
    return float("nan") if config.vacuum_regime().is_continuous else boundary_rate(config.model)


def _fit_rows(config, frame):
    """Decay fits of sup_m and sup_n over the configured window, one summary row each."""
    params, regime = config.model, config.vacuum_regime()
    info = theoretical_rate(params, regime)
    window = config.fit_window()
    rows = []
    for quantity in FIT_QUANTITIES:
        values = frame[quantity].to_numpy(dtype=float)
        row = {"quantity": quantity, "theta": info.theta, "theoretical_rate": info.rate,
               "log_corrected": info.log_corrected, "boundary_rate": _exact_rate(config),
               "window_lo": window[0], "window_hi": window[1],
               "vanish_ratio": float(values[-1] / values[0]) if values[0] > 0 else float("nan")}
        try:
            fit = fit_decay(frame["t"], values, window=window, log_power=info.log_power,
                            theoretical_rate=info.rate, slack=config.fit.slack)
            row.update(exponent=fit.exponent, r2=fit.r2, n_points=fit.n_points,
                       verdict="pass" if fit.verdict else "fail", note="")
        except FitError as e:
            logger.warning(f"Decay fit of {quantity} not possible: {e}")
            row.update(exponent=float("nan"), r2=float("nan"), n_points=0, verdict="fail", note=str(e))
        rows.append(row)
    return rows


def execute_run(config, run_dir):
    """Runs one configuration into run_dir and returns the outcome; never raises LagvacError."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(config.to_ini_text())

    params, regime = config.model, config.vacuum_regime()
    flags = config.diagnostics
    snapshot_times = []
    records = []
    outcome = RunOutcome(exit_code=EXIT_ERROR, run_dir=str(run_dir))
    status = "incomplete"

    try:
        initial = config.initial_data()
        monitor = None
        if flags.monitors:
            monitor = TrajectoryMonitor(params, regime, LagrangianState.from_initial(initial), flags.probe_x)
        on_step = monitor.observe if monitor is not None else None

        for index, state in enumerate(iter_run(initial, params, regime, config.step, config.sample_times(),
                                               on_step=on_step)):
            if flags.snapshots:
                write_snapshot(run_dir, f"{index:05d}", state, params)
            snapshot_times.append(state.t)
            if monitor is not None:
                records.append(monitor.record(state))

        outcome.exit_code = EXIT_OK
        if records:
            frame = records_to_frame(records)
            frame.to_csv(run_dir / "diagnostics.csv", index=False, float_format=FLOAT_FORMAT)
            if flags.decay_fit and config.step.t_end > 0:
                rows = _fit_rows(config, frame)
                summary = pd.DataFrame(rows)
                summary.to_csv(run_dir / "summary.csv", index=False, float_format=FLOAT_FORMAT)
                print(summary.to_markdown(index=False, floatfmt=".4f"))
                outcome.fits = {row["quantity"]: row for row in rows}
                if any(row["verdict"] != "pass" for row in rows):
                    outcome.exit_code = EXIT_VERDICT
        status = "complete"
        logger.info(f"Run finished in {run_dir} with exit code {outcome.exit_code}")
    except SolverError as e:
        outcome.error = str(e)
        logger.error(f"Run aborted: {e}")
        if e.state is not None:
            logger.error(f"Last accepted state: t={e.state.t:.6g}, min Q={e.state.q.min():.4e}, "
                         f"max |u|={np.max(np.abs(e.state.u)):.4e}")
            write_snapshot(run_dir, "abort", e.state, params)
    except LagvacError as e:
        outcome.error = str(e)
        logger.error(f"Run failed: {e}")
    finally:
        if records and status != "complete":
            records_to_frame(records).to_csv(run_dir / "diagnostics.csv", index=False, float_format=FLOAT_FORMAT)
        write_manifest(run_dir, {
            "version": version_string(),
            "status": status,
            "exit_code": outcome.exit_code,
            "n_snapshots": len(snapshot_times) if flags.snapshots else 0,
            "snapshot_times": ",".join(repr(float(t)) for t in snapshot_times) if flags.snapshots else "",
            "error": (outcome.error or "").replace("\n", " "),
        })
    return outcome


def cmd_run(config, out=None):
    return execute_run(config, resolve_output_dir(config, out)).exit_code


# --- sweep ---

def _cell_name(index, values):
    parts = "_".join(f"{key}{value:g}" for key, value in values.items())
    return f"cell_{index:02d}_{parts}"


def cmd_sweep(config, grid, out=None, jobs=1):
    """
    Runs the cartesian product of the parameter grid, one run directory per cell,
    and writes summary.csv / summary.md with one row per cell.
    """
    if isinstance(grid, str):
        grid = parse_grid(grid)
    out_dir = resolve_output_dir(config, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    logger.info(f"Sweeping {len(cells)} cell(s) over {', '.join(keys)} with {jobs} job(s)")

    rows = {}
    pending = []
    for index, values in enumerate(cells):
        run_dir = out_dir / _cell_name(index, values)
        try:
            cell_config = config.with_overrides(model=values)
        except ConfigError as e:
            logger.warning(f"Sweep cell {values} rejected: {e}")
            rows[index] = {**values, "regime": config.regime.tag, "verdict": "invalid",
                           "exit_code": EXIT_ERROR, "run_dir": "", "error": str(e)}
            continue
        pending.append((index, values, cell_config, run_dir))

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(execute_run, [p[2] for p in pending], [p[3] for p in pending]))
    else:
        outcomes = [execute_run(cell_config, run_dir) for _, _, cell_config, run_dir in pending]

    for (index, values, cell_config, _), outcome in zip(pending, outcomes):
        info = theoretical_rate(cell_config.model, cell_config.vacuum_regime())
        fit = outcome.fits.get("sup_m", {})
        exponent = fit.get("exponent", float("nan"))
        if outcome.exit_code == EXIT_ERROR:
            verdict = "error"
        else:
            verdict = "pass" if outcome.exit_code == EXIT_OK else "fail"
        rows[index] = {**values, "regime": cell_config.regime.tag, "theta": info.theta,
                       "theoretical_rate": info.rate, "fitted_rate": -exponent,
                       "boundary_rate": _exact_rate(cell_config), "verdict": verdict,
                       "exit_code": outcome.exit_code, "run_dir": outcome.run_dir, "error": outcome.error or ""}

    columns = keys + ["regime", "theta", "theoretical_rate", "fitted_rate", "boundary_rate", "verdict",
                      "exit_code", "run_dir", "error"]
    summary = pd.DataFrame([rows[i] for i in sorted(rows)], columns=columns)
    summary.to_csv(out_dir / "summary.csv", index=False, float_format=FLOAT_FORMAT)
    table = summary.drop(columns=["run_dir", "error"]).to_markdown(index=False, floatfmt=".4f")
    (out_dir / "summary.md").write_text(table + "\n")
    print(table)

    codes = set(summary["exit_code"])
    if codes <= {EXIT_OK}:
        return EXIT_OK
    return EXIT_ERROR if EXIT_ERROR in codes else EXIT_VERDICT


# --- verify ---

def _check(name, value, tolerance, passed, detail=""):
    return {"check": name, "value": value, "tolerance": tolerance, "passed": bool(passed), "detail": detail}


def verify_run(run_dir):
    """
    Re-evaluates the conservation checks and decay fits of a finished run from
    its files. Returns one row per check; raises ArtifactError for unusable files.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ArtifactError(run_dir, "not a directory")
    manifest = read_manifest(run_dir)
    config_path = run_dir / "config.ini"
    if not config_path.is_file():
        raise ArtifactError(config_path, "missing")
    try:
        config = parse_config_text(config_path.read_text())
    except ConfigError as e:
        raise ArtifactError(config_path, str(e)) from e
    if manifest["n_snapshots"] == 0:
        raise ArtifactError(run_dir / "MANIFEST", "no snapshots recorded")

    params, regime = config.model, config.vacuum_regime()
    flags = config.diagnostics
    states = [read_snapshot(run_dir, f"{i:05d}", t) for i, t in enumerate(manifest["snapshot_times"])]
    if any(s.n_cells != config.grid.cells for s in states):
        raise ArtifactError(run_dir / "snapshots", f"snapshots do not have {config.grid.cells} cells")
    times = np.array([s.t for s in states])
    checks = []

    mom = np.array([momentum(s) for s in states])
    drift = float(np.max(np.abs(mom - mom[0])))
    checks.append(_check("momentum", drift, flags.momentum_tol, drift <= flags.momentum_tol))

    energies = np.array([energy(s, params) for s in states])
    scale = max(abs(energies[0]), np.finfo(float).tiny)
    rise = float(np.max(np.diff(energies), initial=0.0)) / scale
    checks.append(_check("energy_monotone", rise, flags.energy_rtol, rise <= flags.energy_rtol))

    early = times <= flags.identity_t_max
    diag_path = run_dir / "diagnostics.csv"
    if diag_path.is_file():
        diag = _read_csv(diag_path, ["t", "energy", "momentum", "identity_residual", "cumulative_dissipation",
                                     "numerical_dissipation"])
        if len(diag) != len(states) or not np.allclose(diag["t"].to_numpy(dtype=float), times, rtol=0, atol=1e-12):
            raise ArtifactError(diag_path, "rows do not match the snapshot times")
        spent = diag["cumulative_dissipation"].to_numpy(dtype=float) + diag["numerical_dissipation"].to_numpy(dtype=float)
        balance = float(np.max(np.abs(energies + spent - energies[0]))) / scale
        checks.append(_check("energy_balance", balance, flags.energy_rtol, balance <= flags.energy_rtol))

        # snapshots must agree with what the monitor saw during the run
        gap = float(np.max(np.abs(diag["momentum"].to_numpy(dtype=float) - mom)))
        checks.append(_check("momentum_record", gap, flags.momentum_tol, gap <= flags.momentum_tol))
        gap = float(np.max(np.abs(diag["energy"].to_numpy(dtype=float) - energies))) / scale
        checks.append(_check("energy_record", gap, flags.energy_rtol, gap <= flags.energy_rtol))

        stored = diag["identity_residual"].to_numpy(dtype=float)[early]
        worst = float(np.max(np.abs(stored)))
        checks.append(_check("identity_residual", worst, flags.identity_tol, worst <= flags.identity_tol,
                             f"t <= {flags.identity_t_max:g}"))

    if np.count_nonzero(early) > 1:
        window = [s for s, keep in zip(states, early) if keep]
        residual = identity_residual_trajectory(window, flags.probe_x, params).to_numpy()
        k = probe_cell(flags.probe_x, config.grid.cells)
        p_probe = [pressure(s.c[k], s.q[k], params.gamma) for s in window]
        allowed = flags.identity_tol + quadrature_error_estimate(times[early], p_probe)
        excess = float(np.max(np.abs(residual) - allowed))
        checks.append(_check("identity_snapshots", float(np.max(np.abs(residual))), flags.identity_tol,
                             excess <= 0.0, "trapezoid over snapshots, tolerance widened by the quadrature error"))

    if flags.boundary_oracle and not regime.is_continuous and params.gamma > params.beta:
        initial = config.initial_data()
        exact = exact_boundary_q(times, "left", params, initial)
        q_left = np.array([s.q[0] for s in states])
        err = float(np.max(np.abs(q_left - exact) / exact))
        checks.append(_check("boundary_oracle", err, flags.oracle_rtol, err <= flags.oracle_rtol))

    cap = params.rho_l * float(np.max(states[0].c))
    sup_n = float(max(np.max(s.c * m_of_q(s.q, params.rho_l)) for s in states))
    checks.append(_check("gas_mass_bound", sup_n, cap, sup_n < cap or cap == 0.0))

    if flags.decay_fit and config.step.t_end > 0:
        frame = pd.DataFrame({
            "t": times,
            "sup_m": [float(np.max(m_of_q(s.q, params.rho_l))) for s in states],
            "sup_n": [float(np.max(s.c * m_of_q(s.q, params.rho_l))) for s in states],
        })
        for row in _fit_rows(config, frame):
            checks.append(_check(f"decay_{row['quantity']}", row["exponent"], -row["theoretical_rate"],
                                 row["verdict"] == "pass", row["note"]))

    return pd.DataFrame(checks, columns=["check", "value", "tolerance", "passed", "detail"])


def cmd_verify(run_dir):
    try:
        checks = verify_run(run_dir)
    except ArtifactError as e:
        logger.error(f"Cannot verify {run_dir}: {e}")
        return EXIT_ERROR
    print(checks.to_markdown(index=False, floatfmt=".3e"))
    failed = checks.loc[~checks["passed"], "check"].tolist()
    if failed:
        logger.error(f"Verification of {run_dir} failed: {', '.join(failed)}")
        return EXIT_VERDICT
    logger.info(f"All {len(checks)} checks passed for {run_dir}")
    return EXIT_OK


# --- entry point ---

def build_parser():
    parser = argparse.ArgumentParser(description="Vacuum-decay simulator for the viscous liquid-gas model")
    parser.add_argument("--log-level", default=os.environ.get("LAGVAC_LOG_LEVEL", "INFO").strip().upper(),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one configuration")
    run_p.add_argument("--config", required=True, type=Path)
    run_p.add_argument("--out", type=Path)
    run_p.add_argument("--seed", type=int)

    sweep_p = sub.add_parser("sweep", help="run a grid of (gamma, beta) cells")
    sweep_p.add_argument("--config", required=True, type=Path)
    sweep_p.add_argument("--grid", required=True)
    sweep_p.add_argument("--out", type=Path)
    sweep_p.add_argument("--jobs", type=int, default=int(os.environ.get("LAGVAC_JOBS", "1").strip() or 1))
    sweep_p.add_argument("--seed", type=int)

    verify_p = sub.add_parser("verify", help="re-check a finished run directory")
    verify_p.add_argument("run_dir", type=Path)
    return parser


def main(argv: Optional[List[str]] = None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stdout, level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "verify":
        return cmd_verify(args.run_dir)

    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_overrides(random={"seed": args.seed})
        if args.command == "run":
            return cmd_run(config, args.out)
        return cmd_sweep(config, parse_grid(args.grid), args.out, max(1, args.jobs))
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
