"""CSV artifacts of a run and their readers.

Floats are written with 17 significant digits, which is enough for an exact
round trip of IEEE doubles; a second run with the same scenario therefore
produces byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .control import TickRecord, Trajectory
from .distributed import RoundRecord
from .identify import RegretReport

ROUNDS_CSV = "rounds.csv"
REGRET_CSV = "regret.csv"
THETA_CSV = "theta.csv"
TRAJECTORY_CSV = "trajectory.csv"
SUMMARY_JSON = "summary.json"

ROUND_FIELDS = ("t", "eta", "f_t", "grad_norm", "bytes_phase_a", "bytes_phase_b", "sublevel_violation")
REGRET_FIELDS = ("T", "sum_f", "hindsight_F", "R_T", "converged", "grad_norm")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


# --- identification round traces --------------------------------------------


def write_rounds(path, rounds: list[RoundRecord], pred_error=None):
    header = list(ROUND_FIELDS)
    if pred_error is not None:
        header.append("pred_error")
    rows = []
    for k, r in enumerate(rounds):
        row = [r.t, r.eta, r.f_t, r.grad_norm, r.bytes_phase_a, r.bytes_phase_b, r.sublevel_violation]
        if pred_error is not None:
            row.append(pred_error[k])
        rows.append(row)
    write_csv(path, header, rows)


def read_rounds(path) -> tuple[list[RoundRecord], np.ndarray | None]:
    header, rows = read_csv(path)
    if tuple(header[: len(ROUND_FIELDS)]) != ROUND_FIELDS:
        raise ValueError(f"{path}: unexpected header {header}")
    recs = [
        RoundRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4]), int(r[5]), r[6] == "1")
        for r in rows
    ]
    pred = np.array([float(r[7]) for r in rows]) if "pred_error" in header else None
    return recs, pred


def write_regret(path, reports: list[RegretReport]):
    write_csv(path, REGRET_FIELDS, [(r.T, r.sum_f, r.hindsight_F, r.value, r.converged, r.grad_norm) for r in reports])


def read_regret(path) -> list[RegretReport]:
    header, rows = read_csv(path)
    if tuple(header) != REGRET_FIELDS:
        raise ValueError(f"{path}: unexpected header {header}")
    return [RegretReport(int(r[0]), float(r[1]), float(r[2]), float(r[3]), r[4] == "1", float(r[5])) for r in rows]


def write_theta(path, thetas: list[np.ndarray]):
    """Long format: one row per parameter, agents 1-based."""
    rows = [(i + 1, k, v) for i, th in enumerate(thetas) for k, v in enumerate(th)]
    write_csv(path, ("agent", "index", "value"), rows)


def read_theta(path) -> list[np.ndarray]:
    _, rows = read_csv(path)
    out: dict[int, list[float]] = {}
    for a, _k, v in rows:
        out.setdefault(int(a), []).append(float(v))
    return [np.array(out[a]) for a in sorted(out)]


# --- closed-loop trajectories -----------------------------------------------


def trajectory_header(n_agents: int, d_y: int) -> list[str]:
    idx = lambda name, n: [f"{name}_{k + 1}" for k in range(n)]  # noqa: E731
    return (
        ["tick", "tau", "t", "eta", "updated"]
        + idx("P", n_agents) + idx("Q", n_agents) + idx("Pbar", n_agents)
        + idx("y", d_y) + idx("y_meas", d_y) + idx("y_hat_theta", d_y)
        + ["ell", "h", "band_violation_count", "band_violation_sq", "model_err_inf"]
    )


def write_trajectory(path, traj: Trajectory, pbar: np.ndarray):
    recs = traj.records
    if not recs:
        raise ValueError("empty trajectory")
    n, d_y = recs[0].u.shape[0], recs[0].y.size
    rows = []
    for r in recs:
        rows.append(
            [r.tick, r.tau, r.t, r.eta, r.updated, *r.u[:, 0], *r.u[:, 1], *pbar[r.tick],
             *r.y, *r.y_meas, *r.y_hat_theta, r.ell, r.h, r.band_violation_count, r.band_violation_sq, r.model_err_inf]
        )
    write_csv(path, trajectory_header(n, d_y), rows)


def read_trajectory(path) -> tuple[Trajectory, np.ndarray]:
    """Parse a trajectory CSV back into records plus the available-power series."""
    header, rows = read_csv(path)
    n = sum(1 for h in header if h.startswith("P_"))
    d_y = sum(1 for h in header if h.startswith("y_") and h[2:].isdigit())
    if header != trajectory_header(n, d_y):
        raise ValueError(f"{path}: unexpected header")
    traj = Trajectory()
    pbar = np.zeros((len(rows), n))
    for k, row in enumerate(rows):
        tick, tau, t = int(row[0]), int(row[1]), int(row[2])
        vals = np.array([float(v) for v in row[5:]])
        P, Q, Pb = vals[:n], vals[n : 2 * n], vals[2 * n : 3 * n]
        o = 3 * n
        y, ym, yh = vals[o : o + d_y], vals[o + d_y : o + 2 * d_y], vals[o + 2 * d_y : o + 3 * d_y]
        rest = row[5 + o + 3 * d_y :]
        pbar[k] = Pb
        traj.append(TickRecord(
            tick=tick, tau=tau, t=t, eta=float(row[3]), u=np.column_stack([P, Q]), y=y, y_meas=ym, y_hat_theta=yh,
            ell=float(rest[0]), h=float(rest[1]), band_violation_count=int(rest[2]),
            band_violation_sq=float(rest[3]), model_err_inf=float(rest[4]), updated=row[4] == "1",
        ))
    return traj, pbar


# --- summary ----------------------------------------------------------------


def write_summary(path, summary: dict):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_summary(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def artifact_paths(out_dir) -> dict[str, Path]:
    d = Path(out_dir)
    return {name: d / name for name in (ROUNDS_CSV, REGRET_CSV, THETA_CSV, TRAJECTORY_CSV, SUMMARY_JSON)}
