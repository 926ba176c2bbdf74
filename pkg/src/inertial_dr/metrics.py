"""KITTI-style odometry errors over 100..800 m sub-trajectories."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
CSV_COLUMNS = ("sequence", "length_m", "duration_s", "t_rel_pct", "r_rel_degpm", "final_err_m")


@dataclass
class ErrorReport:
    """Relative errors of one trajectory.

    ``t_rel`` is in percent, ``r_rel`` in deg/m. Both are NaN and ``flagged``
    is set when no sub-trajectory of any requested length exists.
    ``per_length`` maps length (m) to ``(t_rel, r_rel, count)``.
    """

    t_rel: float
    r_rel: float
    final_err: float
    length_m: float
    duration_s: float = float("nan")
    n_segments: int = 0
    per_length: dict = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return self.n_segments == 0


def _poses(x):
    if isinstance(x, tuple):
        R, p = x
        return np.asarray(R, dtype=float), np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    return x[:, :3, :3], x[:, :3, 3]


def cumulative_distance(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    d = np.zeros(len(p))
    d[1:] = np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))
    return d


def segment_errors(est, gt, length: float):
    """Translation (m) and rotation (rad) residuals of every sub-trajectory of ``length``.

    A sub-trajectory starts at every frame and ends at the first frame whose
    travelled distance reaches ``length``.
    """
    Re, pe = _poses(est)
    Rg, pg = _poses(gt)
    dist = cumulative_distance(pg)
    first = np.arange(len(dist))
    last = np.searchsorted(dist, dist + length, side="left")
    ok = last < len(dist)
    first, last = first[ok], last[ok]
    if first.size == 0:
        return np.zeros(0), np.zeros(0)
    # increments expressed in the first frame of each sub-trajectory
    dRg = np.einsum("nji,njk->nik", Rg[first], Rg[last])
    dtg = np.einsum("nji,nj->ni", Rg[first], pg[last] - pg[first])
    dRe = np.einsum("nji,njk->nik", Re[first], Re[last])
    dte = np.einsum("nji,nj->ni", Re[first], pe[last] - pe[first])
    t_err = np.linalg.norm(dtg - dte, axis=1)
    cos_a = 0.5 * (np.einsum("nij,nij->n", dRe, dRg) - 1.0)
    r_err = np.arccos(np.clip(cos_a, -1.0, 1.0))
    return t_err, r_err


def relative_errors(est, gt, lengths=LENGTHS, t=None) -> ErrorReport:
    """Average relative translation and rotation errors of ``est`` against ``gt``.

    ``est`` and ``gt`` are ``(rotations, positions)`` tuples or arrays of
    homogeneous poses, time-aligned and of equal length.
    """
    Re, pe = _poses(est)
    Rg, pg = _poses(gt)
    if len(pe) != len(pg):
        raise ValueError(f"trajectory lengths differ: {len(pe)} vs {len(pg)}")
    t_all, r_all, per_length = [], [], {}
    for L in lengths:
        te, re = segment_errors((Re, pe), (Rg, pg), L)
        if te.size == 0:
            continue
        te = te / L
        re = re / L
        per_length[L] = (100.0 * te.mean(), np.degrees(re.mean()), te.size)
        t_all.append(te)
        r_all.append(re)
    n = sum(a.size for a in t_all)
    if n:
        t_rel = 100.0 * float(np.concatenate(t_all).mean())
        r_rel = float(np.degrees(np.concatenate(r_all).mean()))
    else:
        t_rel = r_rel = float("nan")
    dur = float(t[-1] - t[0]) if t is not None and len(t) else float("nan")
    return ErrorReport(
        t_rel=t_rel,
        r_rel=r_rel,
        final_err=float(np.linalg.norm(pe[-1] - pg[-1])),
        length_m=float(cumulative_distance(pg)[-1]),
        duration_s=dur,
        n_segments=n,
        per_length=per_length,
    )


def _row(name, rep: ErrorReport):
    return (name, rep.length_m, rep.duration_s, rep.t_rel, rep.r_rel, rep.final_err)


def summary_rows(reports: dict):
    """Per-sequence rows plus an ``average`` row over unflagged sequences."""
    rows = [_row(name, rep) for name, rep in reports.items()]
    good = [r for r, rep in zip(rows, reports.values()) if not rep.flagged]
    if good:
        avg = tuple(float(np.mean([r[i] for r in good])) for i in range(1, 6))
    else:
        avg = (float("nan"),) * 5
    return rows + [("average", *avg)]


def _cell(x):
    if isinstance(x, str):
        return x
    return "nan" if not np.isfinite(x) else f"{x:.4f}"


def summarize(reports: dict, out=None) -> str:
    """Write ``<out>.csv`` and ``<out>.txt`` (if ``out`` given); return the text table."""
    if not reports:
        raise ValueError("no reports to summarize")
    rows = summary_rows(reports)
    excluded = [name for name, rep in reports.items() if rep.flagged]
    table = [CSV_COLUMNS] + [tuple(_cell(c) for c in r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(CSV_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.insert(len(lines) - 1, "  ".join("-" * w for w in widths))
    for name in excluded:
        lines.append(f"* {name}: shorter than {LENGTHS[0]} m, excluded from the average")
    text = "\n".join(lines) + "\n"
    if out is not None:
        out = Path(out)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_cell(c) if not isinstance(c, str) else c for c in r])
        out.with_suffix(".csv").write_text(buf.getvalue())
        out.with_suffix(".txt").write_text(text)
    return text


def write_per_length(reports: dict, path) -> None:
    """Plot-ready breakdown: one row per (sequence, length)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sequence", "segment_m", "t_rel_pct", "r_rel_degpm", "count"))
    for name, rep in reports.items():
        for L, (tr, rr, c) in sorted(rep.per_length.items()):
            w.writerow((name, L, _cell(tr), _cell(rr), c))
    Path(path).write_text(buf.getvalue())
