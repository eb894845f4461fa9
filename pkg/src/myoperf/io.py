"""CSV and JSON formats shared by the command-line tools.

Every writer emits rows in ascending voxel id then time index, and formats
floats with nine significant digits independent of locale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinetics import PARAM_NAMES, SampledCurve

AIF_HEADER = ("t_index", "time_min", "conc_mM")
CURVES_HEADER = ("voxel_id", "t_index", "time_min", "conc_mM")
SIGNAL_HEADER = ("voxel_id", "t_index", "time_min", "signal")
MASK_HEADER = ("voxel_id", "row", "col")
MAP_HEADER = ("voxel_id", "row", "col") + PARAM_NAMES + ("status",)
COV_HEADER = ("voxel_id",) + tuple(f"cov_{p}" for p in PARAM_NAMES)
RHAT_HEADER = ("voxel_id",) + tuple(f"rhat_{p}" for p in PARAM_NAMES)
CHAIN_HEADER = ("chain", "step", "voxel_id") + PARAM_NAMES + ("sigma2", "alpha_f_b", "alpha_ps")
STATUSES = ("ok", "failed", "truth")


class InputError(ValueError):
    """Malformed input file; the message names the file and line."""


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".9g")


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_rows(path: Path, header) -> list[tuple[int, list[str]]]:
    """Rows as ``(line number, fields)`` after checking the header exactly."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if tuple(first) != tuple(header):
            raise InputError(f"{path}:1: expected header {','.join(header)}")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            rows.append((reader.line_num, row))
    return rows


def _number(path, line, text, kind=float):
    try:
        value = kind(text)
    except ValueError:
        raise InputError(f"{path}:{line}: cannot parse {text!r}") from None
    return value


# ---------------------------------------------------------------------------
# curves


def write_aif(path: Path, aif: SampledCurve) -> None:
    write_rows(path, AIF_HEADER, ((j, t, c) for j, (t, c) in enumerate(zip(aif.times, aif.values))))


def read_aif(path: Path) -> SampledCurve:
    rows = read_rows(path, AIF_HEADER)
    times, values = [], []
    for expected, (line, (j, t, c)) in enumerate(rows):
        if _number(path, line, j, int) != expected:
            raise InputError(f"{path}:{line}: t_index out of sequence")
        times.append(_number(path, line, t))
        values.append(_number(path, line, c))
    if len(times) < 2:
        raise InputError(f"{path}: need at least two samples")
    try:
        return SampledCurve(np.array(times), np.array(values))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def write_curves(path: Path, voxel_ids, times, curves, header=CURVES_HEADER) -> None:
    def rows():
        for vid, curve in zip(voxel_ids, curves):
            for j, (t, c) in enumerate(zip(times, curve)):
                yield vid, j, t, c
    write_rows(path, header, rows())


def read_curves(path: Path, times=None, header=CURVES_HEADER) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(voxel_ids, times, curves)`` from the long format, voxels ascending."""
    rows = read_rows(path, header)
    by_voxel: dict[int, list] = {}
    for line, (vid, j, t, c) in rows:
        by_voxel.setdefault(_number(path, line, vid, int), []).append(
            (line, _number(path, line, j, int), _number(path, line, t), _number(path, line, c)))
    if not by_voxel:
        raise InputError(f"{path}: no samples")
    ids = np.array(sorted(by_voxel), dtype=int)
    first = by_voxel[int(ids[0])]
    ref_times = np.array([r[2] for r in first]) if times is None else np.asarray(times, float)
    curves = np.empty((ids.size, ref_times.size))
    for row, vid in enumerate(ids):
        samples = by_voxel[int(vid)]
        if len(samples) != ref_times.size:
            raise InputError(f"{path}:{samples[-1][0]}: voxel {vid} has {len(samples)} samples, "
                             f"expected {ref_times.size}")
        for expected, (line, j, t, c) in enumerate(samples):
            if j != expected:
                raise InputError(f"{path}:{line}: t_index out of sequence for voxel {vid}")
            if not math.isclose(t, ref_times[j], rel_tol=1e-7, abs_tol=1e-9):
                raise InputError(f"{path}:{line}: time does not match the shared grid")
            curves[row, j] = c
    return ids, ref_times, curves


# ---------------------------------------------------------------------------
# masks and maps


def write_mask(path: Path, mask: np.ndarray) -> None:
    width = mask.shape[1]
    write_rows(path, MASK_HEADER, ((v, *divmod(int(v), width)) for v in np.flatnonzero(mask.ravel())))


def read_mask(path: Path, shape=None) -> np.ndarray:
    rows = read_rows(path, MASK_HEADER)
    entries = [(line, _number(path, line, v, int), _number(path, line, r, int), _number(path, line, c, int))
               for line, (v, r, c) in rows]
    if not entries:
        raise InputError(f"{path}: empty mask")
    if shape is None:
        # voxel ids encode the grid width; fall back to the widest column seen
        width = next(((v - c) // r for _, v, r, c in entries if r > 0), max(e[3] for e in entries) + 1)
        shape = (max(e[2] for e in entries) + 1, width)
    mask = np.zeros(shape, dtype=bool)
    for line, v, r, c in entries:
        if not (0 <= r < shape[0] and 0 <= c < shape[1]) or v != r * shape[1] + c:
            raise InputError(f"{path}:{line}: voxel id {v} inconsistent with row {r}, col {c}")
        mask[r, c] = True
    return mask


@dataclass
class ParamMap:
    voxel_ids: np.ndarray
    params: np.ndarray  # (V, 5)
    statuses: list


def write_map(path: Path, voxel_ids, params, statuses, width: int) -> None:
    write_rows(path, MAP_HEADER, ((v, *divmod(int(v), width), *p, s)
                                  for v, p, s in zip(voxel_ids, params, statuses)))


def read_map(path: Path) -> ParamMap:
    rows = read_rows(path, MAP_HEADER)
    ids, params, statuses = [], [], []
    for line, fields in rows:
        ids.append(_number(path, line, fields[0], int))
        params.append([_number(path, line, x) for x in fields[3:8]])
        if fields[8] not in STATUSES:
            raise InputError(f"{path}:{line}: unknown status {fields[8]!r}")
        statuses.append(fields[8])
    return ParamMap(np.array(ids, dtype=int), np.array(params, dtype=float).reshape(-1, 5), statuses)


def write_voxel_table(path: Path, header, voxel_ids, values) -> None:
    write_rows(path, header, ((v, *row) for v, row in zip(voxel_ids, values)))


def write_chains(path: Path, voxel_ids, chains) -> None:
    def rows():
        for c, run in enumerate(chains):
            for step in range(run.theta.shape[0]):
                for i, vid in enumerate(voxel_ids):
                    yield (c, step, vid, *run.theta[step, i], run.sigma2[step, i], *run.alpha[step, i])
    write_rows(path, CHAIN_HEADER, rows())
