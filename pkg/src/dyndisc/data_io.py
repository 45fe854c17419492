"""
Synthetic experiment generation, TGA-style CSV ingestion and snippet windowing.

Series files are CSV with the columns ``time_s, temp_K, pco2_frac, weight_frac``
(extra columns are carried along, e.g. ``weight_true`` for the noiseless truth).
Lines starting with ``#`` hold ``key: value`` metadata.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import (
    REALITY_SOLVER,
    InputProfile,
    PhysicalConstants,
    RealityParams,
    SolverConfig,
    SolverFailure,
    solve_reality,
)

REQUIRED_COLUMNS = ("time_s", "temp_K", "pco2_frac", "weight_frac")

#: CO2 mole fractions of the five synthetic experiments.
DEFAULT_P_LEVELS = (0.01, 0.04, 0.075, 0.10, 0.20)


class TGAFormatError(ValueError):
    """Malformed measurement file; the message names the offending line."""


@dataclass(frozen=True)
class ExperimentSeries:
    profile: InputProfile
    w_obs: np.ndarray
    label: str = ""
    w_true: np.ndarray | None = None

    def __post_init__(self):
        w = np.ascontiguousarray(self.w_obs, dtype=float)
        if w.shape != (len(self.profile),):
            raise ValueError("w_obs length must match the profile")
        if not np.all(np.isfinite(w)):
            raise ValueError("w_obs must be finite")
        object.__setattr__(self, "w_obs", w)
        if self.w_true is not None:
            object.__setattr__(self, "w_true", np.ascontiguousarray(self.w_true, dtype=float))

    def __len__(self):
        return self.w_obs.size


@dataclass(frozen=True)
class ProfileSpec:
    """Shape of one synthetic input profile: a t=0 spike, then a linear temperature ramp."""

    p_level: float
    duration: float = 60.0
    n_points: int = 61
    T_start: float = 380.0
    T_end: float = 320.0
    T_spike: float = 390.0
    p_spike: float | None = None

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if not (0 < self.T_end < self.T_start <= self.T_spike):
            raise ValueError("temperatures must satisfy 0 < T_end < T_start <= T_spike")
        if not 0 <= self.p_level <= 1:
            raise ValueError("p_level must be a mole fraction")

    def build(self) -> InputProfile:
        t = np.linspace(0.0, self.duration, self.n_points)
        T = np.empty(self.n_points)
        T[0] = self.T_spike
        T[1:] = np.linspace(self.T_start, self.T_end, self.n_points - 1)
        p_spike = self.p_level + 0.02 if self.p_spike is None else self.p_spike
        p = np.full(self.n_points, float(self.p_level))
        p[0] = min(p_spike, 1.0)
        return InputProfile(t, T, p)


def gen_profiles(spec_defaults: dict | None = None) -> list[InputProfile]:
    """The five synthetic input profiles (61 nodes over 60 s each by default).

    ``spec_defaults`` may override any :class:`ProfileSpec` field and supply
    ``p_levels``.
    """
    opts = dict(spec_defaults or {})
    levels = opts.pop("p_levels", DEFAULT_P_LEVELS)
    offset = opts.pop("p_spike_offset", 0.02)
    return [ProfileSpec(p_level=float(pl), p_spike=float(pl) + offset, **opts).build() for pl in levels]


def gen_synthetic(
    reality: RealityParams,
    profiles: Sequence[InputProfile],
    noise_sd: float = 1e-4,
    seed: int = 0,
    consts: PhysicalConstants = PhysicalConstants(),
    solver_cfg: SolverConfig = REALITY_SOLVER,
    weight_includes_z: bool = False,
) -> list[ExperimentSeries]:
    """Reality-model weights plus iid Gaussian observation noise."""
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for prof in profiles:
        try:
            sol = solve_reality(reality, prof, consts, solver_cfg, weight_includes_z=weight_includes_z)
        except SolverFailure as exc:
            raise ValueError(f"truth configuration does not solve: {exc}") from exc
        noise = rng.normal(0.0, noise_sd, size=len(prof)) if noise_sd > 0 else np.zeros(len(prof))
        label = f"p={_fmt_level(prof.p[-1])}"
        out.append(ExperimentSeries(prof, sol.w + noise, label, sol.w))
    return out


def _fmt_level(p: float) -> str:
    return f"{p:.6g}"


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def write_series(series: ExperimentSeries, path) -> None:
    prof = series.profile
    buf = io.StringIO()
    buf.write(f"# label: {series.label}\n")
    buf.write(f"# x0: {prof.x0!r}\n")
    cols = list(REQUIRED_COLUMNS) + (["weight_true"] if series.w_true is not None else [])
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for i in range(len(series)):
        row = [prof.t[i], prof.T[i], prof.p[i], series.w_obs[i]]
        if series.w_true is not None:
            row.append(series.w_true[i])
        writer.writerow([repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


@dataclass
class TGASeries:
    """Raw measurement columns plus metadata read from a series file."""

    t: np.ndarray
    T: np.ndarray
    p: np.ndarray
    w: np.ndarray
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size


def read_tga(path, format_cfg: dict | None = None) -> TGASeries:
    """Parse and validate a headered measurement CSV.

    Parameters
    ----------
    path : path-like
    format_cfg : dict, optional
        ``{"columns": {"time_s": "<name in file>", ...}}`` to map differently named
        columns onto the required ones.

    Raises
    ------
    TGAFormatError
        Missing columns, malformed rows, non-increasing time or out-of-range values,
        with the 1-based line number.
    """
    rename = dict((format_cfg or {}).get("columns", {}))
    meta: dict = {}
    rows: list[list[float]] = []
    header = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
                continue
            if not line.strip():
                continue
            fields_ = next(csv.reader([line]))
            if header is None:
                header = [h.strip() for h in fields_]
                idx = {}
                for col in REQUIRED_COLUMNS:
                    name = rename.get(col, col)
                    if name not in header:
                        raise TGAFormatError(f"line {lineno}: missing column {name!r}")
                    idx[col] = header.index(name)
                extra_cols = [h for h in header if h not in {rename.get(c, c) for c in REQUIRED_COLUMNS}]
                order = [idx[c] for c in REQUIRED_COLUMNS] + [header.index(h) for h in extra_cols]
                continue
            if len(fields_) != len(header):
                raise TGAFormatError(f"line {lineno}: expected {len(header)} fields, got {len(fields_)}")
            try:
                vals = [float(fields_[j]) for j in order]
            except ValueError as exc:
                raise TGAFormatError(f"line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise TGAFormatError(f"line {lineno}: non-finite value")
            t, T, p = vals[0], vals[1], vals[2]
            if rows and t <= rows[-1][0]:
                raise TGAFormatError(f"line {lineno}: time not increasing ({t!r} after {rows[-1][0]!r})")
            if T <= 0:
                raise TGAFormatError(f"line {lineno}: temperature must be positive")
            if not 0.0 <= p <= 1.0:
                raise TGAFormatError(f"line {lineno}: pco2_frac {p!r} outside [0, 1]")
            rows.append(vals)
    if header is None:
        raise TGAFormatError(f"{path}: no header line")
    if len(rows) < 2:
        raise TGAFormatError(f"{path}: need at least two data rows")
    arr = np.array(rows, dtype=float)
    extra = {name: arr[:, 4 + k].copy() for k, name in enumerate(extra_cols)}
    return TGASeries(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy(), meta, extra)


def read_series(path) -> ExperimentSeries:
    raw = read_tga(path)
    x0 = float(raw.meta.get("x0", 0.0))
    prof = InputProfile(raw.t, raw.T, raw.p, x0)
    return ExperimentSeries(prof, raw.w, raw.meta.get("label", Path(path).stem), raw.extra.get("weight_true"))


def select_snippet(
    series: TGASeries,
    t_lo: float,
    t_hi: float,
    max_points: int | None = None,
    consts: PhysicalConstants = PhysicalConstants(),
    nv_median: float = 1469.0,
    label: str = "",
) -> ExperimentSeries:
    """Window a long measurement, optionally subsample, and re-origin time at 0.

    The initial chemical state is estimated from the first weight value as
    ``w0 * rho / (M * nv_median)`` clamped to [0, 0.49].
    """
    if not t_lo < t_hi:
        raise ValueError("t_lo must be < t_hi")
    mask = (series.t >= t_lo) & (series.t <= t_hi)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError(f"empty snippet window [{t_lo}, {t_hi}]")
    if max_points is not None and idx.size > max_points:
        stride = math.ceil(idx.size / max_points)
        idx = idx[::stride]
    if idx.size < 2:
        raise ValueError("snippet must contain at least two points")
    t = series.t[idx]
    w = series.w[idx]
    x0 = w[0] * consts.rho / (consts.M * nv_median)
    x0 = min(max(x0, 0.0), 0.49)
    prof = InputProfile(t - t[0], series.T[idx], series.p[idx], x0)
    return ExperimentSeries(prof, w, label or f"snippet[{t_lo:g},{t_hi:g}]")


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------


def write_dataset(out_dir, series: Sequence[ExperimentSeries], truth: RealityParams | None = None,
                  seed: int | None = None, noise_sd: float | None = None, extra: dict | None = None) -> Path:
    """Write one CSV per series plus ``dataset.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, s in enumerate(series):
        name = f"series_{k:02d}.csv"
        write_series(s, out / name)
        files.append({"file": name, "label": s.label, "n_points": len(s)})
    manifest = {
        "schema_version": 1,
        "series": files,
        "n_total": int(sum(len(s) for s in series)),
        "truth_theta": None if truth is None else truth.as_array().tolist(),
        "seed": seed,
        "noise_sd": noise_sd,
    }
    if extra:
        manifest.update(extra)
    path = out / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(data_dir) -> tuple[list[ExperimentSeries], dict]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "dataset.json").read_text())
    series = [read_series(data_dir / entry["file"]) for entry in manifest["series"]]
    return series, manifest
