"""
Steady co-current plug-flow adsorber used to push posterior draws to process scale.

Solids and gas enter together at ``z = 0``. Per cell the loading ``x`` follows
``dx/dz = rhs(x, T, p) / v_solid``; the gas loses ``nv * (G_s / rho) * dx`` moles of
CO2 per unit area; the temperature carries the reaction heat and exchanges with a
coolant. The three are coupled inside each cell and solved by under-relaxed
fixed-point sweeps.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import _kernels as K
from .bss_anova import DiscrepancyModel
from .calibration import draw_indices, hpd_interval
from .dynamics import InputProfile, PhysicalConstants, RealityParams, SolverConfig, SorbentParams, _disc_arrays

log = logging.getLogger(__name__)

_STATUS_TEXT = {
    K.NO_BRACKET: "implicit step left the physical bounds",
    K.MAX_ITER: "Newton iteration limit",
    K.GAS_EXHAUSTED: "gas-phase CO2 exhausted",
    K.CELL_NOT_CONVERGED: "cell fixed point did not converge",
}


@dataclass(frozen=True)
class ReactorConfig:
    """Geometry, feeds and heat exchange of the stand-in adsorber.

    Attributes
    ----------
    length : float
        Bed length (m).
    n_cells : int
        Number of cells of the march (>= 10).
    v_solid, v_gas : float
        Solid and gas velocities (m/s). ``v_gas`` only sets the gas residence time.
    p_in : float
        Inlet CO2 mole fraction.
    gas_flux : float
        Inlet total molar gas flux (mol/m^2/s).
    solid_flux : float
        Sorbent mass flux (kg/m^2/s).
    T_in : float
        Solid/gas inlet temperature (K).
    hx, T_coolant : float
        Volumetric heat-exchange coefficient (W/m^3/K) and coolant temperature (K).
    heat_capacity : float
        Effective volumetric heat capacity of the moving bed (J/m^3/K).
    """

    length: float = 0.6
    n_cells: int = 200
    v_solid: float = 0.01
    v_gas: float = 1.0
    p_in: float = 0.12
    gas_flux: float = 0.5
    solid_flux: float = 8.0
    T_in: float = 330.0
    hx: float = 2000.0
    T_coolant: float = 330.0
    heat_capacity: float = 1.0e6
    x_in: float = 0.0
    cell_tol: float = 1e-8
    max_sweeps: int = 200
    relax: float = 0.5
    schema_version: int = 1

    def __post_init__(self):
        for name in ("length", "v_solid", "v_gas", "gas_flux", "solid_flux", "T_in", "hx", "T_coolant",
                     "heat_capacity", "cell_tol", "relax"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_cells < 10:
            raise ValueError("n_cells must be >= 10")
        if not 0 < self.p_in < 1:
            raise ValueError("p_in must lie in (0, 1)")
        if not 0 <= self.x_in < 0.5:
            raise ValueError("x_in must lie in [0, 0.5)")
        if self.max_sweeps < 1 or self.relax > 1:
            raise ValueError("max_sweeps >= 1 and relax <= 1 required")

    @property
    def dl(self) -> float:
        return self.length / self.n_cells

    def capture_flux(self, nv: float, consts: PhysicalConstants) -> float:
        """Moles of CO2 moved to the solid per unit area and time per unit of x."""
        return nv * self.solid_flux / consts.rho

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ReactorConfig":
        d = dict(d)
        version = d.pop("schema_version", 1)
        if version != 1:
            raise ValueError(f"unsupported reactor config schema_version {version}")
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown reactor config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ReactorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ReactorSolution:
    z: np.ndarray
    x: np.ndarray
    T: np.ndarray
    p: np.ndarray
    t: np.ndarray
    co2_flux: np.ndarray
    capture_fraction: float
    converged: bool
    n_clamped: int = 0
    failed_cell: int = -1
    message: str = ""
    z_state: np.ndarray | None = None


def _finish(cfg, x, T, p, fc, status, cell, clamps=0, z_state=None) -> ReactorSolution:
    grid = np.linspace(0.0, cfg.length, cfg.n_cells + 1)
    converged = status == K.OK
    if converged:
        capture = 1.0 - fc[-1] / fc[0]
        capture = min(max(capture, 0.0), 1.0)
        msg = ""
    else:
        for arr in (x, T, p, fc) + (() if z_state is None else (z_state,)):
            arr[cell + 1:] = np.nan
        capture = float("nan")
        msg = f"cell {cell}: {_STATUS_TEXT.get(status, 'solver failure')}"
    return ReactorSolution(grid, x, T, p, grid / cfg.v_solid, fc, float(capture), converged, int(clamps),
                           int(cell), msg, z_state)


def _feeds(cfg: ReactorConfig):
    fc_in = cfg.p_in * cfg.gas_flux
    return fc_in, cfg.gas_flux - fc_in


def simulate_reactor(
    params: SorbentParams,
    disc: DiscrepancyModel | None,
    cfg: ReactorConfig,
    consts: PhysicalConstants = PhysicalConstants(),
    solver_cfg: SolverConfig = SolverConfig(),
) -> ReactorSolution:
    """March the sorbent model (with its embedded discrepancy) through the bed.

    A cell that fails returns ``converged=False`` with profiles filled up to that
    cell and NaN beyond.
    """
    n1 = cfg.n_cells + 1
    x, T, p, fc = np.empty(n1), np.empty(n1), np.empty(n1), np.empty(n1)
    fc_in, f_inert = _feeds(cfg)
    beta, tvars, tcols, n_e, lo, hi, phi = _disc_arrays(disc)
    status, cell, clamps = K.march_sorbent_kernel(
        cfg.n_cells, cfg.dl, cfg.v_solid, cfg.capture_flux(params.nv, consts), f_inert, fc_in, cfg.T_in,
        cfg.x_in, cfg.heat_capacity * cfg.v_solid, cfg.hx, cfg.T_coolant,
        params.dH, params.dS, params.dHk, params.gamma, consts.R, consts.P,
        float(solver_cfg.newton_tol), int(solver_cfg.max_iter), cfg.cell_tol, int(cfg.max_sweeps), cfg.relax,
        beta, tvars, tcols, n_e, lo, hi, phi, x, T, p, fc,
    )
    return _finish(cfg, x, T, p, fc, status, cell, clamps)


def reality_reactor(
    params: RealityParams,
    cfg: ReactorConfig,
    consts: PhysicalConstants = PhysicalConstants(),
    solver_cfg: SolverConfig = SolverConfig(),
    z_in: float = 0.0,
    load_includes_z: bool = False,
) -> ReactorSolution:
    """The same bed with the two-reaction kinetics; both states are marched.

    Loading (gas uptake and the ``x`` profile) counts the carbamate state only,
    matching the weight measured in the small-scale experiments, unless
    ``load_includes_z`` is set.
    """
    n1 = cfg.n_cells + 1
    x, zs, T, p, fc = np.empty(n1), np.empty(n1), np.empty(n1), np.empty(n1), np.empty(n1)
    fc_in, f_inert = _feeds(cfg)
    status, cell = K.march_reality_kernel(
        cfg.n_cells, cfg.dl, cfg.v_solid, cfg.capture_flux(params.nv, consts), f_inert, fc_in, cfg.T_in,
        cfg.x_in, float(z_in), cfg.heat_capacity * cfg.v_solid, cfg.hx, cfg.T_coolant,
        params.as_array(), consts.R, consts.P, float(solver_cfg.newton_tol), int(solver_cfg.max_iter),
        cfg.cell_tol, int(cfg.max_sweeps), cfg.relax, bool(load_includes_z), x, zs, T, p, fc,
    )
    sol = _finish(cfg, x, T, p, fc, status, cell, 0, zs)
    if load_includes_z and sol.converged:
        sol = ReactorSolution(sol.z, x + zs, sol.T, sol.p, sol.t, sol.co2_flux, sol.capture_fraction, True,
                              0, -1, "", zs)
    return sol


def to_time_coordinate(sol: ReactorSolution, cfg: ReactorConfig, x0: float | None = None) -> InputProfile:
    """Conditions seen by a sorbent particle, ``t = z / v_solid``, as an input profile."""
    if not sol.converged:
        raise ValueError("time conversion needs a converged solution")
    x_start = sol.x[0] if x0 is None else x0
    return InputProfile(sol.z / cfg.v_solid, sol.T, np.clip(sol.p, 0.0, 1.0), float(x_start))


def flux_audit(sol: ReactorSolution, cfg: ReactorConfig, nv: float,
               consts: PhysicalConstants = PhysicalConstants()) -> float:
    """Relative mismatch between CO2 lost by the gas and CO2 gained by the solid."""
    fc_in, f_inert = _feeds(cfg)
    # gas side from the mole-fraction profile, solid side from the loading profile
    gas_out = f_inert * sol.p[-1] / (1.0 - sol.p[-1])
    removed = fc_in - gas_out
    gained = cfg.capture_flux(nv, consts) * float(np.sum(np.diff(sol.x)))
    return abs(removed - gained) / fc_in


# ---------------------------------------------------------------------------
# posterior propagation
# ---------------------------------------------------------------------------


class PosteriorDraws(Protocol):
    n_samples: int

    def params_at(self, i: int) -> SorbentParams: ...

    def disc_at(self, i: int) -> DiscrepancyModel | None: ...


@dataclass
class Propagation:
    draw_indices: np.ndarray
    capture: np.ndarray
    ok: np.ndarray
    n_failed: int
    clamps: np.ndarray
    z: np.ndarray
    t: np.ndarray
    T_bands: np.ndarray
    p_bands: np.ndarray
    summary: dict = field(default_factory=dict)
    solutions: list = field(default_factory=list, repr=False)

    def band_rows(self):
        """Rows ``(z, t, T_lo, T_med, T_hi, p_lo, p_med, p_hi)`` for the condition-band table."""
        return np.column_stack([self.z, self.t, self.T_bands.T, self.p_bands.T])


def _summary(capture: np.ndarray, n_failed: int) -> dict:
    out = {"n_ok": int(capture.size), "n_failed": int(n_failed)}
    if capture.size:
        out["mean"] = float(np.mean(capture))
        out["q025"], out["q975"] = (float(v) for v in np.percentile(capture, [2.5, 97.5]))
        if capture.size >= 100:
            out["hpd_lo"], out["hpd_hi"] = (float(v) for v in hpd_interval(capture, 0.95))
        else:
            out["hpd_lo"] = out["hpd_hi"] = None
    return out


def propagate(
    chain: PosteriorDraws,
    n_samples: int,
    cfg: ReactorConfig,
    consts: PhysicalConstants = PhysicalConstants(),
    seed: int = 0,
    workers: int = 1,
    zero_beta: bool = False,
    solver_cfg: SolverConfig = SolverConfig(),
    keep_solutions: bool = False,
) -> Propagation:
    """Run the reactor for ``n_samples`` posterior draws.

    Failed draws are dropped and counted; the band arrays hold pointwise 2.5, 50 and
    97.5 percentiles over converged draws. ``zero_beta`` runs the parameter-only model.

    Raises
    ------
    RuntimeError
        If every draw fails.
    """
    idx = draw_indices(chain.n_samples, n_samples, seed)

    def run(i):
        disc = None if zero_beta else chain.disc_at(int(i))
        return simulate_reactor(chain.params_at(int(i)), disc, cfg, consts, solver_cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sols = list(pool.map(run, idx))
    else:
        sols = [run(i) for i in idx]
    ok = np.array([s.converged for s in sols], dtype=bool)
    n_failed = int(np.sum(~ok))
    for i, s in zip(idx, sols):
        if not s.converged:
            log.warning("draw %d failed: %s", i, s.message)
    if not ok.any():
        raise RuntimeError(f"all {len(sols)} reactor draws failed")
    if n_failed:
        log.info("%d of %d reactor draws failed", n_failed, len(sols))
    good = [s for s in sols if s.converged]
    capture = np.array([s.capture_fraction for s in good])
    T_all = np.stack([s.T for s in good])
    p_all = np.stack([s.p for s in good])
    q = [2.5, 50.0, 97.5]
    return Propagation(
        draw_indices=idx,
        capture=capture,
        ok=ok,
        n_failed=n_failed,
        clamps=np.array([s.n_clamped for s in sols], dtype=np.int64),
        z=good[0].z,
        t=good[0].t,
        T_bands=np.percentile(T_all, q, axis=0),
        p_bands=np.percentile(p_all, q, axis=0),
        summary=_summary(capture, n_failed),
        solutions=sols if keep_solutions else [],
    )
