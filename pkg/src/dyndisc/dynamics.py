"""
Sorbent kinetics with embedded multiplicative discrepancy, and the two-reaction
"reality" model used to generate synthetic data.

Both models are integrated with a fixed-substep Crank-Nicolson scheme whose
implicit stage is solved by Newton's method (scalar for the sorbent model, 2x2
for the reality model). Time is in seconds, energies in J/mol, ``p`` is the CO2
mole fraction and ``P`` the total pressure in Pa, so ``p * P`` is the CO2
partial pressure entering the rate laws.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import _kernels as K
from .bss_anova import DiscrepancyModel, eval_discrepancy

#: Two-reaction truth parameters [dH_x, dS_x, dHk_x, gamma_x, n_v, dH_z, dS_z, dHk_z, gamma_z].
THETA_STAR = (-88671.0, -67.056, 35148.0, 141.22, 2000.0, -32055.0, -87.0, 53594.0, 25657.0)


class SolverFailure(RuntimeError):
    """Raised when the implicit stage cannot be solved inside the physical bounds."""

    def __init__(self, message: str, index: int, status: int = K.NO_BRACKET):
        super().__init__(f"{message} (time index {index}, status {status})")
        self.index = index
        self.status = status


@dataclass(frozen=True)
class SorbentParams:
    """Calibrated chemistry parameters of the single-reaction sorbent model."""

    dH: float
    dS: float
    dHk: float
    gamma: float
    nv: float

    names = ("dH", "dS", "dHk", "gamma", "nv")

    def __post_init__(self):
        if not self.nv >= 0:
            raise ValueError("nv must be non-negative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a) -> "SorbentParams":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class RealityParams:
    dH_x: float
    dS_x: float
    dHk_x: float
    gamma_x: float
    nv: float
    dH_z: float
    dS_z: float
    dHk_z: float
    gamma_z: float

    def __post_init__(self):
        if not (self.nv >= 0 and self.gamma_x > 0 and self.gamma_z > 0):
            raise ValueError("nv must be non-negative, gamma_x and gamma_z positive")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a) -> "RealityParams":
        return cls(*(float(v) for v in a))

    @classmethod
    def default(cls) -> "RealityParams":
        return cls(*THETA_STAR)


@dataclass(frozen=True)
class PhysicalConstants:
    R: float = 8.314
    M: float = 0.04401
    rho: float = 1000.0
    P: float = 101325.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")

    def weight_factor(self, nv: float) -> float:
        """Weight gain per unit of chemical state: ``M * nv / rho``."""
        return self.M * nv / self.rho


@dataclass(frozen=True)
class InputProfile:
    """Functional inputs (temperature, CO2 mole fraction) over a time grid."""

    t: np.ndarray
    T: np.ndarray
    p: np.ndarray
    x0: float = 0.0

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=float)
        T = np.ascontiguousarray(self.T, dtype=float)
        p = np.ascontiguousarray(self.p, dtype=float)
        if not (t.ndim == T.ndim == p.ndim == 1) or not (t.size == T.size == p.size):
            raise ValueError("t, T and p must be 1-D arrays of equal length")
        if t.size < 2:
            raise ValueError("profile needs at least two nodes")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if np.any(T <= 0):
            raise ValueError("temperatures must be positive")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("p must be a mole fraction in [0, 1]")
        if not 0.0 <= self.x0 < 0.5:
            raise ValueError("x0 must lie in [0, 0.5)")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "x0", float(self.x0))

    def __len__(self):
        return self.t.size

    def window(self, i0: int, i1: int) -> "InputProfile":
        return InputProfile(self.t[i0:i1], self.T[i0:i1], self.p[i0:i1], self.x0)


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-12
    max_iter: int = 50
    substeps: int = 4


#: Truth-model default: the zwitterion step relaxes at O(100) 1/s, so Crank-Nicolson
#: needs sub-second steps to stay non-oscillatory and inside the physical bounds.
REALITY_SOLVER = SolverConfig(substeps=256)


@dataclass(frozen=True)
class SorbentSolution:
    t: np.ndarray
    x: np.ndarray
    w: np.ndarray
    n_clamped: int = 0


@dataclass(frozen=True)
class RealitySolution:
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray


# ---------------------------------------------------------------------------
# closed-form pieces
# ---------------------------------------------------------------------------


def equilibrium_constant(params: SorbentParams, T: float, consts: PhysicalConstants = PhysicalConstants()) -> float:
    """van 't Hoff equilibrium constant ``exp(dS/R) exp(-dH/(R T)) / P``."""
    R = consts.R
    return math.exp(params.dS / R) * math.exp(-params.dH / (R * T)) / consts.P


def rate_constant(params: SorbentParams, T: float, consts: PhysicalConstants = PhysicalConstants()) -> float:
    """Arrhenius-type rate constant ``gamma T exp(-dHk/(R T))``."""
    return params.gamma * T * math.exp(-params.dHk / (consts.R * T))


def _eq_root(kp: float) -> float:
    if kp <= 0.0:
        return 0.0
    if math.isinf(kp):
        return 0.5
    r = math.sqrt(kp)
    return r / (1.0 + 2.0 * r)


def equilibrium_state(params: SorbentParams, p: float, T: float, consts: PhysicalConstants = PhysicalConstants()) -> float:
    """Root in [0, 0.5) of ``(1 - 2x)^2 p P - x^2 / kappa``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    return _eq_root(equilibrium_constant(params, T, consts) * p * consts.P)


def _disc_arrays(disc: DiscrepancyModel | None):
    if disc is None:
        return (
            np.zeros(0),
            np.zeros((0, 3), dtype=np.int64),
            np.zeros((0, 3), dtype=np.int64),
            0,
            np.array([0.0, 0.0, 310.0]),
            np.array([0.5, 1.0, 380.0]),
            np.zeros((2, 1)),
        )
    tab = disc.table
    return disc.beta, tab.vars, tab.cols, tab.n_e, tab.lo, tab.hi, disc.basis.phi


def _rate_and_slope(x, T, p, params, disc, consts):
    beta, tvars, tcols, n_e, lo, hi, phi = _disc_arrays(disc)
    L = phi.shape[1]
    rowp, rowT, cx = np.empty(L), np.empty(L), np.empty(L)
    d_e, c_k, has_x, _ = K.disc_prep(float(p), float(T), beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx)
    return K.sorbent_rate(
        float(x), rate_constant(params, T, consts), equilibrium_constant(params, T, consts),
        float(p) * consts.P, d_e, c_k, has_x, cx, phi, lo[0], hi[0],
    )


def rhs(x, T, p, params: SorbentParams, disc: DiscrepancyModel | None = None, consts: PhysicalConstants = PhysicalConstants()):
    """Sorbent rate ``k e^{dK} [(1-2x)^2 p P - x^2 / (kappa e^{dE})]``."""
    if not 0.0 <= x <= 0.5:
        raise ValueError("x must be in [0, 0.5]")
    return _rate_and_slope(x, T, p, params, disc, consts)[0]


def rhs_dx(x, T, p, params: SorbentParams, disc: DiscrepancyModel | None = None, consts: PhysicalConstants = PhysicalConstants()):
    """Analytic derivative of :func:`rhs` with respect to ``x``."""
    if not 0.0 <= x <= 0.5:
        raise ValueError("x must be in [0, 0.5]")
    return _rate_and_slope(x, T, p, params, disc, consts)[1]


def discrepant_equilibrium_state(T, p, params, disc, consts=PhysicalConstants()) -> float:
    """Equilibrium state with the equilibrium constant multiplied by ``exp(delta_E)``."""
    kap = equilibrium_constant(params, T, consts)
    if disc is not None and any(s.target == "E" for s in disc.specs):
        kap *= math.exp(eval_discrepancy(disc, "E", {"p": p, "T": T}))
    return _eq_root(kap * p * consts.P)


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------


def solve_sorbent(
    params: SorbentParams,
    disc: DiscrepancyModel | None,
    profile: InputProfile,
    consts: PhysicalConstants = PhysicalConstants(),
    solver_cfg: SolverConfig = SolverConfig(),
) -> SorbentSolution:
    """Integrate the sorbent model over ``profile``.

    An interval whose implicit stage has no root in [0, 0.5] (fast desorption
    with a coarse step) is repeated with doubled substeps, up to 64 times the
    configured count. Intervals that solve at the configured count are not
    affected.

    Raises
    ------
    SolverFailure
        If refinement is exhausted or Newton does not converge.
    """
    x = np.empty(len(profile))
    beta, tvars, tcols, n_e, lo, hi, phi = _disc_arrays(disc)
    status, idx, clamps = K.solve_sorbent_kernel(
        profile.t, profile.T, profile.p, profile.x0,
        params.dH, params.dS, params.dHk, params.gamma, consts.R, consts.P,
        int(solver_cfg.substeps), float(solver_cfg.newton_tol), int(solver_cfg.max_iter),
        beta, tvars, tcols, n_e, lo, hi, phi, x,
    )
    if status != K.OK:
        raise SolverFailure("sorbent solve failed", int(idx), int(status))
    return SorbentSolution(profile.t, x, consts.weight_factor(params.nv) * x, int(clamps))


def solve_reality(
    params: RealityParams,
    profile: InputProfile,
    consts: PhysicalConstants = PhysicalConstants(),
    solver_cfg: SolverConfig = REALITY_SOLVER,
    z0: float = 0.0,
    weight_includes_z: bool = False,
) -> RealitySolution:
    """Integrate the two-reaction truth model; weight is ``M nv x / rho``.

    With ``weight_includes_z`` the weight uses ``x + z`` instead.
    """
    n = len(profile)
    x = np.empty(n)
    z = np.empty(n)
    status, idx = K.solve_reality_kernel(
        profile.t, profile.T, profile.p, profile.x0, float(z0), params.as_array(),
        consts.R, consts.P, int(solver_cfg.substeps), float(solver_cfg.newton_tol),
        int(solver_cfg.max_iter), x, z,
    )
    if status != K.OK:
        raise SolverFailure("reality solve failed", int(idx), int(status))
    load = x + z if weight_includes_z else x
    return RealitySolution(profile.t, x, z, consts.weight_factor(params.nv) * load)


def reality_rhs(x, z, T, p, params: RealityParams, consts: PhysicalConstants = PhysicalConstants()):
    """Right-hand side ``(dx/dt, dz/dt)`` of the reality model."""
    th = params.as_array()
    kx, kz, kapx, kapz = K.reality_coeffs(T, consts.P, consts.R, *th[:4], *th[5:])
    fx, fz, _, _ = K.reality_rates(x, z, kx, kz, kapx, kapz, p * consts.P)
    return fx, fz


def reality_equilibrium(T, p, params: RealityParams, consts: PhysicalConstants = PhysicalConstants()):
    """Closed-form simultaneous root of both reality brackets.

    From ``z = kappa_z s p P`` and ``x^2 = kappa_x s z`` with ``s = 1 - 2x - z``.
    """
    th = params.as_array()
    _, _, kapx, kapz = K.reality_coeffs(T, consts.P, consts.R, *th[:4], *th[5:])
    a = kapz * p * consts.P
    c = math.sqrt(kapx * a)
    # x = c s, z = a s, s = 1 - 2 c s - a s
    s = 1.0 / (1.0 + 2.0 * c + a)
    return c * s, a * s
