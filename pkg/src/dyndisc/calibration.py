"""
Metropolis-within-Gibbs calibration of the sorbent model and its discrepancy.

State: chemistry parameters ``theta = (dH, dS, dHk, gamma, nv)``, discrepancy
coefficients ``beta`` (one block per BSS-ANOVA component), component variances
``tau2`` and the observation variance ``sigma2``. Each sweep updates the random-walk
blocks ``(dH, dS)``, ``(dHk, gamma)``, ``nv`` and every ``beta_j`` by Metropolis, then
draws each ``tau2_j`` and ``sigma2`` from their inverse-gamma full conditionals
(shape/scale parameterization).
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .bss_anova import ComponentSpec, DiscrepancyModel, KLBasis
from .data_io import ExperimentSeries
from .dynamics import PhysicalConstants, SolverConfig, SolverFailure, SorbentParams, solve_sorbent

log = logging.getLogger(__name__)

THETA_NAMES = SorbentParams.names


class McmcAbort(RuntimeError):
    """Too many solver failures: the chain is stuck in a region the model cannot solve."""


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def _norm_logpdf(x, mean, var):
    return -0.5 * math.log(2.0 * math.pi * var) - 0.5 * (x - mean) ** 2 / var


def invgamma_logpdf(x, shape, scale):
    """Inverse-gamma log density with shape/scale parameterization (vectorized)."""
    x = np.asarray(x, dtype=float)
    return shape * math.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x


@dataclass(frozen=True)
class PriorSpec:
    """Priors on ``theta``, ``tau2`` and ``sigma2``.

    Normal priors are given by mean and variance; ``dS`` is truncated above at
    ``dS_upper`` and ``nv`` to ``nv_bounds``. Variances are in J/mol units squared.
    """

    dH_mean: float = -60840.0
    dH_var: float = 125.0e6
    dS_mean: float = -250.0
    dS_var: float = 625.0
    dS_upper: float = -200.0
    nv_mean: float = 1469.0
    nv_var: float = 86362.0
    nv_bounds: tuple[float, float] = (1000.0, 2351.0)
    dHk_bounds: tuple[float, float] = (50000.0, 150000.0)
    gamma_bounds: tuple[float, float] = (0.0, 5.0)
    tau2_shape: float = 0.5
    tau2_scale: float = 30.0
    sigma2_shape: float = 1.0
    sigma2_scale: float = 1e-8
    schema_version: int = 1

    def __post_init__(self):
        for name in ("dH_var", "dS_var", "nv_var", "tau2_shape", "tau2_scale", "sigma2_shape", "sigma2_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("nv_bounds", "dHk_bounds", "gamma_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be ordered (lo < hi)")
            object.__setattr__(self, name, (float(lo), float(hi)))

    # truncated-normal pieces -------------------------------------------------

    def _dS_trunc(self):
        sd = math.sqrt(self.dS_var)
        return stats.truncnorm(-np.inf, (self.dS_upper - self.dS_mean) / sd, loc=self.dS_mean, scale=sd)

    def _nv_trunc(self):
        sd = math.sqrt(self.nv_var)
        lo, hi = self.nv_bounds
        return stats.truncnorm((lo - self.nv_mean) / sd, (hi - self.nv_mean) / sd, loc=self.nv_mean, scale=sd)

    @cached_property
    def _log_norm_consts(self):
        # log of the retained normal mass for the truncated priors
        sd_s = math.sqrt(self.dS_var)
        sd_n = math.sqrt(self.nv_var)
        lo, hi = self.nv_bounds
        c_s = stats.norm.logcdf((self.dS_upper - self.dS_mean) / sd_s)
        c_n = math.log(stats.norm.cdf((hi - self.nv_mean) / sd_n) - stats.norm.cdf((lo - self.nv_mean) / sd_n))
        return float(c_s), c_n

    def log_prior_theta(self, theta) -> float:
        dH, dS, dHk, gamma, nv = (float(v) for v in theta)
        if dS > self.dS_upper:
            return -math.inf
        if not self.nv_bounds[0] <= nv <= self.nv_bounds[1]:
            return -math.inf
        lo_k, hi_k = self.dHk_bounds
        lo_g, hi_g = self.gamma_bounds
        if not (lo_k <= dHk <= hi_k) or not (lo_g < gamma <= hi_g):
            return -math.inf
        c_s, c_n = self._log_norm_consts
        return (
            _norm_logpdf(dH, self.dH_mean, self.dH_var)
            + _norm_logpdf(dS, self.dS_mean, self.dS_var) - c_s
            + _norm_logpdf(nv, self.nv_mean, self.nv_var) - c_n
            - math.log(hi_k - lo_k)
            - math.log(hi_g - lo_g)
        )

    def medians(self) -> np.ndarray:
        """Prior medians of ``theta`` in ``THETA_NAMES`` order."""
        return np.array([
            self.dH_mean,
            float(self._dS_trunc().median()),
            0.5 * sum(self.dHk_bounds),
            0.5 * sum(self.gamma_bounds),
            float(self._nv_trunc().median()),
        ])

    def tau2_median(self) -> float:
        return float(stats.invgamma.median(self.tau2_shape, scale=self.tau2_scale))

    def sigma2_median(self) -> float:
        return float(stats.invgamma.median(self.sigma2_shape, scale=self.sigma2_scale))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        d = dict(d)
        if d.get("schema_version", 1) != 1:
            raise ValueError(f"unsupported prior schema_version {d['schema_version']}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown prior keys: {sorted(unknown)}")
        for key in ("nv_bounds", "dHk_bounds", "gamma_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def log_prior(params: SorbentParams, disc: DiscrepancyModel | None, sigma2: float, prior: PriorSpec) -> float:
    """Sum of prior log densities of ``theta``, ``beta | tau2``, ``tau2`` and ``sigma2``."""
    if not sigma2 > 0:
        return -math.inf
    lp = prior.log_prior_theta(params.as_array())
    if lp == -math.inf:
        return lp
    lp += float(invgamma_logpdf(sigma2, prior.sigma2_shape, prior.sigma2_scale))
    if disc is not None:
        lp += _beta_tau_logprior(disc.beta, disc.tau2, disc.slices(), prior)
    return lp


def _beta_tau_logprior(beta, tau2, slices, prior) -> float:
    lp = 0.0
    for j, sl in enumerate(slices):
        b = beta[sl]
        lp += -0.5 * b.size * math.log(2.0 * math.pi * tau2[j]) - 0.5 * float(b @ b) / tau2[j]
    if len(slices):
        lp += float(np.sum(invgamma_logpdf(tau2, prior.tau2_shape, prior.tau2_scale)))
    return lp


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


def _map(fn, items, executor: Executor | None):
    # results come back in submission order, so reductions are deterministic
    if executor is None:
        return [fn(it) for it in items]
    return list(executor.map(fn, items))


def residual_ss(
    data: Sequence[ExperimentSeries],
    params: SorbentParams,
    disc: DiscrepancyModel | None,
    consts: PhysicalConstants = PhysicalConstants(),
    solver_cfg: SolverConfig = SolverConfig(),
    executor: Executor | None = None,
) -> float:
    """Residual sum of squares over all series. Raises :class:`SolverFailure`."""

    def one(s):
        r = s.w_obs - solve_sorbent(params, disc, s.profile, consts, solver_cfg).w
        return float(r @ r)

    return float(sum(_map(one, data, executor)))


def gaussian_loglik(ss: float, n: int, sigma2: float) -> float:
    return -0.5 * n * math.log(2.0 * math.pi * sigma2) - 0.5 * ss / sigma2


def log_likelihood(
    data: Sequence[ExperimentSeries],
    params: SorbentParams,
    disc: DiscrepancyModel | None,
    sigma2: float,
    consts: PhysicalConstants = PhysicalConstants(),
    solver_cfg: SolverConfig = SolverConfig(),
    executor: Executor | None = None,
) -> float:
    """Gaussian log likelihood of the observed weights; ``-inf`` if any solve fails."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    try:
        ss = residual_ss(data, params, disc, consts, solver_cfg, executor)
    except SolverFailure:
        return -math.inf
    return gaussian_loglik(ss, sum(len(s) for s in data), sigma2)


def log_posterior(data, params, disc, sigma2, prior, consts=PhysicalConstants(), solver_cfg=SolverConfig()) -> float:
    lp = log_prior(params, disc, sigma2, prior)
    if lp == -math.inf:
        return lp
    return lp + log_likelihood(data, params, disc, sigma2, consts, solver_cfg)


# ---------------------------------------------------------------------------
# Gibbs steps
# ---------------------------------------------------------------------------


def tau2_conditional(beta_j, prior: PriorSpec) -> tuple[float, float]:
    """Inverse-gamma (shape, scale) of ``tau2_j | beta_j``."""
    b = np.asarray(beta_j, dtype=float)
    return prior.tau2_shape + 0.5 * b.size, prior.tau2_scale + 0.5 * float(b @ b)


def sigma2_conditional(ss: float, n: int, prior: PriorSpec) -> tuple[float, float]:
    """Inverse-gamma (shape, scale) of ``sigma2 | residuals``."""
    if ss < 0:
        raise ValueError("residual sum of squares must be >= 0")
    return prior.sigma2_shape + 0.5 * n, prior.sigma2_scale + 0.5 * ss


def _draw_invgamma(shape, scale, rng):
    return scale / rng.gamma(shape)


def gibbs_update_tau2(beta_j, prior: PriorSpec, rng: np.random.Generator) -> float:
    return _draw_invgamma(*tau2_conditional(beta_j, prior), rng)


def gibbs_update_sigma2(ss: float, n: int, prior: PriorSpec, rng: np.random.Generator) -> float:
    return _draw_invgamma(*sigma2_conditional(ss, n, prior), rng)


# ---------------------------------------------------------------------------
# Metropolis blocks
# ---------------------------------------------------------------------------


@dataclass
class Block:
    """A random-walk block over ``indices`` of the state vector.

    Proposals are ``v + exp(log_scale) * chol @ z``; ``log_scale`` is adapted during
    burn-in only.
    """

    name: str
    indices: np.ndarray
    chol: np.ndarray
    log_scale: float = 0.0
    n_prop: int = 0
    n_acc: int = 0
    n_fail: int = 0

    @classmethod
    def make(cls, name, indices, scales, rho: float = 0.0) -> "Block":
        scales = np.atleast_1d(np.asarray(scales, dtype=float))
        if np.any(scales <= 0):
            raise ValueError("proposal scales must be positive")
        if not abs(rho) < 1:
            raise ValueError("|rho| must be < 1")
        d = scales.size
        corr = np.full((d, d), rho)
        np.fill_diagonal(corr, 1.0)
        chol = np.linalg.cholesky(corr * np.outer(scales, scales))
        return cls(name, np.asarray(indices, dtype=np.int64), chol)

    @property
    def acceptance_rate(self) -> float:
        return self.n_acc / self.n_prop if self.n_prop else float("nan")


#: ``log_target(v) -> (log density, auxiliary, failed)``
LogTarget = Callable[[np.ndarray], tuple]


def mh_block_update(v, logp, aux, block: Block, log_target: LogTarget, rng: np.random.Generator,
                    adapt_gain: float = 0.0, target_rate: float = 0.3):
    """One symmetric random-walk Metropolis step on ``block``.

    Returns ``(v, logp, aux, accepted)``. On rejection (including a solver failure,
    reported by ``log_target`` as ``failed``) the input state is returned unchanged.
    """
    step = math.exp(block.log_scale) * (block.chol @ rng.standard_normal(block.indices.size))
    log_u = math.log(rng.random())
    prop = v.copy()
    prop[block.indices] += step
    lp_new, aux_new, failed = log_target(prop)
    block.n_prop += 1
    if failed:
        block.n_fail += 1
    accepted = (not failed) and lp_new > -math.inf and log_u < lp_new - logp
    if accepted:
        block.n_acc += 1
    if adapt_gain > 0:
        block.log_scale += adapt_gain * ((1.0 if accepted else 0.0) - target_rate)
    if accepted:
        return prop, lp_new, aux_new, True
    return v, logp, aux, False


# ---------------------------------------------------------------------------
# configuration and chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McmcConfig:
    """Iteration counts, proposal scales and adaptation settings.

    ``n_iter`` counts every sweep including the ``n_burn`` burn-in sweeps; samples
    are stored from post-burn-in sweeps (every ``thin``-th).

    ``adapt_covariance`` re-estimates the parameter-block proposal covariances from
    the burn-in history. ``log_gamma`` runs the random walk for ``gamma`` on
    ``log(gamma)`` (the target then carries the Jacobian), which straightens the
    ``dHk``-``gamma`` ridge; ``scale_gamma`` is then relative to the initial value.
    Both are off by default.
    """

    n_iter: int = 10000
    n_burn: int = 5000
    thin: int = 1
    seed: int = 0
    scale_dH: float = 2000.0
    scale_dS: float = 5.0
    scale_dHk: float = 2000.0
    scale_gamma: float = 0.1
    scale_nv: float = 50.0
    scale_beta: float = 0.5
    rho_dH_dS: float = 0.5
    rho_dHk_gamma: float = 0.5
    adapt_target: float = 0.3
    adapt_gain: float = 1.0
    adapt_t0: float = 100.0
    adapt_decay: float = 0.6
    adapt_covariance: bool = False
    log_gamma: bool = False
    failure_window: int = 1000
    failure_limit: float = 0.5
    substeps: int = 4
    schema_version: int = 1

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError("need 0 <= n_burn < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        for name in ("scale_dH", "scale_dS", "scale_dHk", "scale_gamma", "scale_nv", "scale_beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (abs(self.rho_dH_dS) < 1 and abs(self.rho_dHk_gamma) < 1):
            raise ValueError("proposal correlations must satisfy |rho| < 1")
        if not 0 < self.adapt_target < 1:
            raise ValueError("adapt_target must lie in (0, 1)")

    @property
    def n_records(self) -> int:
        return len(range(self.n_burn, self.n_iter, self.thin))

    def covariance_points(self) -> tuple[int, ...]:
        """Burn-in iterations at which parameter-block covariances are re-estimated."""
        if not self.adapt_covariance or self.n_burn < 400:
            return ()
        return tuple(int(self.n_burn * f) for f in (0.2, 0.4, 0.6, 0.8))

    def gain(self, it: int) -> float:
        """Robbins-Monro step for the log proposal scale; zero after burn-in."""
        if it >= self.n_burn:
            return 0.0
        return self.adapt_gain / (1.0 + it / self.adapt_t0) ** self.adapt_decay

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "McmcConfig":
        d = dict(d)
        if d.get("schema_version", 1) != 1:
            raise ValueError(f"unsupported mcmc schema_version {d['schema_version']}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown mcmc config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Chain:
    """Stored post-burn-in samples plus the information needed to rebuild draws."""

    theta: np.ndarray
    beta: np.ndarray
    tau2: np.ndarray
    sigma2: np.ndarray
    logpost: np.ndarray
    acceptance: dict
    n_failures: int
    seed: int
    config: dict
    prior: dict
    layout: dict | None
    basis: KLBasis | None

    def __post_init__(self):
        self.n_samples = int(self.theta.shape[0])
        self._template = None
        if self.layout is not None and self.basis is not None and self.layout["components"]:
            specs = [ComponentSpec.from_dict(c) for c in self.layout["components"]]
            self._template = DiscrepancyModel.zeros(self.basis, specs, input_ranges=self.layout["input_ranges"])

    def params_at(self, i: int) -> SorbentParams:
        return SorbentParams.from_array(self.theta[i])

    def disc_at(self, i: int) -> DiscrepancyModel | None:
        if self._template is None:
            return None
        return self._template.with_beta(self.beta[i], self.tau2[i])

    # persistence ------------------------------------------------------------

    def write(self, header_path, records_path=None, basis_path=None) -> None:
        """JSON header plus one JSON record per stored sample (NDJSON)."""
        header_path = Path(header_path)
        records_path = Path(records_path) if records_path else header_path.with_suffix(".ndjson")
        basis_ref = None
        if self.basis is not None:
            basis_path = Path(basis_path) if basis_path else header_path.with_name(header_path.stem + ".basis.json")
            self.basis.to_json(basis_path)
            basis_ref = basis_path.name
        header = {
            "schema_version": 1,
            "seed": self.seed,
            "config": self.config,
            "prior": self.prior,
            "layout": self.layout,
            "basis_file": basis_ref,
            "records_file": records_path.name,
            "n_records": self.n_samples,
            "theta_names": list(THETA_NAMES),
            "acceptance": self.acceptance,
            "n_failures": self.n_failures,
        }
        header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        with open(records_path, "w") as fh:
            for i in range(self.n_samples):
                rec = {
                    "theta": self.theta[i].tolist(),
                    "beta": self.beta[i].tolist(),
                    "tau2": self.tau2[i].tolist(),
                    "sigma2": float(self.sigma2[i]),
                    "logpost": float(self.logpost[i]),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read(cls, header_path) -> "Chain":
        header_path = Path(header_path)
        header = json.loads(header_path.read_text())
        recs = [json.loads(line) for line in (header_path.parent / header["records_file"]).read_text().splitlines()
                if line.strip()]
        basis = KLBasis.from_json(header_path.parent / header["basis_file"]) if header["basis_file"] else None
        n_beta = len(recs[0]["beta"]) if recs else 0
        n_tau = len(recs[0]["tau2"]) if recs else 0
        return cls(
            theta=np.array([r["theta"] for r in recs], dtype=float).reshape(-1, len(THETA_NAMES)),
            beta=np.array([r["beta"] for r in recs], dtype=float).reshape(-1, n_beta),
            tau2=np.array([r["tau2"] for r in recs], dtype=float).reshape(-1, n_tau),
            sigma2=np.array([r["sigma2"] for r in recs], dtype=float),
            logpost=np.array([r["logpost"] for r in recs], dtype=float),
            acceptance=header["acceptance"],
            n_failures=int(header["n_failures"]),
            seed=header["seed"],
            config=header["config"],
            prior=header["prior"],
            layout=header["layout"],
            basis=basis,
        )

    def component_labels(self) -> list[str]:
        if self._template is None:
            return []
        return [s.label for s in self._template.specs]

    def summary_rows(self) -> list[tuple[str, float, float, float]]:
        """``(parameter, mean, hpd_lo, hpd_hi)`` rows; HPD is NaN below 100 samples."""
        cols = [(name, self.theta[:, k]) for k, name in enumerate(THETA_NAMES)]
        cols += [(f"tau2[{lab}]", self.tau2[:, j]) for j, lab in enumerate(self.component_labels())]
        cols += [("sigma2", self.sigma2)]
        rows = []
        for name, x in cols:
            if x.size >= 100:
                lo, hi = hpd_interval(x, 0.95)
            else:
                lo = hi = float("nan")
            rows.append((name, float(np.mean(x)) if x.size else float("nan"), lo, hi))
        return rows


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------


def run_mcmc(
    data: Sequence[ExperimentSeries],
    prior: PriorSpec,
    disc_layout: DiscrepancyModel | None,
    cfg: McmcConfig,
    consts: PhysicalConstants = PhysicalConstants(),
    workers: int = 1,
    progress: Callable[[int], None] | None = None,
) -> Chain:
    """Run the sampler.

    Parameters
    ----------
    data : sequence of ExperimentSeries
    prior : PriorSpec
    disc_layout : DiscrepancyModel or None
        Basis, components and input ranges of the discrepancy (its ``beta`` and
        ``tau2`` are ignored). ``None`` calibrates the parameter-only model.
    cfg : McmcConfig
    workers : int
        Threads for the per-series solves; the chain does not depend on it.

    Raises
    ------
    McmcAbort
        If more than ``cfg.failure_limit`` of the proposals in any window of
        ``cfg.failure_window`` iterations hit a solver failure.
    """
    if not data:
        raise ValueError("need at least one series")
    rng = np.random.default_rng(cfg.seed)
    solver_cfg = SolverConfig(substeps=cfg.substeps)
    n_obs = sum(len(s) for s in data)
    n_th = len(THETA_NAMES)

    if disc_layout is not None and disc_layout.specs:
        template = disc_layout.with_beta(np.zeros(disc_layout.n_beta), np.full(len(disc_layout.specs), 1.0))
        slices = template.slices()
    else:
        template, slices = None, []
    n_beta = template.n_beta if template is not None else 0

    v = np.concatenate([prior.medians(), np.zeros(n_beta)])
    G = 3  # position of gamma in theta
    scale_gamma = cfg.scale_gamma
    if cfg.log_gamma:
        scale_gamma = cfg.scale_gamma / v[G]
        v[G] = math.log(v[G])
    tau2 = np.full(len(slices), prior.tau2_median())
    sigma2 = prior.sigma2_median()

    blocks = [
        Block.make("dH,dS", [0, 1], [cfg.scale_dH, cfg.scale_dS], cfg.rho_dH_dS),
        Block.make("dHk,gamma", [2, 3], [cfg.scale_dHk, scale_gamma], cfg.rho_dHk_gamma),
        Block.make("nv", [4], [cfg.scale_nv]),
    ]
    for j, sl in enumerate(slices):
        n_j = sl.stop - sl.start
        blocks.append(Block.make(f"beta[{template.specs[j].label}]", np.arange(sl.start, sl.stop) + n_th,
                                 np.full(n_j, cfg.scale_beta)))

    executor = ThreadPoolExecutor(workers) if workers > 1 and len(data) > 1 else None

    def natural(vec):
        th = vec[:n_th].copy()
        if cfg.log_gamma:
            th[G] = math.exp(th[G])
        return th

    def log_jacobian(vec):
        return vec[G] if cfg.log_gamma else 0.0

    def unpack(vec, t2):
        params = SorbentParams.from_array(natural(vec))
        disc = None if template is None else template.with_beta(vec[n_th:], t2)
        return params, disc

    def prior_part(vec, t2, s2):
        lp = prior.log_prior_theta(natural(vec))
        if lp == -math.inf:
            return lp
        lp += log_jacobian(vec)
        lp += float(invgamma_logpdf(s2, prior.sigma2_shape, prior.sigma2_scale))
        return lp + _beta_tau_logprior(vec[n_th:], t2, slices, prior)

    def make_target(t2, s2):
        def target(vec):
            lp = prior_part(vec, t2, s2)
            if lp == -math.inf:
                return lp, None, False
            params, disc = unpack(vec, t2)
            try:
                ss = residual_ss(data, params, disc, consts, solver_cfg, executor)
            except SolverFailure:
                return -math.inf, None, True
            return lp + gaussian_loglik(ss, n_obs, s2), ss, False

        return target

    try:
        logp, ss, failed = make_target(tau2, sigma2)(v)
        if failed or logp == -math.inf:
            raise McmcAbort("the initial state (prior medians, beta = 0) cannot be solved")

        n_rec = cfg.n_records
        out_theta = np.empty((n_rec, n_th))
        out_beta = np.empty((n_rec, n_beta))
        out_tau2 = np.empty((n_rec, len(slices)))
        out_sigma2 = np.empty(n_rec)
        out_logpost = np.empty(n_rec)
        cov_points = set(cfg.covariance_points())
        hist = np.empty((cfg.n_burn, n_th)) if cov_points else None
        window = deque()
        win_prop = win_fail = 0
        n_fail_total = 0
        k = 0
        for it in range(cfg.n_iter):
            target = make_target(tau2, sigma2)
            gain = cfg.gain(it)
            fails_before = sum(b.n_fail for b in blocks)
            for block in blocks:
                v, logp, ss, _ = mh_block_update(v, logp, ss, block, target, rng, gain, cfg.adapt_target)
            it_fail = sum(b.n_fail for b in blocks) - fails_before
            n_fail_total += it_fail

            for j, sl in enumerate(slices):
                tau2[j] = gibbs_update_tau2(v[n_th + sl.start:n_th + sl.stop], prior, rng)
            sigma2 = gibbs_update_sigma2(ss, n_obs, prior, rng)
            logp = prior_part(v, tau2, sigma2) + gaussian_loglik(ss, n_obs, sigma2)

            window.append((len(blocks), it_fail))
            win_prop += len(blocks)
            win_fail += it_fail
            if len(window) > cfg.failure_window:
                p_old, f_old = window.popleft()
                win_prop -= p_old
                win_fail -= f_old
            if len(window) == cfg.failure_window and win_fail > cfg.failure_limit * win_prop:
                raise McmcAbort(
                    f"{win_fail} of {win_prop} proposals failed to solve in iterations "
                    f"{it + 1 - cfg.failure_window}..{it}; last state theta={natural(v).tolist()}"
                )

            if hist is not None and it < cfg.n_burn:
                hist[it] = v[:n_th]
                if it + 1 in cov_points:
                    _adapt_covariances(blocks[:3], hist[(it + 1) // 2: it + 1])
            if it >= cfg.n_burn and (it - cfg.n_burn) % cfg.thin == 0:
                out_theta[k] = natural(v)
                out_beta[k] = v[n_th:]
                out_tau2[k] = tau2
                out_sigma2[k] = sigma2
                out_logpost[k] = logp - log_jacobian(v)
                k += 1
            if it == cfg.n_burn - 1:
                log.info("burn-in done; acceptance %s",
                         {b.name: round(b.acceptance_rate, 3) for b in blocks})
            if progress is not None:
                progress(it)
    finally:
        if executor is not None:
            executor.shutdown()

    acceptance = {
        b.name: {"proposed": b.n_prop, "accepted": b.n_acc, "failed": b.n_fail, "log_scale": b.log_scale}
        for b in blocks
    }
    layout = template.layout_dict() if template is not None else None
    return Chain(out_theta, out_beta, out_tau2, out_sigma2, out_logpost, acceptance, n_fail_total, cfg.seed,
                 cfg.to_dict(), prior.to_dict(), layout, None if template is None else template.basis)


def _adapt_covariances(blocks, hist):
    # replace the fixed-correlation proposal by the scaled empirical covariance of the
    # second half of the burn-in history seen so far
    for b in blocks:
        sub = hist[:, b.indices]
        cov = np.atleast_2d(np.cov(sub.T))
        d = b.indices.size
        diag = np.diag(b.chol @ b.chol.T) * math.exp(2.0 * b.log_scale)
        cov = cov + 1e-6 * np.diag(np.maximum(np.diag(cov), diag))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            continue
        b.chol = chol
        b.log_scale = math.log(2.38 / math.sqrt(d))


def recompute_logpost(chain: Chain, i: int, data, consts=PhysicalConstants(), solver_cfg=None) -> float:
    """Log posterior of stored sample ``i`` evaluated from scratch."""
    prior = PriorSpec.from_dict(chain.prior)
    solver_cfg = solver_cfg or SolverConfig(substeps=chain.config.get("substeps", 4))
    return log_posterior(data, chain.params_at(i), chain.disc_at(i), float(chain.sigma2[i]), prior, consts,
                         solver_cfg)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def hpd_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``ceil(level * n)`` of the sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 100:
        raise ValueError(f"need at least 100 samples for an HPD interval, got {n}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    m = int(math.ceil(level * n))
    widths = x[m - 1:] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def draw_indices(n_available: int, n_draws: int, seed: int = 0) -> np.ndarray:
    """Evenly strided sample indices without replacement; the seed sets the offset."""
    if not 1 <= n_draws <= n_available:
        raise ValueError(f"number of draws must be in [1, {n_available}]")
    stride = n_available // n_draws
    offset = int(np.random.default_rng(seed).integers(stride)) if stride > 1 else 0
    return offset + stride * np.arange(n_draws)


@dataclass
class PredictiveBands:
    """Posterior predictive summary for one input profile.

    ``lo``/``hi`` are pointwise 2.5/97.5 percentiles of the model-plus-discrepancy
    trajectories; ``pred_lo``/``pred_hi`` add observation noise drawn with each
    sample's ``sigma2``.
    """

    label: str
    t: np.ndarray
    y_obs: np.ndarray | None
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    pred_lo: np.ndarray
    pred_hi: np.ndarray
    draws: np.ndarray
    n_dropped: int = 0
    clamped: int = 0

    def coverage(self) -> float:
        """Fraction of observations inside the predictive band."""
        y = self.y_obs
        return float(np.mean((y >= self.pred_lo) & (y <= self.pred_hi)))


def posterior_predictive(
    chain: Chain,
    data: Sequence[ExperimentSeries],
    n_draws: int,
    consts: PhysicalConstants = PhysicalConstants(),
    seed: int = 0,
    workers: int = 1,
) -> list[PredictiveBands]:
    """Solve the sorbent model for ``n_draws`` stored samples on every profile.

    A draw whose solve fails on a profile is dropped for that profile and counted.
    """
    idx = draw_indices(chain.n_samples, n_draws, seed)
    solver_cfg = SolverConfig(substeps=chain.config.get("substeps", 4))
    rng = np.random.default_rng(seed)
    # noise is drawn up front so results do not depend on which draws fail
    noise_z = rng.standard_normal((len(data), idx.size, max(len(s) for s in data)))

    def one(args):
        k, s = args
        rows, noisy, dropped, clamps = [], [], 0, 0
        for m, i in enumerate(idx):
            try:
                sol = solve_sorbent(chain.params_at(int(i)), chain.disc_at(int(i)), s.profile, consts, solver_cfg)
            except SolverFailure:
                dropped += 1
                continue
            clamps += sol.n_clamped
            rows.append(sol.w)
            noisy.append(sol.w + math.sqrt(chain.sigma2[i]) * noise_z[k, m, : len(s)])
        if not rows:
            raise RuntimeError(f"every posterior draw failed on profile {s.label!r}")
        draws = np.array(rows)
        noisy = np.array(noisy)
        lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
        plo, phi_ = np.percentile(noisy, [2.5, 97.5], axis=0)
        return PredictiveBands(s.label, s.profile.t, s.w_obs, draws.mean(axis=0), lo, hi, plo, phi_, draws,
                               dropped, clamps)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, enumerate(data)))
    return [one(a) for a in enumerate(data)]
