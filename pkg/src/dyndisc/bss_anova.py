"""
BSS-ANOVA Gaussian-process discrepancy as a truncated Karhunen-Loeve linear model.

Main effects use the eigenfunctions of the BSS-ANOVA kernel ``K1`` tabulated on a
dense midpoint grid over [0, 1] and evaluated by linear interpolation. Interaction
components use products of the main-effect basis functions.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

#: Names of the raw discrepancy inputs, in the order used by the numeric kernels.
INPUT_NAMES = ("x", "p", "T")

#: Default raw input ranges used for rescaling onto [0, 1] (T in K, p mole fraction).
DEFAULT_INPUT_RANGES = {"x": (0.0, 0.5), "p": (0.0, 1.0), "T": (310.0, 380.0)}


class BasisError(RuntimeError):
    """Raised when the KL basis cannot be constructed."""


# ---------------------------------------------------------------------------
# kernel algebra
# ---------------------------------------------------------------------------


def bernoulli_poly(l, u):
    """Bernoulli polynomial of degree ``l`` (1, 2 or 4) evaluated at ``u``."""
    u = np.asarray(u, dtype=float)
    if l == 1:
        out = u - 0.5
    elif l == 2:
        out = u * u - u + 1.0 / 6.0
    elif l == 4:
        out = u**4 - 2.0 * u**3 + u * u - 1.0 / 30.0
    else:
        raise ValueError(f"unsupported Bernoulli degree {l}; expected 1, 2 or 4")
    return out[()] if out.ndim == 0 else out


def _check_unit(*arrays):
    for a in arrays:
        a = np.asarray(a, dtype=float)
        if np.any(a < 0.0) or np.any(a > 1.0) or np.any(~np.isfinite(a)):
            raise ValueError("kernel arguments must lie in [0, 1]; rescale inputs first")


def k1(u, u2):
    """Main-effect BSS-ANOVA covariance ``K1(u, u')``.

    Broadcasts over array arguments.
    """
    _check_unit(u, u2)
    u = np.asarray(u, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    out = (
        bernoulli_poly(1, u) * bernoulli_poly(1, u2)
        + bernoulli_poly(2, u) * bernoulli_poly(2, u2)
        - bernoulli_poly(4, np.abs(u - u2)) / 24.0
    )
    out = np.asarray(out)
    return out[()] if out.ndim == 0 else out


def k2(pair1, pair2):
    """Two-way interaction covariance ``K1(u, u') K1(v, v')``."""
    (u, v), (u2, v2) = pair1, pair2
    return k1(u, u2) * k1(v, v2)


def gram_k1(points):
    """Gram matrix of ``K1`` over a vector of points in [0, 1]."""
    points = np.asarray(points, dtype=float)
    return k1(points[:, None], points[None, :])


# ---------------------------------------------------------------------------
# tabulated KL basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KLBasis:
    """Karhunen-Loeve basis of ``K1`` tabulated on a uniform midpoint grid.

    Attributes
    ----------
    grid : ndarray, shape (G,)
        Grid points ``(i + 1/2) / G``.
    eigenvalues : ndarray, shape (L,)
        Leading eigenvalues of the integral operator, descending.
    phi : ndarray, shape (G, L)
        Column ``l`` holds ``sqrt(eigenvalues[l])`` times the unit-norm eigenfunction.
    """

    grid: np.ndarray
    eigenvalues: np.ndarray
    phi: np.ndarray

    @property
    def grid_size(self) -> int:
        return self.grid.shape[0]

    @property
    def n_basis(self) -> int:
        return self.eigenvalues.shape[0]

    def unit_eigenfunctions(self) -> np.ndarray:
        """Tabulated eigenfunctions with the eigenvalue scaling removed."""
        return self.phi / np.sqrt(self.eigenvalues)[None, :]

    def truncate(self, n_basis: int) -> "KLBasis":
        if not 1 <= n_basis <= self.n_basis:
            raise ValueError(f"n_basis must be in [1, {self.n_basis}]")
        return KLBasis(self.grid, self.eigenvalues[:n_basis].copy(), self.phi[:, :n_basis].copy())

    def to_json(self, path) -> None:
        payload = {
            "grid_size": self.grid_size,
            "n_basis": self.n_basis,
            "eigenvalues": self.eigenvalues.tolist(),
            "phi": self.phi.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path) -> "KLBasis":
        payload = json.loads(Path(path).read_text())
        g = int(payload["grid_size"])
        eig = np.asarray(payload["eigenvalues"], dtype=float)
        phi = np.asarray(payload["phi"], dtype=float).reshape(g, int(payload["n_basis"]))
        return cls(midpoint_grid(g), eig, phi)


def midpoint_grid(grid_size: int) -> np.ndarray:
    return (np.arange(grid_size) + 0.5) / grid_size


def _fix_signs(vecs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = vecs.copy()
    for l in range(out.shape[1]):
        col = out[:, l]
        nz = np.flatnonzero(np.abs(col) > tol * np.max(np.abs(col)))
        if nz.size and col[nz[0]] < 0:
            out[:, l] = -col
    return out


def kl_spectrum(grid_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Full Nystrom spectrum of ``K1`` on the midpoint grid.

    Returns eigenvalues (descending) and unit-norm eigenfunctions tabulated on the
    grid (grid-weighted inner product equal to the identity).
    """
    grid = midpoint_grid(grid_size)
    gram = gram_k1(grid) / grid_size
    try:
        lam, vec = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise BasisError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    if lam[0] < -1e-10:
        raise BasisError(f"negative leading eigenvalue {lam[0]:.3e}")
    return lam, _fix_signs(vec) * math.sqrt(grid_size)


def build_kl_basis(grid_size: int = 512, n_basis: int = 25) -> KLBasis:
    """Nystrom construction of the truncated KL basis of ``K1``.

    Parameters
    ----------
    grid_size : int
        Number of uniform midpoint grid nodes ``G``; must be at least ``4 * n_basis``.
    n_basis : int
        Number of retained eigenpairs ``L``.
    """
    if n_basis < 1:
        raise ValueError("n_basis must be >= 1")
    if grid_size < 4 * n_basis:
        raise ValueError(f"grid_size={grid_size} too coarse for n_basis={n_basis} (need >= {4 * n_basis})")
    lam, efun = kl_spectrum(grid_size)
    lam = lam[:n_basis]
    if np.any(lam <= 0):
        raise BasisError("retained eigenvalues must be positive; reduce n_basis")
    phi = efun[:, :n_basis] * np.sqrt(lam)[None, :]
    return KLBasis(midpoint_grid(grid_size), lam.copy(), np.ascontiguousarray(phi))


def _locate(basis: KLBasis, u: float) -> tuple[int, float]:
    g = basis.grid_size
    pos = u * g - 0.5
    i = min(max(int(math.floor(pos)), 0), g - 2)
    return i, pos - i


def eval_basis(basis: KLBasis, u: float) -> np.ndarray:
    """Linear interpolation of every tabulated column at ``u``.

    The half cells outside the first and last grid node are covered by linear
    extension of the end cells.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u={u} outside [0, 1]")
    i, w = _locate(basis, u)
    return basis.phi[i] * (1.0 - w) + basis.phi[i + 1] * w


def eval_basis_deriv(basis: KLBasis, u: float) -> np.ndarray:
    """Slope of the linear interpolant; right-hand slope at interior nodes."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u={u} outside [0, 1]")
    i, _ = _locate(basis, u)
    return (basis.phi[i + 1] - basis.phi[i]) * basis.grid_size


def nystrom_extension(basis: KLBasis, u: float) -> np.ndarray:
    """Evaluate the scaled eigenfunctions at ``u`` through the Nystrom formula."""
    g = basis.grid_size
    kvec = k1(u, basis.grid)
    efun = basis.unit_eigenfunctions()
    e_u = (kvec @ efun) / g / basis.eigenvalues
    return e_u * np.sqrt(basis.eigenvalues)


# ---------------------------------------------------------------------------
# functional-ANOVA discrepancy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentSpec:
    """One functional-ANOVA component of a discrepancy.

    ``target`` is ``"E"`` (equilibrium, inputs from {p, T}) or ``"K"`` (kinetic,
    inputs from {x, p, T}).
    """

    target: str
    input_indices: tuple[str, ...]
    n_basis: int = 25

    def __post_init__(self):
        idx = tuple(self.input_indices)
        object.__setattr__(self, "input_indices", idx)
        if self.target not in ("E", "K"):
            raise ValueError(f"target must be 'E' or 'K', got {self.target!r}")
        if not idx:
            raise ValueError("input_indices must be non-empty")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate inputs in {idx}")
        allowed = ("p", "T") if self.target == "E" else INPUT_NAMES
        bad = [name for name in idx if name not in allowed]
        if bad:
            raise ValueError(f"inputs {bad} not allowed for target {self.target}")
        if self.n_basis < 1:
            raise ValueError("n_basis must be >= 1")

    @property
    def label(self) -> str:
        return f"{self.target}:{'*'.join(self.input_indices)}"

    def to_dict(self) -> dict:
        return {"target": self.target, "inputs": list(self.input_indices), "n_basis": self.n_basis}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ComponentSpec":
        return cls(d["target"], tuple(d["inputs"]), int(d.get("n_basis", 25)))


def default_layout(n_basis: int = 25, three_way: bool = False) -> list[ComponentSpec]:
    """Main effects and two-way interactions for both discrepancies."""
    specs = [
        ComponentSpec("E", ("p",), n_basis),
        ComponentSpec("E", ("T",), n_basis),
        ComponentSpec("E", ("p", "T"), n_basis),
    ]
    k_inputs = ("x", "p", "T")
    specs += [ComponentSpec("K", (v,), n_basis) for v in k_inputs]
    specs += [ComponentSpec("K", pair, n_basis) for pair in itertools.combinations(k_inputs, 2)]
    if three_way:
        specs.append(ComponentSpec("K", k_inputs, n_basis))
    return specs


def _basis_index_tuples(eigenvalues: np.ndarray, order: int, n_keep: int) -> list[tuple[int, ...]]:
    """Main-effect column tuples for a component, ranked by product eigenvalue."""
    n_main = eigenvalues.shape[0]
    if order == 1:
        if n_keep > n_main:
            raise ValueError(f"component requests {n_keep} basis functions, basis has {n_main}")
        return [(l,) for l in range(n_keep)]
    combos = list(itertools.product(range(n_main), repeat=order))
    weights = np.array([np.prod(eigenvalues[list(c)]) for c in combos])
    order_idx = np.argsort(-weights, kind="stable")
    if n_keep > len(combos):
        raise ValueError("too many interaction basis functions requested")
    return [combos[i] for i in order_idx[:n_keep]]


@dataclass(frozen=True)
class TermTable:
    """Flattened layout consumed by the numeric kernels.

    Row ``t`` multiplies ``beta[t]`` by the product over k of main-effect column
    ``cols[t, k]`` evaluated at input ``vars[t, k]`` (-1 marks an unused slot).
    """

    vars: np.ndarray
    cols: np.ndarray
    n_e: int
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class DiscrepancyModel:
    """Equilibrium and kinetic BSS-ANOVA discrepancies sharing one KL basis.

    ``beta`` is ordered ``[beta_E_1, ..., beta_E_JE, beta_K_1, ..., beta_K_JK]``;
    there is no intercept.
    """

    basis: KLBasis
    specs: tuple[ComponentSpec, ...]
    beta: np.ndarray
    tau2: np.ndarray
    input_ranges: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_INPUT_RANGES))
    _table: TermTable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        seen_k = False
        for s in specs:
            if s.target == "K":
                seen_k = True
            elif seen_k:
                raise ValueError("equilibrium (E) components must precede kinetic (K) components")
        beta = np.ascontiguousarray(self.beta, dtype=float)
        tau2 = np.ascontiguousarray(self.tau2, dtype=float)
        if beta.shape != (self.n_beta,):
            raise ValueError(f"beta has length {beta.size}, layout needs {self.n_beta}")
        if tau2.shape != (len(specs),):
            raise ValueError(f"tau2 needs one entry per component ({len(specs)})")
        if np.any(tau2 <= 0):
            raise ValueError("tau2 entries must be positive")
        ranges = {k: (float(v[0]), float(v[1])) for k, v in dict(self.input_ranges).items()}
        for name in INPUT_NAMES:
            lo, hi = ranges.setdefault(name, DEFAULT_INPUT_RANGES[name])
            if not hi > lo:
                raise ValueError(f"empty input range for {name}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "tau2", tau2)
        object.__setattr__(self, "input_ranges", ranges)
        if self._table is None:
            object.__setattr__(self, "_table", self._build_table())

    @classmethod
    def zeros(cls, basis: KLBasis, specs: Sequence[ComponentSpec] | None = None, tau2: float = 1.0, input_ranges=None):
        specs = tuple(default_layout(basis.n_basis) if specs is None else specs)
        n = sum(s.n_basis for s in specs)
        kw = {} if input_ranges is None else {"input_ranges": input_ranges}
        return cls(basis, specs, np.zeros(n), np.full(len(specs), float(tau2)), **kw)

    @property
    def n_beta(self) -> int:
        return sum(s.n_basis for s in self.specs)

    def slices(self) -> list[slice]:
        """Slice of ``beta`` belonging to each component, in layout order."""
        out, start = [], 0
        for s in self.specs:
            out.append(slice(start, start + s.n_basis))
            start += s.n_basis
        return out

    def with_beta(self, beta, tau2=None) -> "DiscrepancyModel":
        return replace(self, beta=np.asarray(beta, dtype=float), tau2=self.tau2 if tau2 is None else tau2)

    @property
    def table(self) -> TermTable:
        return self._table

    def _build_table(self) -> TermTable:
        rows_v, rows_c = [], []
        n_e = 0
        for s in self.specs:
            tuples = _basis_index_tuples(self.basis.eigenvalues, len(s.input_indices), s.n_basis)
            var_idx = [INPUT_NAMES.index(name) for name in s.input_indices]
            for tup in tuples:
                rows_v.append(var_idx + [-1] * (3 - len(var_idx)))
                rows_c.append(list(tup) + [-1] * (3 - len(tup)))
            if s.target == "E":
                n_e += s.n_basis
        lo = np.array([self.input_ranges[n][0] for n in INPUT_NAMES])
        hi = np.array([self.input_ranges[n][1] for n in INPUT_NAMES])
        vars_ = np.array(rows_v, dtype=np.int64).reshape(-1, 3)
        cols = np.array(rows_c, dtype=np.int64).reshape(-1, 3)
        return TermTable(vars_, cols, n_e, lo, hi)

    def rescale(self, name: str, value: float) -> tuple[float, bool]:
        """Map a raw input onto [0, 1]; returns (u, clamped)."""
        lo, hi = self.input_ranges[name]
        u = (value - lo) / (hi - lo)
        if u < 0.0 or u > 1.0:
            return min(max(u, 0.0), 1.0), True
        return u, False

    def layout_dict(self) -> dict:
        return {
            "components": [s.to_dict() for s in self.specs],
            "input_ranges": {k: list(v) for k, v in self.input_ranges.items()},
        }


def eval_discrepancy(model: DiscrepancyModel, which: str, zeta) -> float:
    """Evaluate the equilibrium (``"E"``) or kinetic (``"K"``) discrepancy.

    Parameters
    ----------
    model : DiscrepancyModel
    which : {"E", "K"}
    zeta : mapping or sequence
        Raw inputs, either ``{"x": .., "p": .., "T": ..}`` or a sequence ordered
        ``(x, p, T)``. Inputs unused by the requested discrepancy may be omitted.
    """
    if which not in ("E", "K"):
        raise ValueError("which must be 'E' or 'K'")
    specs = [(s, sl) for s, sl in zip(model.specs, model.slices()) if s.target == which]
    if not specs:
        raise ValueError(f"discrepancy {which} has no components")
    if not isinstance(zeta, Mapping):
        zeta = dict(zip(INPUT_NAMES, zeta))
    rows = {}
    clamped = False
    for name in {n for s, _ in specs for n in s.input_indices}:
        u, c = model.rescale(name, float(zeta[name]))
        clamped |= c
        rows[name] = eval_basis(model.basis, u)
    if clamped:
        warnings.warn("discrepancy input outside calibration range; clamped to [0, 1]", RuntimeWarning, stacklevel=2)
    total = 0.0
    for s, sl in specs:
        tuples = _basis_index_tuples(model.basis.eigenvalues, len(s.input_indices), s.n_basis)
        vals = np.array([np.prod([rows[n][c] for n, c in zip(s.input_indices, tup)]) for tup in tuples])
        total += float(model.beta[sl] @ vals)
    return total
