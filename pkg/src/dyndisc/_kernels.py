"""Compiled inner loops shared by the sorbent solver and the reactor march.

All kernels take plain arrays so they can be called from worker threads with the
GIL released. Status codes: 0 success, 1 no bracketing root / left bounds,
2 Newton iteration limit, 3 gas-phase CO2 exhausted, 4 cell fixed point failed.
"""

import math

import numpy as np
from numba import njit

OK = 0
NO_BRACKET = 1
MAX_ITER = 2
GAS_EXHAUSTED = 3
CELL_NOT_CONVERGED = 4

MAX_CELL_SUBSTEPS = 4096
MAX_REFINE = 64


@njit(cache=True, nogil=True)
def _interp_row(phi, u, out):
    g = phi.shape[0]
    pos = u * g - 0.5
    i = int(math.floor(pos))
    if i < 0:
        i = 0
    elif i > g - 2:
        i = g - 2
    w = pos - i
    for l in range(phi.shape[1]):
        out[l] = phi[i, l] * (1.0 - w) + phi[i + 1, l] * w


@njit(cache=True, nogil=True)
def _unit(v, lo, hi):
    u = (v - lo) / (hi - lo)
    if u < 0.0:
        return 0.0, True
    if u > 1.0:
        return 1.0, True
    return u, False


@njit(cache=True, nogil=True)
def disc_prep(p, T, beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx):
    """Evaluate everything in the discrepancy that does not depend on x.

    Returns (delta_E, constant part of delta_K, has_x_terms, clamped); ``cx`` is
    filled with the coefficients multiplying the x main-effect columns.
    """
    n_terms = tvars.shape[0]
    for l in range(cx.shape[0]):
        cx[l] = 0.0
    if n_terms == 0:
        return 0.0, 0.0, False, False
    up, cp = _unit(p, lo[1], hi[1])
    uT, cT = _unit(T, lo[2], hi[2])
    _interp_row(phi, up, rowp)
    _interp_row(phi, uT, rowT)
    d_e = 0.0
    for t in range(n_e):
        prod = beta[t]
        for k in range(3):
            v = tvars[t, k]
            if v < 0:
                break
            c = tcols[t, k]
            if v == 1:
                prod *= rowp[c]
            else:
                prod *= rowT[c]
        d_e += prod
    c_k = 0.0
    has_x = False
    for t in range(n_e, n_terms):
        prod = beta[t]
        xcol = -1
        for k in range(3):
            v = tvars[t, k]
            if v < 0:
                break
            c = tcols[t, k]
            if v == 0:
                xcol = c
            elif v == 1:
                prod *= rowp[c]
            else:
                prod *= rowT[c]
        if xcol >= 0:
            cx[xcol] += prod
            has_x = True
        else:
            c_k += prod
    return d_e, c_k, has_x, cp or cT


@njit(cache=True, nogil=True)
def disc_x(x, cx, phi, lo_x, hi_x):
    """x-dependent part of delta_K and its derivative with respect to x."""
    span = hi_x - lo_x
    u, clamped = _unit(x, lo_x, hi_x)
    g = phi.shape[0]
    pos = u * g - 0.5
    i = int(math.floor(pos))
    if i < 0:
        i = 0
    elif i > g - 2:
        i = g - 2
    w = pos - i
    a = 0.0
    b = 0.0
    for l in range(cx.shape[0]):
        a += cx[l] * phi[i, l]
        b += cx[l] * phi[i + 1, l]
    val = a * (1.0 - w) + b * w
    if clamped:
        return val, 0.0
    return val, (b - a) * g / span


@njit(cache=True, nogil=True)
def sorbent_rate(x, k, kappa, pabs, d_e, c_k, has_x, cx, phi, lo_x, hi_x):
    """Rate dx/dt with multiplicative discrepancies, and its x-derivative."""
    one = 1.0 - 2.0 * x
    kap = kappa * math.exp(d_e)
    bracket = one * one * pabs - x * x / kap
    dbracket = -4.0 * one * pabs - 2.0 * x / kap
    if has_x:
        dk, ddk = disc_x(x, cx, phi, lo_x, hi_x)
        kk = k * math.exp(c_k + dk)
        return kk * bracket, kk * (ddk * bracket + dbracket)
    kk = k * math.exp(c_k)
    return kk * bracket, kk * dbracket


@njit(cache=True, nogil=True)
def cn_scalar_step(x0, f0, h, k, kappa, pabs, d_e, c_k, has_x, cx, phi, lo_x, hi_x, tol, max_iter):
    """Solve y = x0 + h/2 (f0 + f(y)) on [0, 0.5] by safeguarded Newton.

    Newton steps that leave [0, 0.5] (or the current bracket) fall back to
    bisection between states of opposite residual sign. Returns (y, f(y), status).
    """
    half = 0.5 * h
    y = x0
    neg = 0.0
    pos = 0.5
    bracketed = False
    budget = max_iter
    it = 0
    while it < budget:
        it += 1
        f, df = sorbent_rate(y, k, kappa, pabs, d_e, c_k, has_x, cx, phi, lo_x, hi_x)
        res = y - x0 - half * (f0 + f)
        if abs(res) < tol:
            return y, f, OK
        if bracketed:
            if res < 0.0:
                neg = y
            else:
                pos = y
        dres = 1.0 - half * df
        y_new = y - res / dres if dres != 0.0 else -1.0
        if bracketed:
            inside = min(neg, pos) < y_new < max(neg, pos)
        else:
            inside = 0.0 <= y_new <= 0.5
        if not inside:
            if not bracketed:
                fa, _ = sorbent_rate(0.0, k, kappa, pabs, d_e, c_k, has_x, cx, phi, lo_x, hi_x)
                fb, _ = sorbent_rate(0.5, k, kappa, pabs, d_e, c_k, has_x, cx, phi, lo_x, hi_x)
                ra = -x0 - half * (f0 + fa)
                rb = 0.5 - x0 - half * (f0 + fb)
                if ra == 0.0:
                    return 0.0, fa, OK
                if rb == 0.0:
                    return 0.5, fb, OK
                if ra * rb > 0.0:
                    return y, f, NO_BRACKET
                if ra < 0.0:
                    neg, pos = 0.0, 0.5
                else:
                    neg, pos = 0.5, 0.0
                if res < 0.0:
                    neg = y
                else:
                    pos = y
                bracketed = True
                budget += 64
            y_new = 0.5 * (neg + pos)
            if abs(pos - neg) < 1e-15:
                f, _ = sorbent_rate(y_new, k, kappa, pabs, d_e, c_k, has_x, cx, phi, lo_x, hi_x)
                return y_new, f, OK
        y = y_new
    return y, 0.0, MAX_ITER


@njit(cache=True, nogil=True)
def solve_sorbent_kernel(
    t, T, p, x0, dH, dS, dHk, gamma, R, P, substeps, tol, max_iter,
    beta, tvars, tcols, n_e, lo, hi, phi, x_out,
):
    """Crank-Nicolson march of the sorbent model over one input profile.

    Returns (status, failing data index, clamp count).
    """
    L = phi.shape[1]
    rowp = np.empty(L)
    rowT = np.empty(L)
    cx = np.empty(L)
    n = t.shape[0]
    clamps = 0
    x = x0
    x_out[0] = x
    Tc = T[0]
    pc = p[0]
    k = gamma * Tc * math.exp(-dHk / (R * Tc))
    kappa = math.exp(dS / R) * math.exp(-dH / (R * Tc)) / P
    d_e, c_k, has_x, cl = disc_prep(pc, Tc, beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx)
    clamps += cl
    f, _ = sorbent_rate(x, k, kappa, pc * P, d_e, c_k, has_x, cx, phi, lo[0], hi[0])
    for j in range(n - 1):
        # an interval whose implicit step has no root in [0, 0.5] is retried
        # with doubled substeps, up to MAX_REFINE times the configured count
        ms = substeps
        xs = x
        fs = f
        while True:
            h = (t[j + 1] - t[j]) / ms
            x = xs
            f = fs
            cl_j = 0
            status = OK
            for m in range(1, ms + 1):
                w = m / ms
                Tn = T[j] * (1.0 - w) + T[j + 1] * w
                pn = p[j] * (1.0 - w) + p[j + 1] * w
                k = gamma * Tn * math.exp(-dHk / (R * Tn))
                kappa = math.exp(dS / R) * math.exp(-dH / (R * Tn)) / P
                d_e, c_k, has_x, cl = disc_prep(pn, Tn, beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx)
                cl_j += cl
                x, f, status = cn_scalar_step(
                    x, f, h, k, kappa, pn * P, d_e, c_k, has_x, cx, phi, lo[0], hi[0], tol, max_iter
                )
                if status != OK:
                    break
            if status == OK:
                clamps += cl_j
                break
            if ms >= substeps * MAX_REFINE:
                return status, j + 1, clamps
            ms *= 2
        x_out[j + 1] = x
    return OK, -1, clamps


# ---------------------------------------------------------------------------
# two-reaction reality model
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def reality_rates(x, z, kx, kz, kapx, kapz, pabs):
    """Returns (f_x, f_z, r_z, jac) with jac = d(f_x, f_z)/d(x, z)."""
    s = 1.0 - 2.0 * x - z
    rz = kz * (s * pabs - z / kapz)
    rx = kx * (s * z - x * x / kapx)
    drz_dx = -2.0 * kz * pabs
    drz_dz = -kz * (pabs + 1.0 / kapz)
    drx_dx = kx * (-2.0 * z - 2.0 * x / kapx)
    drx_dz = kx * (s - z)
    jac = np.empty((2, 2))
    jac[0, 0] = drx_dx
    jac[0, 1] = drx_dz
    jac[1, 0] = drz_dx - drx_dx
    jac[1, 1] = drz_dz - drx_dz
    return rx, rz - rx, rz, jac


@njit(cache=True, nogil=True)
def _feasible(x, z):
    return x >= 0.0 and z >= 0.0 and 2.0 * x + z <= 1.0


@njit(cache=True, nogil=True)
def cn_reality_step(x0, z0, fx0, fz0, h, kx, kz, kapx, kapz, pabs, tol, max_iter):
    """Damped 2x2 Newton for the Crank-Nicolson step. Returns (x, z, fx, fz, status)."""
    half = 0.5 * h
    x = x0
    z = z0
    for it in range(max_iter):
        fx, fz, _, jac = reality_rates(x, z, kx, kz, kapx, kapz, pabs)
        gx = x - x0 - half * (fx0 + fx)
        gz = z - z0 - half * (fz0 + fz)
        if abs(gx) < tol and abs(gz) < tol:
            return x, z, fx, fz, OK
        a = 1.0 - half * jac[0, 0]
        b = -half * jac[0, 1]
        c = -half * jac[1, 0]
        d = 1.0 - half * jac[1, 1]
        det = a * d - b * c
        if det == 0.0:
            return x, z, fx, fz, MAX_ITER
        dx = (d * gx - b * gz) / det
        dz = (-c * gx + a * gz) / det
        lam = 1.0
        for _ in range(60):
            xn = x - lam * dx
            zn = z - lam * dz
            if _feasible(xn, zn):
                break
            lam *= 0.5
        else:
            return x, z, fx, fz, NO_BRACKET
        x = xn
        z = zn
    return x, z, 0.0, 0.0, MAX_ITER


@njit(cache=True, nogil=True)
def reality_coeffs(T, P, R, dHx, dSx, dHkx, gx, dHz, dSz, dHkz, gz):
    kapx = math.exp(dSx / R) * math.exp(-dHx / (R * T))
    kapz = math.exp(dSz / R) * math.exp(-dHz / (R * T)) / P
    kx = gx * math.exp(-dHkx / (R * T))
    kz = gz * math.exp(-dHkz / (R * T))
    return kx, kz, kapx, kapz


@njit(cache=True, nogil=True)
def solve_reality_kernel(t, T, p, x0, z0, theta, R, P, substeps, tol, max_iter, x_out, z_out):
    dHx, dSx, dHkx, gx = theta[0], theta[1], theta[2], theta[3]
    dHz, dSz, dHkz, gz = theta[5], theta[6], theta[7], theta[8]
    n = t.shape[0]
    x = x0
    z = z0
    x_out[0] = x
    z_out[0] = z
    kx, kz, kapx, kapz = reality_coeffs(T[0], P, R, dHx, dSx, dHkx, gx, dHz, dSz, dHkz, gz)
    fx, fz, _, _ = reality_rates(x, z, kx, kz, kapx, kapz, p[0] * P)
    for j in range(n - 1):
        h = (t[j + 1] - t[j]) / substeps
        for m in range(1, substeps + 1):
            w = m / substeps
            Tn = T[j] * (1.0 - w) + T[j + 1] * w
            pn = p[j] * (1.0 - w) + p[j + 1] * w
            kx, kz, kapx, kapz = reality_coeffs(Tn, P, R, dHx, dSx, dHkx, gx, dHz, dSz, dHkz, gz)
            x, z, fx, fz, status = cn_reality_step(x, z, fx, fz, h, kx, kz, kapx, kapz, pn * P, tol, max_iter)
            if status != OK:
                return status, j + 1
        x_out[j + 1] = x
        z_out[j + 1] = z
    return OK, -1


# ---------------------------------------------------------------------------
# steady 1D adsorber march
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _energy(T_prev, heat, cflow, hxdz, Tcool):
    # convective transport + reaction heat, heat exchange taken implicitly
    return (cflow * T_prev + heat + hxdz * Tcool) / (cflow + hxdz)


@njit(cache=True, nogil=True)
def _n_sub(stiff, h):
    m = int(math.ceil(abs(stiff) * h / 0.5))
    if m < 1:
        return 1
    if m > MAX_CELL_SUBSTEPS:
        return MAX_CELL_SUBSTEPS
    return m


@njit(cache=True, nogil=True)
def _sorbent_cell(xi, Ti, pi, Tn, pn, h, m, dH, dS, dHk, gamma, R, P, newton_tol, max_iter,
                  beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx):
    """Integrate one cell with m Crank-Nicolson substeps, T and p linear across the cell."""
    clamps = 0
    x = xi
    hs = h / m
    T = Ti
    p = pi
    k = gamma * T * math.exp(-dHk / (R * T))
    kappa = math.exp(dS / R) * math.exp(-dH / (R * T)) / P
    d_e, c_k, has_x, cl = disc_prep(p, T, beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx)
    clamps += cl
    f, _ = sorbent_rate(x, k, kappa, p * P, d_e, c_k, has_x, cx, phi, lo[0], hi[0])
    for s in range(1, m + 1):
        w = s / m
        T = Ti * (1.0 - w) + Tn * w
        p = pi * (1.0 - w) + pn * w
        k = gamma * T * math.exp(-dHk / (R * T))
        kappa = math.exp(dS / R) * math.exp(-dH / (R * T)) / P
        d_e, c_k, has_x, cl = disc_prep(p, T, beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx)
        clamps += cl
        x, f, status = cn_scalar_step(x, f, hs, k, kappa, p * P, d_e, c_k, has_x, cx, phi, lo[0], hi[0],
                                      newton_tol, max_iter)
        if status != OK:
            return x, status, clamps
    return x, OK, clamps


@njit(cache=True, nogil=True)
def march_sorbent_kernel(
    n_cells, dl, v_s, capflux, f_inert, fc_in, T_in, x_in, cflow, hx, Tcool,
    dH, dS, dHk, gamma, R, P, newton_tol, max_iter, cell_tol, max_sweeps, relax,
    beta, tvars, tcols, n_e, lo, hi, phi,
    x_out, T_out, p_out, fc_out,
):
    """March the co-current bed cell by cell. Returns (status, failing cell, clamps)."""
    L = phi.shape[1]
    rowp = np.empty(L)
    rowT = np.empty(L)
    cx = np.empty(L)
    clamps = 0
    h = dl / v_s
    hxdz = hx * dl
    x_out[0] = x_in
    T_out[0] = T_in
    fc_out[0] = fc_in
    p_out[0] = fc_in / (f_inert + fc_in)
    for i in range(n_cells):
        xi = x_out[i]
        Ti = T_out[i]
        pi = p_out[i]
        k = gamma * Ti * math.exp(-dHk / (R * Ti))
        kappa = math.exp(dS / R) * math.exp(-dH / (R * Ti)) / P
        d_e, c_k, has_x, cl = disc_prep(pi, Ti, beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx)
        clamps += cl
        _, df = sorbent_rate(xi, k, kappa, pi * P, d_e, c_k, has_x, cx, phi, lo[0], hi[0])
        # the state moves between xi and the local equilibrium, where the relaxation
        # rate is at most k' (4 p P + 2 x / kappa'); the slope at xi covers the rest
        kap = kappa * math.exp(d_e)
        r = math.sqrt(kap * pi * P)
        x_hi = max(xi, r / (1.0 + 2.0 * r))
        dk = disc_x(xi, cx, phi, lo[0], hi[0])[0] if has_x else 0.0
        stiff = max(abs(df), k * math.exp(c_k + dk) * (4.0 * pi * P + 2.0 * x_hi / kap))
        m = _n_sub(2.0 * stiff, h)
        Tn = Ti
        pn = pi
        xn = xi
        done = False
        for sweep in range(max_sweeps):
            x_new, status, cl = _sorbent_cell(xi, Ti, pi, Tn, pn, h, m, dH, dS, dHk, gamma, R, P, newton_tol,
                                              max_iter, beta, tvars, tcols, n_e, lo, hi, phi, rowp, rowT, cx)
            clamps += cl
            if status != OK:
                return status, i, clamps
            # a provisional overshoot of the gas sink is clipped; only a converged
            # state that needs more CO2 than the gas carries counts as exhaustion
            fc = max(fc_out[i] - capflux * (x_new - xi), 0.0)
            p_new = fc / (f_inert + fc)
            T_new = _energy(Ti, capflux * (-dH) * (x_new - xi), cflow, hxdz, Tcool)
            change = max(abs(x_new - xn), abs(p_new - pn), abs(T_new - Tn) / Tn)
            xn = x_new
            pn = pn + relax * (p_new - pn)
            Tn = Tn + relax * (T_new - Tn)
            if change < cell_tol:
                done = True
                break
        if not done:
            return CELL_NOT_CONVERGED, i, clamps
        fc = fc_out[i] - capflux * (xn - xi)
        if fc < 0.0:
            return GAS_EXHAUSTED, i, clamps
        x_out[i + 1] = xn
        T_out[i + 1] = Tn
        p_out[i + 1] = fc / (f_inert + fc)
        fc_out[i + 1] = fc
    return OK, -1, clamps


@njit(cache=True, nogil=True)
def _reality_cell(xi, zi, Ti, pi, Tn, pn, h, m, theta, R, P, newton_tol, max_iter):
    dHx, dSx, dHkx, gx = theta[0], theta[1], theta[2], theta[3]
    dHz, dSz, dHkz, gz = theta[5], theta[6], theta[7], theta[8]
    hs = h / m
    x = xi
    z = zi
    kx, kz, kapx, kapz = reality_coeffs(Ti, P, R, dHx, dSx, dHkx, gx, dHz, dSz, dHkz, gz)
    fx, fz, _, _ = reality_rates(x, z, kx, kz, kapx, kapz, pi * P)
    for s in range(1, m + 1):
        w = s / m
        T = Ti * (1.0 - w) + Tn * w
        p = pi * (1.0 - w) + pn * w
        kx, kz, kapx, kapz = reality_coeffs(T, P, R, dHx, dSx, dHkx, gx, dHz, dSz, dHkz, gz)
        x, z, fx, fz, status = cn_reality_step(x, z, fx, fz, hs, kx, kz, kapx, kapz, p * P, newton_tol, max_iter)
        if status != OK:
            return x, z, status
    return x, z, OK


@njit(cache=True, nogil=True)
def march_reality_kernel(
    n_cells, dl, v_s, capflux, f_inert, fc_in, T_in, x_in, z_in, cflow, hx, Tcool,
    theta, R, P, newton_tol, max_iter, cell_tol, max_sweeps, relax, load_includes_z,
    x_out, z_out, T_out, p_out, fc_out,
):
    dHx, dSx, dHkx, gx = theta[0], theta[1], theta[2], theta[3]
    dHz, dSz, dHkz, gz = theta[5], theta[6], theta[7], theta[8]
    h = dl / v_s
    hxdz = hx * dl
    x_out[0] = x_in
    z_out[0] = z_in
    T_out[0] = T_in
    fc_out[0] = fc_in
    p_out[0] = fc_in / (f_inert + fc_in)
    zl = 1.0 if load_includes_z else 0.0
    for i in range(n_cells):
        xi = x_out[i]
        zi = z_out[i]
        Ti = T_out[i]
        pi = p_out[i]
        kx, kz, kapx, kapz = reality_coeffs(Ti, P, R, dHx, dSx, dHkx, gx, dHz, dSz, dHkz, gz)
        _, _, _, jac = reality_rates(xi, zi, kx, kz, kapx, kapz, pi * P)
        stiff = max(abs(jac[0, 0]) + abs(jac[0, 1]), abs(jac[1, 0]) + abs(jac[1, 1]))
        m = _n_sub(2.0 * stiff, h)
        Tn = Ti
        pn = pi
        xn = xi
        zn = zi
        done = False
        for sweep in range(max_sweeps):
            x_new, z_new, status = _reality_cell(xi, zi, Ti, pi, Tn, pn, h, m, theta, R, P, newton_tol, max_iter)
            if status != OK:
                return status, i
            dload = (x_new - xi) + zl * (z_new - zi)
            fc = max(fc_out[i] - capflux * dload, 0.0)
            p_new = fc / (f_inert + fc)
            # z formation takes CO2 from the gas, x formation converts z; when z is not
            # counted as loading the x route carries the combined heat
            heat = capflux * ((-dHz) * (zl * (z_new - zi) + (x_new - xi)) + (-dHx) * (x_new - xi))
            T_new = _energy(Ti, heat, cflow, hxdz, Tcool)
            change = max(max(abs(x_new - xn), abs(z_new - zn)), max(abs(p_new - pn), abs(T_new - Tn) / Tn))
            xn = x_new
            zn = z_new
            pn = pn + relax * (p_new - pn)
            Tn = Tn + relax * (T_new - Tn)
            if change < cell_tol:
                done = True
                break
        if not done:
            return CELL_NOT_CONVERGED, i
        fc = fc_out[i] - capflux * ((xn - xi) + zl * (zn - zi))
        if fc < 0.0:
            return GAS_EXHAUSTED, i
        x_out[i + 1] = xn
        z_out[i + 1] = zn
        T_out[i + 1] = Tn
        p_out[i + 1] = fc / (f_inert + fc)
        fc_out[i + 1] = fc
    return OK, -1
