"""Regenerate the frozen reference values used by the test-suite.

Everything here is written from the model definitions directly, without importing
dyndisc: exact rational arithmetic for the kernel, stiff Radau integration for the
rate equations, bracketing root finds for equilibria and a fine-grid eigensolve for
the kernel spectrum. Run ``python tests/oracles/generate.py`` to rewrite the JSON.
"""

import json
import math
from pathlib import Path

import numpy as np
import sympy as sp
from scipy import integrate, optimize, stats

HERE = Path(__file__).parent
R, P, M, RHO = 8.314, 101325.0, 0.04401, 1000.0
THETA_A = (-65000.0, -235.0, 70000.0, 2.5, 1500.0)
THETA_STAR = (-88671.0, -67.056, 35148.0, 141.22, 2000.0, -32055.0, -87.0, 53594.0, 25657.0)


def kernel_values():
    u = sp.symbols("u")
    B = {l: sp.bernoulli(l, u) for l in (1, 2, 4)}

    def k1(a, b):
        a, b = sp.Rational(a), sp.Rational(b)
        d = abs(a - b)
        return B[1].subs(u, a) * B[1].subs(u, b) + B[2].subs(u, a) * B[2].subs(u, b) - B[4].subs(u, d) / 24

    pts = [("0", "0"), ("1/2", "1/2"), ("1/4", "3/4"), ("1/10", "7/10"), ("1", "0"), ("3/8", "3/8")]
    return {
        "k1": [[a, b, str(k1(a, b)), float(k1(a, b))] for a, b in pts],
        "B2(0)": str(B[2].subs(u, 0)),
        "B4(1)": str(B[4].subs(u, 1)),
        "B1(1/3)": str(B[1].subs(u, sp.Rational(1, 3))),
    }


def _k1_num(a, b):
    b1 = lambda x: x - 0.5
    b2 = lambda x: x * x - x + 1.0 / 6.0
    b4 = lambda x: x**4 - 2 * x**3 + x * x - 1.0 / 30.0
    return b1(a) * b1(b) + b2(a) * b2(b) - b4(np.abs(a - b)) / 24.0


def kernel_spectrum(G=4096, n=10):
    g = (np.arange(G) + 0.5) / G
    Kmat = _k1_num(g[:, None], g[None, :]) / G
    lam = np.linalg.eigvalsh(Kmat)[::-1]
    return lam[:n].tolist()


def profile(p_level, n=61, duration=60.0):
    t = np.linspace(0.0, duration, n)
    T = np.empty(n)
    T[0] = 390.0
    T[1:] = np.linspace(380.0, 320.0, n - 1)
    p = np.full(n, p_level)
    p[0] = p_level + 0.02
    return t, T, p


def sorbent_f(x, T, p, th):
    dH, dS, dHk, gamma, _ = th
    k = gamma * T * math.exp(-dHk / (R * T))
    kappa = math.exp(dS / R) * math.exp(-dH / (R * T)) / P
    return k * ((1 - 2 * x) ** 2 * p * P - x * x / kappa)


def _piecewise(rhs, y0, t, T, p):
    out = [np.array(y0, dtype=float)]
    y = np.array(y0, dtype=float)
    for j in range(len(t) - 1):
        t0, t1 = t[j], t[j + 1]

        def f(s, yy, j=j, t0=t0, t1=t1):
            w = (s - t0) / (t1 - t0)
            return rhs(yy, T[j] * (1 - w) + T[j + 1] * w, p[j] * (1 - w) + p[j + 1] * w)

        sol = integrate.solve_ivp(f, (t0, t1), y, method="Radau", rtol=1e-12, atol=1e-16)
        y = sol.y[:, -1]
        out.append(y.copy())
    return np.array(out)


def sorbent_trajectories():
    res = {}
    for pl in (0.01, 0.1, 0.2):
        t, T, p = profile(pl)
        y = _piecewise(lambda yy, TT, pp: [sorbent_f(yy[0], TT, pp, THETA_A)], [0.0], t, T, p)
        res[str(pl)] = {"t": t.tolist(), "x": y[:, 0].tolist(), "w": (M * THETA_A[4] / RHO * y[:, 0]).tolist()}
    return res


def reality_f(y, T, p, th):
    x, z = y
    dHx, dSx, dHkx, gx, _, dHz, dSz, dHkz, gz = th
    kapx = math.exp(dSx / R) * math.exp(-dHx / (R * T))
    kapz = math.exp(dSz / R) * math.exp(-dHz / (R * T)) / P
    kx = gx * math.exp(-dHkx / (R * T))
    kz = gz * math.exp(-dHkz / (R * T))
    s = 1 - 2 * x - z
    rz = kz * (s * p * P - z / kapz)
    rx = kx * (s * z - x * x / kapx)
    return [rx, rz - rx]


def reality_trajectories():
    res = {}
    for pl in (0.01, 0.04, 0.075, 0.1, 0.2):
        t, T, p = profile(pl)
        y = _piecewise(lambda yy, TT, pp: reality_f(yy, TT, pp, THETA_STAR), [0.0, 0.0], t, T, p)
        res[str(pl)] = {"x": y[:, 0].tolist(), "z": y[:, 1].tolist(),
                        "w": (M * THETA_STAR[4] / RHO * y[:, 0]).tolist()}
    return res


def equilibria():
    out = []
    for T, pl in ((330.0, 0.1), (360.0, 0.01), (375.0, 0.2), (320.0, 0.5)):
        x = optimize.brentq(lambda v: sorbent_f(v, T, pl, THETA_A), 0.0, 0.5, xtol=1e-16, rtol=1e-15)
        out.append([T, pl, x])
    return out


def reality_equilibria():
    out = []
    for T, pl in ((330.0, 0.1), (370.0, 0.2)):
        sol = optimize.root(lambda y: reality_f(y, T, pl, THETA_STAR), [0.1, 0.1], tol=1e-15, method="hybr")
        out.append([T, pl, float(sol.x[0]), float(sol.x[1])])
    return out


def statistics():
    q = stats.norm.ppf(0.975)
    return {
        "normal_hpd95": [-q, q],
        "exp_hpd95_upper": -math.log(0.05),
        "ig_13_30_mean": 30.0 / 12.0,
    }


def main():
    data = {
        "kernel": kernel_values(),
        "spectrum_G4096": kernel_spectrum(),
        "sorbent_theta": list(THETA_A),
        "sorbent": sorbent_trajectories(),
        "reality": reality_trajectories(),
        "equilibria": equilibria(),
        "reality_equilibria": reality_equilibria(),
        "stats": statistics(),
    }
    (HERE / "reference.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
