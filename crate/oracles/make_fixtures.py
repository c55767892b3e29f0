"""Independent reference values for the Rust test-suite.

Run from the repo root: python3 oracles/make_fixtures.py
Outputs are frozen under crates/core/tests/fixtures/ and only regenerated
deliberately.
"""
import csv
import os

import mpmath as mp
import numpy as np
import sympy as sp

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")
mp.mp.dps = 40


def poisson():
    x, y = sp.symbols("x y")
    cs = [sp.Rational(-4, 5), 0, sp.Rational(4, 5)]
    u = sum(sp.exp(-100 * (x - c) ** 2) for c in cs) - sum(sp.exp(-100 * (y - c) ** 2) for c in cs)
    uxx = sp.diff(u, x, 2)
    uyy = sp.diff(u, y, 2)
    f = -(uxx + uyy)
    fn = {k: sp.lambdify((x, y), e, "mpmath") for k, e in dict(u=u, uxx=uxx, uyy=uyy, f=f).items()}
    rng = np.random.default_rng(20240611)
    pts = rng.uniform(-1.0, 1.0, size=(1000, 2))
    with open(os.path.join(OUT, "poisson_derivatives.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "u", "uxx", "uyy", "f"])
        for px, py in pts:
            vals = [fn[k](mp.mpf(float(px)), mp.mpf(float(py))) for k in ("u", "uxx", "uyy", "f")]
            w.writerow([repr(float(px)), repr(float(py))] + [mp.nstr(v, 25) for v in vals])


def adam():
    lr, b1, b2, eps = mp.mpf("0.1"), mp.mpf("0.9"), mp.mpf("0.999"), mp.mpf("1e-8")
    w, m, v = mp.mpf(1), mp.mpf(0), mp.mpf(0)
    rows = []
    for t in range(1, 11):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (mp.sqrt(vh) + eps)
        rows.append((t, w))
    with open(os.path.join(OUT, "adam_quadratic.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "w"])
        for t, val in rows:
            wr.writerow([t, mp.nstr(val, 25)])


def burgers():
    # Cole-Hopf, integrals by adaptive mpmath quadrature (not Gauss-Hermite).
    nu = mp.mpf("0.01") / mp.pi
    pts = [(0.5, 0.5), (-0.5, 0.5), (0.25, 0.25), (0.8, 0.9), (-0.3, 0.1), (0.0, 0.7),
           (0.1, 1.0), (-0.9, 0.4), (0.6, 0.05), (0.02, 0.3),
           (0.7, 1.0 / 255.0), (0.004, 1.0), (-0.01, 0.6), (0.999, 0.2)]
    with open(os.path.join(OUT, "burgers_cole_hopf.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "t", "u"])
        for px, pt in pts:
            X, T = mp.mpf(px), mp.mpf(pt)
            s = mp.sqrt(4 * nu * T)
            # eta = s * z; the constant exp(1/(2 pi nu)) factor cancels
            def f(eta):
                return mp.exp(-mp.cos(mp.pi * (X - eta)) / (2 * mp.pi * nu) - (eta / s) ** 2)
            lo, hi = -12 * s, 12 * s
            brk = list(mp.linspace(lo, hi, 41))
            num = mp.quad(lambda e: mp.sin(mp.pi * (X - e)) * f(e), brk)
            den = mp.quad(f, brk)
            wr.writerow([repr(px), repr(pt), mp.nstr(-num / den, 20)])


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    poisson()
    adam()
    burgers()
