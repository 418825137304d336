#!/usr/bin/env python3
"""Regenerates tests/data/specfn_reference.inc.

Each value is computed at 60 significant digits from a defining series
(x <= 20) or a Binet-type integral (x > 20), then cross-checked against mpmath's own implementation before being written.
The arguments are the exact binary64 values of the listed decimals.
"""
import mpmath as mp

mp.mp.dps = 60

POINTS = [1e-3, 2e-3, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.4616321449683623,
          1.5, 2.0, 2.5, 3.0, 4.75, 6.0, 7.5, 9.99, 10.0, 10.5, 15.0, 20.0,
          33.3, 50.0, 100.0, 250.0, 1e3, 1e4, 1e5, 1e6]


def digamma_series(x):
    # psi(x) = -gamma + sum_{n>=0} (1/(n+1) - 1/(n+x))
    return -mp.euler + mp.nsum(lambda n: 1 / (n + 1) - 1 / (n + x), [0, mp.inf])


def trigamma_series(x):
    return mp.nsum(lambda n: 1 / (n + x) ** 2, [0, mp.inf])


def lgamma_series(x):
    # Weierstrass product: ln Gamma(x) = -gamma x - ln x + sum_k (x/k - ln(1 + x/k))
    return -mp.euler * x - mp.log(x) + mp.nsum(lambda k: x / k - mp.log1p(x / k), [1, mp.inf])


def lgamma_binet(x):
    f = lambda t: mp.atan(t / x) / mp.expm1(2 * mp.pi * t)
    return (x - mp.mpf(1) / 2) * mp.log(x) - x + mp.log(2 * mp.pi) / 2 + 2 * mp.quad(f, [0, 1, mp.inf])


def digamma_binet(x):
    f = lambda t: t / ((t * t + x * x) * mp.expm1(2 * mp.pi * t))
    return mp.log(x) - 1 / (2 * x) - 2 * mp.quad(f, [0, 1, mp.inf])


def trigamma_binet(x):
    # derivative of the digamma integral under the integral sign
    f = lambda t: t / ((t * t + x * x) ** 2 * mp.expm1(2 * mp.pi * t))
    return 1 / x + 1 / (2 * x * x) + 4 * x * mp.quad(f, [0, 1, mp.inf])


def main():
    rows = []
    for p in POINTS:
        x = mp.mpf(float(p))
        if x <= 20:
            lg, dg, tg = lgamma_series(x), digamma_series(x), trigamma_series(x)
        else:
            lg, dg, tg = lgamma_binet(x), digamma_binet(x), trigamma_binet(x)
        for a, b in ((lg, mp.loggamma(x)), (dg, mp.digamma(x)), (tg, mp.psi(1, x))):
            assert abs(a - b) <= mp.mpf(10) ** -40 * max(1, abs(b)), (p, a, b)
        rows.append((float(p), lg, dg, tg))
    with open("tests/data/specfn_reference.inc", "w") as out:
        out.write("// Generated by scripts/gen_specfn_reference.py; do not edit.\n")
        out.write("// {x, ln Gamma(x), psi(x), psi'(x)} at 50 significant digits.\n")
        for x, lg, dg, tg in rows:
            out.write("{%r, %s, %s, %s},\n" % (x, mp.nstr(lg, 50), mp.nstr(dg, 50), mp.nstr(tg, 50)))


if __name__ == "__main__":
    main()
