#!/usr/bin/env python3
"""Regenerate the ADF oracle fixture used by the stationarity tests.

Runs statsmodels' adfuller (constant-only regression, fixed lag) over a set
of seeded AR(1) and random-walk series and freezes the statistics and
p-values into crates/core/tests/fixtures/adf_oracle.tsv.

Usage: python3 tools/adf_oracle.py
"""

import os

import numpy as np
from statsmodels.tsa.adfvalues import mackinnonp
from statsmodels.tsa.stattools import adfuller

T = 179
SCHWERT_LAG = 13  # floor(12 * (179/100) ** 0.25)
OUT = os.path.join(
    os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures", "adf_oracle.tsv"
)


def ar1(rng, phi, n=T):
    x = np.empty(n)
    x[0] = rng.standard_normal() / np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + rng.standard_normal()
    return x


def random_walk(rng, n=T):
    return np.cumsum(rng.standard_normal(n))


def row(role, kind, phi, lag, series):
    stat, pvalue, usedlag, nobs = adfuller(
        series, maxlag=lag, regression="c", autolag=None
    )[:4]
    assert usedlag == lag and nobs == T - 1 - lag
    # cross-check the response-surface evaluation path
    assert abs(mackinnonp(stat, regression="c", N=1) - pvalue) < 1e-12
    vals = ",".join("%.17g" % v for v in series)
    return "%s\t%s\t%g\t%d\t%.17g\t%.17g\t%s" % (role, kind, phi, lag, stat, pvalue, vals)


def main():
    rng = np.random.default_rng(20260809)
    rows = []

    # 50 criterion series at the Schwert lag: 12 each of AR(0.3/0.6/0.9), 14 walks
    for phi in (0.3, 0.6, 0.9):
        for _ in range(12):
            rows.append(row("crit", "ar1", phi, SCHWERT_LAG, ar1(rng, phi)))
    for _ in range(14):
        rows.append(row("crit", "rw", 0.0, SCHWERT_LAG, random_walk(rng)))

    # example series for the operation-level fixtures (lag 4)
    while True:
        s = ar1(rng, 0.5)
        r = row("ex_ar05", "ar1", 0.5, 4, s)
        if float(r.split("\t")[5]) < 0.01:
            rows.append(r)
            break
    while True:
        s = random_walk(rng)
        r = row("ex_rw", "rw", 0.0, 4, s)
        if float(r.split("\t")[5]) > 0.1:
            rows.append(r)
            break

    with open(OUT, "w") as f:
        f.write("# role\tkind\tphi\tlag\tstat\tpvalue\tvalues(comma-separated)\n")
        f.write("\n".join(rows) + "\n")
    print("wrote %s (%d rows)" % (OUT, len(rows)))


if __name__ == "__main__":
    main()
