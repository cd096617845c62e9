"""Estimators with 3-sigma confidence intervals."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

Z = 3.0  # every interval is nominal 99.73%
MIN_N = 30


class InsufficientData(ValueError):
    """Sample too small for the requested estimator."""


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n: int
    censoring: float = 0.0

    @property
    def lo(self) -> float:
        return self.value - Z * self.stderr

    @property
    def hi(self) -> float:
        return self.value + Z * self.stderr

    def contains(self, x: float, slack: float = 0.0) -> bool:
        return self.lo - slack <= x <= self.hi + slack

    def as_row(self) -> dict:
        row = asdict(self)
        row.update(lo=self.lo, hi=self.hi)
        return row


def _check_n(n: int, minimum: int = MIN_N):
    if n < minimum:
        raise InsufficientData(f"need at least {minimum} samples, got {n}")


def mean_ci(x, censoring: float = 0.0) -> Estimate:
    x = np.asarray(x, dtype=np.float64)
    _check_n(x.size)
    return Estimate(float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)), x.size, censoring)


def batch_mean_ci(x, n_batches: int = 30, censoring: float = 0.0) -> Estimate:
    """Batch means for a serially correlated stationary sequence."""
    x = np.asarray(x, dtype=np.float64)
    _check_n(x.size)
    if n_batches < MIN_N:
        raise InsufficientData("batch means need at least 30 batches")
    size = x.size // n_batches
    if size < 1:
        raise InsufficientData("fewer samples than batches")
    b = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return Estimate(float(x.mean()), float(b.std(ddof=1) / np.sqrt(n_batches)), x.size, censoring)


def _long_run_var(r: np.ndarray, lags: int) -> float:
    r = r - r.mean()
    n = r.size
    v = r @ r / (n - 1)
    for k in range(1, lags + 1):
        v += 2 * (r[:-k] @ r[k:]) / (n - 1)
    return max(v, 0.0)


def ratio_ci(num, den, lags: int = 0, censoring: float = 0.0) -> Estimate:
    """Delta-method interval for ``mean(num) / mean(den)``.

    ``lags`` adds autocovariances of the linearized residuals (1 for
    1-dependent block sequences).
    """
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    _check_n(num.size)
    mden = den.mean()
    if mden == 0:
        raise InsufficientData("denominator mean is zero")
    r = num.mean() / mden
    resid = num - r * den
    se = np.sqrt(_long_run_var(resid, lags) / num.size) / abs(mden)
    return Estimate(float(r), float(se), num.size, censoring)


def block_bootstrap_ci(x, statistic, block_len: int, n_boot: int, rng: np.random.Generator,
                       censoring: float = 0.0) -> Estimate:
    """Moving-block bootstrap standard error of ``statistic`` on rows of ``x``.

    ``x`` may be 1-d or 2-d (rows are kept together, e.g. paired block sums).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    _check_n(n)
    block_len = max(1, int(block_len))
    n_blocks = int(np.ceil(n / block_len))
    starts = rng.integers(0, n - block_len + 1, size=(n_boot, n_blocks))
    offs = np.arange(block_len)
    reps = np.empty(n_boot)
    for b in range(n_boot):
        idx = (starts[b][:, None] + offs[None, :]).ravel()[:n]
        reps[b] = statistic(x[idx])
    return Estimate(float(statistic(x)), float(reps.std(ddof=1)), n, censoring)


def lag_correlation(x, lag: int) -> Estimate:
    """Sample autocorrelation at ``lag``; Bartlett standard error under a 1-dependent null."""
    x = np.asarray(x, dtype=np.float64)
    _check_n(x.size - lag)
    xc = x - x.mean()
    denom = xc @ xc
    if denom == 0:
        return Estimate(0.0, 0.0, x.size)
    rho = lambda k: (xc[:-k] @ xc[k:]) / denom
    r1 = rho(1)
    var = (1 + 2 * r1 * r1) / x.size if lag >= 2 else 1.0 / x.size
    return Estimate(float(rho(lag)), float(np.sqrt(var)), x.size)


@dataclass(frozen=True)
class TwoSampleResult:
    statistic: float
    dof: int
    pvalue: float
    bins: int

    @property
    def passed(self) -> bool:
        # two-sided 3 sigma
        return self.pvalue > 0.0027


def merge_sparse_bins(c1, c2, min_expected: float = 5.0):
    """Greedily merge adjacent bins until every expected count is at least ``min_expected``."""
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    frac1 = c1.sum() / (c1.sum() + c2.sum())
    out1, out2 = [], []
    a1 = a2 = 0.0
    for u, v in zip(c1, c2):
        a1 += u
        a2 += v
        tot = a1 + a2
        if min(tot * frac1, tot * (1 - frac1)) >= min_expected:
            out1.append(a1)
            out2.append(a2)
            a1 = a2 = 0.0
    if a1 + a2 > 0:
        if out1:
            out1[-1] += a1
            out2[-1] += a2
        else:
            out1.append(a1)
            out2.append(a2)
    return np.array(out1), np.array(out2)


def two_sample_multinomial(c1, c2) -> TwoSampleResult:
    """Chi-square homogeneity test of two count vectors over the same ordered bins."""
    m1, m2 = merge_sparse_bins(c1, c2)
    if m1.size < 2:
        return TwoSampleResult(0.0, 0, 1.0, int(m1.size))
    res = sps.chi2_contingency(np.vstack([m1, m2]), correction=False)
    return TwoSampleResult(float(res.statistic), int(res.dof), float(res.pvalue), int(m1.size))


def multinomial_fit(counts, probs) -> TwoSampleResult:
    """Chi-square goodness of fit of ``counts`` against known ``probs`` (bins merged as needed)."""
    counts = np.asarray(counts, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    n = counts.sum()
    exp = probs * n
    keep_c, keep_e = [], []
    ac = ae = 0.0
    for c, e in zip(counts, exp):
        ac += c
        ae += e
        if ae >= 5:
            keep_c.append(ac)
            keep_e.append(ae)
            ac = ae = 0.0
    if keep_c:
        keep_c[-1] += ac
        keep_e[-1] += ae
    kc, ke = np.array(keep_c), np.array(keep_e)
    if kc.size < 2:
        return TwoSampleResult(0.0, 0, 1.0, int(kc.size))
    stat = float(((kc - ke) ** 2 / ke).sum())
    dof = kc.size - 1
    return TwoSampleResult(stat, dof, float(sps.chi2.sf(stat, dof)), int(kc.size))


def slope_ci(x, y) -> Estimate:
    """Least-squares slope with its standard error."""
    res = sps.linregress(np.asarray(x, float), np.asarray(y, float))
    return Estimate(float(res.slope), float(res.stderr), len(x))
