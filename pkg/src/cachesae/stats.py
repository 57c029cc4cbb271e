"""Statistics used by the experiment modules.

Rank tests enumerate the exact permutation distribution (with midranks, so
ties are handled) when both samples have at most ``EXACT_MAX`` elements and
fall back to a tie-corrected normal approximation above that.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats as _st

from .errors import DegenerateError

EXACT_MAX = 12
_Z975 = 1.959963984540054


@dataclass(frozen=True)
class CI:
    low: float
    high: float
    level: float = 0.95
    estimate: float = float("nan")
    degenerate: bool = False

    def __post_init__(self):
        if not self.low <= self.high:
            raise ValueError(f"CI low {self.low} above high {self.high}")

    @property
    def width(self) -> float:
        return self.high - self.low

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p: float
    exact: bool = False
    degenerate: bool = False


def _z(level: float) -> float:
    if level == 0.95:
        return _Z975
    return float(_st.norm.ppf(0.5 + level / 2))


def wilson_ci(successes: int, n: int, level: float = 0.95) -> CI:
    if n < 1:
        raise ValueError("wilson_ci needs n >= 1")
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in [0, n]")
    z = _z(level)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    low = 0.0 if successes == 0 else max(0.0, centre - half)
    high = 1.0 if successes == n else min(1.0, centre + half)
    return CI(float(low), float(high), level, p)


def cliffs_delta(x, y) -> float:
    """(#{x_i > y_j} - #{x_i < y_j}) / (|x| |y|), via sorting."""
    x = np.asarray(x, dtype=np.float64)
    y = np.sort(np.asarray(y, dtype=np.float64))
    if len(x) == 0 or len(y) == 0:
        raise ValueError("cliffs_delta needs non-empty samples")
    less = np.searchsorted(y, x, side="left")           # y_j < x_i
    greater = len(y) - np.searchsorted(y, x, side="right")  # y_j > x_i
    return float((less.sum() - greater.sum()) / (len(x) * len(y)))


def midranks(values) -> np.ndarray:
    return _st.rankdata(values, method="average")


def median_mad(values) -> tuple[float, float]:
    """Median and median absolute deviation divided by sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("median_mad needs at least one value")
    med = float(np.median(v))
    mad = float(np.median(np.abs(v - med)))
    return med, mad / np.sqrt(v.size)


# ----------------------------------------------------------------------------
# exact permutation distributions over doubled midranks
# ----------------------------------------------------------------------------


def _subset_sum_counts(items: np.ndarray, size: int) -> np.ndarray:
    """counts[s] = number of ``size``-subsets of integer ``items`` summing to s."""
    total = int(items.sum())
    dp = np.zeros((size + 1, total + 1), dtype=np.float64)
    dp[0, 0] = 1.0
    for it in items.astype(int):
        dp[1:, it:] = dp[1:, it:] + dp[:-1, :total + 1 - it]
    return dp[size]


def _signed_sum_counts(items: np.ndarray) -> np.ndarray:
    """counts[s] = number of sign assignments whose positive items sum to s."""
    total = int(items.sum())
    dp = np.zeros(total + 1, dtype=np.float64)
    dp[0] = 1.0
    for it in items.astype(int):
        dp = dp + np.concatenate([np.zeros(it), dp[:total + 1 - it]])
    return dp


def _two_sided_from_counts(counts: np.ndarray, observed: int, centre2: int) -> float:
    """P(|T - E| >= |t - E|) with everything in doubled units (``centre2`` = 2E)."""
    s = np.arange(len(counts))
    dev = np.abs(2 * s - centre2)
    p = counts[dev >= abs(2 * observed - centre2)].sum() / counts.sum()
    return float(min(1.0, p))


def mann_whitney(x, y, exact: bool | None = None) -> TestResult:
    """Two-sided Mann-Whitney U; statistic is U for ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ValueError("mann_whitney needs non-empty samples")
    ranks = midranks(np.concatenate([x, y]))
    r1 = ranks[:n].sum()
    U = r1 - n * (n + 1) / 2
    if exact is None:
        exact = n <= EXACT_MAX and m <= EXACT_MAX
    N = n + m
    if np.all(ranks == ranks[0]):
        return TestResult(float(U), 1.0, exact, degenerate=True)
    if exact:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _subset_sum_counts(doubled, n)
        centre2 = 2 * n * (N + 1)  # twice the mean of the doubled rank sum
        p = _two_sided_from_counts(counts, int(round(2 * r1)), centre2)
        return TestResult(float(U), p, True)
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie = (tie_counts ** 3 - tie_counts).sum()
    var = n * m / 12.0 * ((N + 1) - tie / (N * (N - 1)))
    mu = n * m / 2.0
    z = (abs(U - mu) - 0.5) / np.sqrt(var)
    p = 2 * _st.norm.sf(max(z, 0.0))
    return TestResult(float(U), float(min(1.0, p)), False)


def wilcoxon_signed_rank(x, y=None, zero_method: str = "wilcox",
                         exact: bool | None = None) -> TestResult:
    """Two-sided paired Wilcoxon signed-rank test; statistic is W+.

    ``zero_method="wilcox"`` drops zero differences before ranking;
    ``"pratt"`` ranks them and then drops them.
    """
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64)
    if zero_method not in ("wilcox", "pratt"):
        raise ValueError("zero_method must be 'wilcox' or 'pratt'")
    if zero_method == "wilcox":
        d = d[d != 0]
        r = midranks(np.abs(d))
    else:
        r = midranks(np.abs(d))
        keep = d != 0
        d, r = d[keep], r[keep]
    n = len(d)
    if n == 0:
        return TestResult(0.0, 1.0, True, degenerate=True)
    w_plus = float(r[d > 0].sum())
    if exact is None:
        exact = n <= EXACT_MAX
    if exact:
        doubled = np.rint(2 * r).astype(int)
        counts = _signed_sum_counts(doubled)
        p = _two_sided_from_counts(counts, int(round(2 * w_plus)), int(doubled.sum()))
        return TestResult(w_plus, p, True)
    mu = r.sum() / 2.0
    var = (r * r).sum() / 4.0
    if var == 0:
        return TestResult(w_plus, 1.0, False, degenerate=True)
    z = (abs(w_plus - mu) - 0.5) / np.sqrt(var)
    return TestResult(w_plus, float(min(1.0, 2 * _st.norm.sf(max(z, 0.0)))), False)


def ks_2samp(x, y) -> TestResult:
    res = _st.ks_2samp(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return TestResult(float(res.statistic), float(res.pvalue))


@dataclass(frozen=True)
class Correlation:
    r: float
    p: float
    n: int
    degenerate: bool = False


def _corr_p(r: float, n: int) -> float:
    if n < 3:
        return float("nan")
    if abs(r) >= 1.0:
        return 0.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return float(2 * _st.t.sf(abs(t), n - 2))


def pearson(x, y) -> Correlation:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        return Correlation(float("nan"), float("nan"), len(x), degenerate=True)
    r = float(np.clip(xc @ yc / np.sqrt(sxx * syy), -1.0, 1.0))
    return Correlation(r, _corr_p(r, len(x)), len(x))


def spearman(x, y) -> Correlation:
    return pearson(midranks(x), midranks(y))


def rank_tests(x, y, paired: bool = False) -> dict[str, object]:
    out: dict[str, object] = {"mann_whitney": mann_whitney(x, y), "ks_2samp": ks_2samp(x, y)}
    if paired or len(x) == len(y):
        out["wilcoxon"] = wilcoxon_signed_rank(x, y)
        out["pearson"] = pearson(x, y)
        out["spearman"] = spearman(x, y)
    return out


# ----------------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------------


def bootstrap_ci(values, statistic: Callable[[np.ndarray], float] = np.mean,
                 resamples: int = 5000, seed: int = 0, level: float = 0.95) -> CI:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise ValueError("bootstrap_ci needs values")
    rng = np.random.default_rng(seed)
    stats = np.array([statistic(v[rng.integers(0, len(v), size=len(v))]) for _ in range(resamples)])
    lo, hi = np.quantile(stats, [(1 - level) / 2, (1 + level) / 2])
    est = float(statistic(v))
    return CI(float(min(lo, est)), float(max(hi, est)), level, est)


def cluster_bootstrap(values, clusters, statistic: Callable[[np.ndarray], float] = np.mean,
                      resamples: int = 5000, seed: int = 0, level: float = 0.95) -> CI:
    """Percentile CI resampling whole clusters with replacement.

    Clusters are ordered by first appearance, so singleton clusters reproduce
    :func:`bootstrap_ci` draw for draw.  The interval is widened to contain the
    point estimate if needed.
    """
    v = np.asarray(values, dtype=np.float64)
    labels = np.asarray(clusters)
    if len(v) != len(labels) or len(v) == 0:
        raise ValueError("values and clusters must be non-empty and aligned")
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first)
    groups_sorted = [np.flatnonzero(inverse == g) for g in order]
    est = float(statistic(v))
    if len(groups_sorted) < 2:
        return CI(est, est, level, est, degenerate=True)
    rng = np.random.default_rng(seed)
    G = len(groups_sorted)
    stats = np.empty(resamples)
    for b in range(resamples):
        pick = rng.integers(0, G, size=G)
        stats[b] = statistic(v[np.concatenate([groups_sorted[g] for g in pick])])
    lo, hi = np.quantile(stats, [(1 - level) / 2, (1 + level) / 2])
    return CI(float(min(lo, est)), float(max(hi, est)), level, est)


# ----------------------------------------------------------------------------
# multiple comparisons and shape
# ----------------------------------------------------------------------------


def holm(pvalues: Sequence[float]) -> np.ndarray:
    """Holm step-down adjusted p-values, in the input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for i, idx in enumerate(order):
        running = max(running, min(1.0, (m - i) * p[idx]))
        adj[idx] = running
    return adj


def bonferroni(pvalues: Sequence[float]) -> np.ndarray:
    p = np.asarray(pvalues, dtype=np.float64)
    return np.minimum(1.0, p * len(p))


def bimodality_coefficient(values) -> float:
    """Sarle's coefficient (g^2 + 1) / (k + 3 (n-1)^2 / ((n-2)(n-3)))."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 4:
        raise DegenerateError("bimodality coefficient needs n >= 4")
    g = _st.skew(v, bias=False)
    k = _st.kurtosis(v, bias=False)
    return float((g * g + 1) / (k + 3 * (n - 1) ** 2 / ((n - 2) * (n - 3))))
