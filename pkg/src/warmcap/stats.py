"""Bootstrap intervals and the unequal-variance comparison pipeline:
Levene -> Welch one-way ANOVA -> Games-Howell pairwise tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special
from scipy.stats import chi2

BOOTSTRAP_RESAMPLES = 1000
CONFIDENCE_LEVEL = 0.95


def _mean(x: np.ndarray) -> float:
    # fsum is correctly rounded, so equal multisets give equal means regardless of order
    return math.fsum(x) / len(x)


def _groups(groups) -> List[np.ndarray]:
    out = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(out) < 2:
        raise ValueError(f"need at least two groups, got {len(out)}")
    for i, g in enumerate(out):
        if len(g) < 2:
            raise ValueError(f"group {i} has {len(g)} observations; at least 2 are needed")
        if not np.isfinite(g).all():
            raise ValueError(f"group {i} contains non-finite scores")
    return out


def _var(x: np.ndarray) -> float:
    m = _mean(x)
    return math.fsum((x - m) ** 2) / (len(x) - 1)


def f_sf(x: float, dfn: float, dfd: float) -> float:
    """Survival function of the F distribution via the regularised incomplete beta."""
    if x <= 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return float(special.betainc(dfd / 2.0, dfn / 2.0, dfd / (dfd + dfn * x)))


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapCI:
    mean: float
    lo: float
    hi: float
    resamples: int
    level: float

    def to_json(self) -> dict:
        return {"mean": self.mean, "lo": self.lo, "hi": self.hi, "resamples": self.resamples, "level": self.level}


def bootstrap_ci(
    scores: Sequence[float], resamples: int = BOOTSTRAP_RESAMPLES, level: float = CONFIDENCE_LEVEL, seed: int = 0
) -> BootstrapCI:
    """Percentile interval of resampled means; resample i draws from its own (seed, i) stream."""
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot bootstrap an empty score list")
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    n = x.size
    means = np.empty(resamples)
    for i in range(resamples):
        idx = np.random.default_rng([seed, i]).integers(0, n, n)
        means[i] = x[idx].mean()
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    mean = _mean(x)
    if x.min() == x.max():
        lo = hi = mean
    return BootstrapCI(mean, float(lo), float(hi), resamples, level)


# ---------------------------------------------------------------------------
# one-way tests


@dataclass
class TestResult:
    statistic: float
    df1: float
    df2: float
    p: float

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "df1": self.df1, "df2": self.df2, "p": self.p}


def _oneway_f(groups: List[np.ndarray]) -> Tuple[float, int, int]:
    k = len(groups)
    n = sum(len(g) for g in groups)
    means = [_mean(g) for g in groups]
    grand = math.fsum(math.fsum(g) for g in groups) / n
    between = 0.0 if max(means) == min(means) else math.fsum(len(g) * (m - grand) ** 2 for g, m in zip(groups, means))
    within = math.fsum(math.fsum((g - m) ** 2) for g, m in zip(groups, means))
    df1, df2 = k - 1, n - k
    if between == 0.0:
        return 0.0, df1, df2
    if within == 0.0:
        return math.inf, df1, df2
    return (between / df1) / (within / df2), df1, df2


def levene(groups, center: str = "mean") -> TestResult:
    """Levene's test: one-way ANOVA on absolute deviations from each group's centre."""
    gs = _groups(groups)
    if center == "mean":
        dev = [np.abs(g - _mean(g)) for g in gs]
    elif center == "median":
        dev = [np.abs(g - np.median(g)) for g in gs]
    else:
        raise ValueError(f"center must be 'mean' or 'median', got {center!r}")
    w, df1, df2 = _oneway_f(dev)
    return TestResult(w, df1, df2, f_sf(w, df1, df2))


def welch_anova(groups) -> TestResult:
    """Welch's heteroscedastic one-way ANOVA with weights n_j / s_j^2."""
    gs = _groups(groups)
    k = len(gs)
    n = np.array([len(g) for g in gs], dtype=np.float64)
    means = np.array([_mean(g) for g in gs])
    var = np.array([_var(g) for g in gs])
    if means.max() == means.min():
        return TestResult(0.0, k - 1, math.nan if (var == 0).any() else _welch_df2(n, n / var, k), 1.0)
    if (var == 0).any():
        return TestResult(math.inf, k - 1, math.nan, 0.0)
    w = n / var
    wsum = w.sum()
    center = (w * means).sum() / wsum
    a = (w * (means - center) ** 2).sum() / (k - 1)
    tmp = ((1 - w / wsum) ** 2 / (n - 1)).sum()
    b = 1 + 2 * (k - 2) / (k * k - 1) * tmp
    f = a / b
    df2 = (k * k - 1) / (3 * tmp)
    return TestResult(float(f), k - 1, float(df2), f_sf(f, k - 1, df2))


def _welch_df2(n, w, k) -> float:
    tmp = ((1 - w / w.sum()) ** 2 / (n - 1)).sum()
    return float((k * k - 1) / (3 * tmp)) if tmp > 0 else math.inf


# ---------------------------------------------------------------------------
# studentized range distribution

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(15)
_GL_LOW_NODES, _GL_LOW_WEIGHTS = np.polynomial.legendre.leggauss(7)


def adaptive_gauss_legendre(
    f: Callable[[np.ndarray], np.ndarray], a: float, b: float, tol: float = 1e-10, max_depth: int = 40
) -> np.ndarray:
    """Integrate a (possibly vector-valued) function over [a, b].

    ``f`` maps an array of nodes (m,) to values (m, ...). Each panel is
    accepted when the 15- and 7-point rules agree to ``tol`` (scaled by the
    panel's share of the interval), otherwise it is bisected.
    """
    total = 0.0
    stack = [(a, b, 0)]
    width = b - a
    while stack:
        lo, hi, depth = stack.pop()
        half, mid = (hi - lo) / 2.0, (hi + lo) / 2.0
        hi_val = f(mid + half * _GL_NODES)
        fine = half * np.tensordot(_GL_WEIGHTS, hi_val, axes=1)
        coarse = half * np.tensordot(_GL_LOW_WEIGHTS, f(mid + half * _GL_LOW_NODES), axes=1)
        err = np.max(np.abs(fine - coarse))
        if err <= tol * max((hi - lo) / width, 1e-6) or depth >= max_depth:
            total = total + fine
        else:
            stack.append((lo, mid, depth + 1))
            stack.append((mid, hi, depth + 1))
    return total


_Z_RANGE = 9.0


def _range_cdf_given_s(w: np.ndarray, k: int) -> np.ndarray:
    """P(range of k standard normals < w) for each w, as k * int phi(z) [Phi(z) - Phi(z - w)]^(k-1) dz."""
    w = np.asarray(w, dtype=np.float64)
    if k == 2:
        return special.erf(w / 2.0)

    def integrand(z):
        z = z[:, None]
        diff = special.ndtr(z) - special.ndtr(z - w[None, :])
        return k * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * np.clip(diff, 0.0, 1.0) ** (k - 1)

    return np.clip(adaptive_gauss_legendre(integrand, -_Z_RANGE, _Z_RANGE, tol=1e-11), 0.0, 1.0)


def _log_scaled_chi_pdf(s: np.ndarray, df: float) -> np.ndarray:
    # density of sqrt(chi2_df / df)
    return (
        (df / 2.0) * math.log(df)
        - special.gammaln(df / 2.0)
        - (df / 2.0 - 1.0) * math.log(2.0)
        + (df - 1.0) * np.log(s)
        - df * s * s / 2.0
    )


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    """CDF of the studentized range with k means and df degrees of freedom.

    Double integral over the scaled chi variable s and the normal variable z,
    both by adaptive Gauss-Legendre. df = inf reduces to the inner integral.
    """
    if k < 2:
        raise ValueError(f"studentized range needs k >= 2, got {k}")
    if df <= 0 or math.isnan(df):
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if q <= 0:
        return 0.0
    if math.isinf(q):
        return 1.0
    if math.isinf(df) or df > 1e5:
        return float(_range_cdf_given_s(np.array([q]), k)[0])
    s_lo = math.sqrt(chi2.ppf(1e-14, df) / df)
    s_hi = math.sqrt(chi2.ppf(1.0 - 1e-14, df) / df)

    def outer(s):
        return np.exp(_log_scaled_chi_pdf(s, df)) * _range_cdf_given_s(q * s, k)

    val = adaptive_gauss_legendre(outer, s_lo, s_hi, tol=1e-10)
    return float(min(max(val, 0.0), 1.0))


def studentized_range_sf(q: float, k: int, df: float) -> float:
    return 1.0 - studentized_range_cdf(q, k, df)


# ---------------------------------------------------------------------------
# Games-Howell


@dataclass
class PairwiseResult:
    group_a: str
    group_b: str
    mean_diff: float
    q: float
    df: float
    p: float
    significant: bool

    def to_json(self) -> dict:
        return {
            "a": self.group_a,
            "b": self.group_b,
            "mean_diff": self.mean_diff,
            "q": self.q,
            "df": self.df,
            "p": self.p,
            "significant": self.significant,
        }


def games_howell(groups, alpha: float = 0.05, labels: Optional[Sequence[str]] = None) -> List[PairwiseResult]:
    """All pairwise Games-Howell comparisons, in (i, j) order with i < j."""
    gs = _groups(groups)
    k = len(gs)
    labels = [str(i) for i in range(k)] if labels is None else [str(x) for x in labels]
    if len(labels) != k:
        raise ValueError("one label per group is required")
    n = [len(g) for g in gs]
    means = [_mean(g) for g in gs]
    se2 = [_var(g) / len(g) for g in gs]
    out = []
    for i in range(k):
        for j in range(i + 1, k):
            diff = means[i] - means[j]
            a, b = se2[i], se2[j]
            denom = math.sqrt((a + b) / 2.0)
            if a + b == 0:
                df = math.inf
            else:
                df = (a + b) ** 2 / (a * a / (n[i] - 1) + b * b / (n[j] - 1))
            if diff == 0:
                q, p = 0.0, 1.0
            elif denom == 0:
                q, p = math.inf, 0.0
            else:
                q = abs(diff) / denom
                p = studentized_range_sf(q, k, df)
            out.append(PairwiseResult(labels[i], labels[j], diff, q, df, p, p < alpha))
    return out


def compare_groups(groups, labels: Optional[Sequence[str]] = None, alpha: float = 0.05, center: str = "mean") -> dict:
    """Run the full pipeline and return a JSON-ready report."""
    gs = _groups(groups)
    labels = [str(i) for i in range(len(gs))] if labels is None else [str(x) for x in labels]
    return {
        "groups": [
            {"label": lab, "n": len(g), "mean": _mean(g), "variance": _var(g)} for lab, g in zip(labels, gs)
        ],
        "levene": dict(levene(gs, center).to_json(), center=center),
        "welch_anova": welch_anova(gs).to_json(),
        "games_howell": [r.to_json() for r in games_howell(gs, alpha, labels)],
        "alpha": alpha,
    }


def format_report(report: dict) -> str:
    """Plain-text rendering of ``compare_groups`` output."""
    lines = ["group                n        mean    variance"]
    for g in report["groups"]:
        lines.append(f"{g['label']:<16} {g['n']:>5} {g['mean']:>11.6f} {g['variance']:>11.6f}")
    lv, wa = report["levene"], report["welch_anova"]
    lines.append(f"Levene ({lv['center']}): W = {lv['statistic']:.6g}, df = ({lv['df1']}, {lv['df2']}), p = {lv['p']:.4g}")
    lines.append(f"Welch ANOVA: F = {wa['statistic']:.6g}, df = ({wa['df1']}, {wa['df2']:.4g}), p = {wa['p']:.4g}")
    lines.append("Games-Howell:")
    for r in report["games_howell"]:
        flag = "*" if r["significant"] else ""
        lines.append(
            f"  {r['a']} vs {r['b']}: diff = {r['mean_diff']:+.6f}, q = {r['q']:.4f}, df = {r['df']:.2f}, p = {r['p']:.4g}{flag}"
        )
    return "\n".join(lines)
