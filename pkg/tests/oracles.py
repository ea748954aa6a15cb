"""Independent reference implementations used only by the tests.

Nothing here imports the package's metric or statistics code; each oracle is
written from the textbook definition in the most direct (and slowest) way.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
from scipy import integrate, special


# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# text metrics


def naive_ngrams(tokens, n):
    grams = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        grams[g] = grams.get(g, 0) + 1
    return grams


def brute_bleu(hyp, ref, n, eps=1e-9):
    """Sentence BLEU with add-eps on zero precisions; zero unigram overlap or empty hyp scores 0."""
    if not hyp:
        return 0.0
    logs = []
    for k in range(1, n + 1):
        h, r = naive_ngrams(hyp, k), naive_ngrams(ref, k)
        total = sum(h.values())
        match = 0
        for g, c in h.items():
            match += min(c, r.get(g, 0))
        if k == 1 and match == 0:
            return 0.0
        p = match / total if total else 0.0
        logs.append(math.log(p if p > 0 else eps))
    c, rl = len(hyp), len(ref)
    bp = 1.0 if c >= rl else math.exp(1 - rl / c)
    return bp * math.exp(sum(logs) / n)


def brute_lcs(a, b):
    """Length of the longest common subsequence by enumerating subsequences of the shorter side."""
    if len(a) > len(b):
        a, b = b, a
    for size in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(tok == x for x in it) for tok in sub):
                return size
    return 0


def brute_rouge_l(hyp, ref):
    if not hyp or not ref:
        return 0.0
    l = brute_lcs(hyp, ref)
    if l == 0:
        return 0.0
    p, r = l / len(hyp), l / len(ref)
    return 2 * p * r / (p + r)


def dense_cider(hyps, refs, corpus, max_n=4):
    """Plain CIDEr with dense TF-IDF vectors over the union vocabulary of each n."""
    N = len(corpus)
    scores = []
    for hyp, ref in zip(hyps, refs):
        per_n = []
        for n in range(1, max_n + 1):
            docs = [naive_ngrams(d, n) for d in corpus]
            vocab = sorted(set(naive_ngrams(hyp, n)) | set(naive_ngrams(ref, n)))
            if not vocab:
                per_n.append(0.0)
                continue
            idf = np.array([math.log(N / (1.0 + sum(1 for d in docs if g in d))) for g in vocab])
            hc, rc = naive_ngrams(hyp, n), naive_ngrams(ref, n)
            hv = np.array([hc.get(g, 0) for g in vocab], dtype=float)
            rv = np.array([rc.get(g, 0) for g in vocab], dtype=float)
            hv = hv / max(hv.sum(), 1) * idf
            rv = rv / max(rv.sum(), 1) * idf
            nh, nr = np.linalg.norm(hv), np.linalg.norm(rv)
            per_n.append(float(hv @ rv / (nh * nr)) if nh > 0 and nr > 0 else 0.0)
        scores.append(sum(per_n) / max_n)
    return scores


# ---------------------------------------------------------------------------
# statistics


def f_sf_quadrature(x, d1, d2):
    """P(F > x) by adaptive quadrature of the F density."""
    if x <= 0:
        return 1.0
    logc = special.gammaln((d1 + d2) / 2) - special.gammaln(d1 / 2) - special.gammaln(d2 / 2) + (d1 / 2) * math.log(d1 / d2)

    def pdf(t):
        if t <= 0:
            return 0.0
        return math.exp(logc + (d1 / 2 - 1) * math.log(t) - ((d1 + d2) / 2) * math.log1p(d1 * t / d2))

    lower, _ = integrate.quad(pdf, 0, x, epsabs=1e-14, epsrel=1e-13, limit=500)
    upper, _ = integrate.quad(pdf, x, np.inf, epsabs=1e-14, epsrel=1e-13, limit=500)
    return upper if upper < 0.5 else 1.0 - lower


def betainc_series(a, b, x, terms=20000):
    """Regularised incomplete beta I_x(a, b) by its hypergeometric power series (x < 1)."""
    if x <= 0:
        return 0.0
    if x > (a + 1) / (a + b + 2):
        return 1.0 - betainc_series(b, a, 1 - x, terms)
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - math.log(a) - special.betaln(a, b))
    s, term = 1.0, 1.0
    for n in range(terms):
        term *= (a + b + n) / (a + 1 + n) * x
        s += term
        if term < 1e-17 * s:
            break
    return front * s


def f_sf_series(x, d1, d2):
    if x <= 0:
        return 1.0
    z = d2 / (d2 + d1 * x)
    return betainc_series(d2 / 2, d1 / 2, z)


def welch_anova_direct(groups):
    """Welch's F*, df1, df2 from the textbook formula with plain Python floats."""
    k = len(groups)
    n = [len(g) for g in groups]
    m = [sum(g) / len(g) for g in groups]
    v = [sum((x - mi) ** 2 for x in g) / (len(g) - 1) for g, mi in zip(groups, m)]
    w = [ni / vi for ni, vi in zip(n, v)]
    W = sum(w)
    grand = sum(wi * mi for wi, mi in zip(w, m)) / W
    A = sum(wi * (mi - grand) ** 2 for wi, mi in zip(w, m)) / (k - 1)
    lam = sum((1 - wi / W) ** 2 / (ni - 1) for wi, ni in zip(w, n))
    B = 1 + 2 * (k - 2) / (k * k - 1) * lam
    df2 = (k * k - 1) / (3 * lam)
    return A / B, k - 1, df2


def levene_direct(groups):
    """Mean-centred Levene W with plain Python floats."""
    z = [[abs(x - sum(g) / len(g)) for x in g] for g in groups]
    k = len(z)
    N = sum(len(g) for g in z)
    zm = [sum(g) / len(g) for g in z]
    zall = sum(sum(g) for g in z) / N
    num = (N - k) * sum(len(g) * (m - zall) ** 2 for g, m in zip(z, zm))
    den = (k - 1) * sum(sum((x - m) ** 2 for x in g) for g, m in zip(z, zm))
    return num / den, k - 1, N - k


# ---------------------------------------------------------------------------
# decoding


def exhaustive_best(decoder, visual, max_len):
    """Highest-log-probability sequence by enumerating every token sequence up to ``max_len``.

    A sequence may stop early only with EOS; sequences without EOS must have
    exactly ``max_len`` tokens (the decoding cap).
    """
    V = decoder.config.vocab_size
    eos = decoder.eos_id
    best, best_lp = None, -math.inf
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(V), repeat=length):
            if eos in seq[:-1]:
                continue
            finished = seq[-1] == eos
            if not finished and length < max_len:
                continue
            ids = list(seq[:-1]) if finished else list(seq)
            lp = decoder.sequence_logprob(ids, visual, finished=finished)
            if lp > best_lp:
                best, best_lp = (ids, finished), lp
    return best, best_lp


# ---------------------------------------------------------------------------
# CE


def prf_sets(gen: set, gt: set):
    inter = len(gen & gt)
    p = Fraction(inter, len(gen)) if gen else Fraction(int(not gt))
    r = Fraction(inter, len(gt)) if gt else Fraction(int(not gen))
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f
