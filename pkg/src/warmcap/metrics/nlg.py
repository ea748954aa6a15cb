"""Word-overlap metrics over tokenised hypothesis/reference pairs.

Inputs are token lists (or whitespace-tokenised strings). One reference per
hypothesis is the tested path; BLEU also accepts a list of references.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

Tokens = Union[str, Sequence[str]]

BLEU_EPSILON = 1e-9
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0


def _tokens(x: Tokens) -> List[str]:
    return x.split() if isinstance(x, str) else list(x)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _references(ref) -> List[List[str]]:
    if isinstance(ref, str):
        return [ref.split()]
    ref = list(ref)
    if ref and not isinstance(ref[0], str):
        return [_tokens(r) for r in ref]
    return [ref]


def _clipped(hyp: List[str], refs: List[List[str]], n: int) -> Tuple[int, int]:
    counts = ngrams(hyp, n)
    max_ref: Counter = Counter()
    for r in refs:
        for g, c in ngrams(r, n).items():
            max_ref[g] = max(max_ref[g], c)
    matches = sum(min(c, max_ref[g]) for g, c in counts.items())
    return matches, max(len(hyp) - n + 1, 0)


def _closest_ref_len(c: int, refs: List[List[str]]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c >= r else math.exp(1.0 - r / c)


def bleu(hyp: Tokens, ref, n: int = 4, epsilon: float = BLEU_EPSILON) -> float:
    """Example-level BLEU-n: geometric mean of clipped 1..n-gram precisions times
    the brevity penalty. Zero precisions of order >= 2 are replaced by
    ``epsilon``; no unigram overlap (or an empty hypothesis) scores 0.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    h = _tokens(hyp)
    refs = _references(ref)
    if not h:
        return 0.0
    log_p = 0.0
    for i in range(1, n + 1):
        m, total = _clipped(h, refs, i)
        if i == 1 and m == 0:
            return 0.0
        p = m / total if total and m else epsilon
        log_p += math.log(p)
    return brevity_penalty(len(h), _closest_ref_len(len(h), refs)) * math.exp(log_p / n)


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence, n: int = 4) -> float:
    """Corpus BLEU-n from pooled clipped counts, unsmoothed."""
    if len(hyps) != len(refs):
        raise ValueError("hypotheses and references differ in length")
    matches = np.zeros(n)
    totals = np.zeros(n)
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        h = _tokens(hyp)
        rs = _references(ref)
        c += len(h)
        r += _closest_ref_len(len(h), rs)
        for i in range(1, n + 1):
            m, t = _clipped(h, rs, i)
            matches[i - 1] += m
            totals[i - 1] += t
    if c == 0 or (matches == 0).any():
        return 0.0
    return brevity_penalty(c, r) * math.exp(np.mean(np.log(matches / totals)))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, ref: Tokens) -> float:
    """Harmonic mean of LCS recall (over |ref|) and precision (over |hyp|)."""
    h, r = _tokens(hyp), _tokens(ref)
    if not h or not r:
        return 0.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    return 2 * p * rec / (p + rec)


_SUFFIXES = ("ations", "ation", "ments", "ment", "ness", "ings", "ing", "edly", "ies", "ied", "ed", "es", "ly", "s")


def stem(word: str) -> str:
    """Strip the longest listed suffix, keeping a stem of at least three letters."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[: -len(suf)]
    return word


def align(hyp: List[str], ref: List[str]) -> List[Tuple[int, int]]:
    """Greedy left-to-right unigram alignment: exact matches first, then stems."""
    used: Set[int] = set()
    pairs: Dict[int, int] = {}
    for key in (lambda w: w, stem):
        ref_keys = [key(w) for w in ref]
        for i, w in enumerate(hyp):
            if i in pairs:
                continue
            k = key(w)
            for j, rk in enumerate(ref_keys):
                if j not in used and rk == k:
                    pairs[i] = j
                    used.add(j)
                    break
    return sorted(pairs.items())


def count_chunks(pairs: List[Tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(
    hyp: Tokens, ref: Tokens, alpha: float = METEOR_ALPHA, gamma: float = METEOR_GAMMA, beta: float = METEOR_BETA
) -> float:
    """Simplified METEOR: exact and stem unigram matching, no synonymy.

    F_mean = P R / (alpha P + (1 - alpha) R); penalty = gamma (chunks / matches)^beta;
    score = F_mean (1 - penalty).
    """
    h, r = _tokens(hyp), _tokens(ref)
    pairs = align(h, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, rec = m / len(h), m / len(r)
    f_mean = p * rec / (alpha * p + (1 - alpha) * rec)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return f_mean * (1.0 - penalty)


class Cider:
    """Plain CIDEr: mean over n = 1..4 of cosine similarity between TF-IDF n-gram vectors.

    Document frequencies come from the reference corpus given at construction;
    idf(g) = ln(|corpus| / (1 + df(g))).
    """

    def __init__(self, corpus: Sequence[Tokens], max_n: int = 4, scale: float = 1.0):
        docs = [_tokens(d) for d in corpus]
        if not docs:
            raise ValueError("CIDEr needs a non-empty reference corpus")
        self.max_n = max_n
        self.scale = scale
        self.num_docs = len(docs)
        self.df: Counter = Counter()
        for d in docs:
            for n in range(1, max_n + 1):
                self.df.update(ngrams(d, n).keys())
        self._log_n = math.log(self.num_docs)

    def idf(self, gram: tuple) -> float:
        return self._log_n - math.log(1.0 + self.df.get(gram, 0))

    def _vector(self, tokens: List[str], n: int) -> Dict[tuple, float]:
        return {g: c * self.idf(g) for g, c in ngrams(tokens, n).items()}

    @staticmethod
    def _cosine(a: Dict[tuple, float], b: Dict[tuple, float]) -> float:
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        dot = sum(v * b[g] for g, v in a.items() if g in b)
        return dot / (na * nb)

    def score(self, hyp: Tokens, ref: Tokens) -> float:
        h, r = _tokens(hyp), _tokens(ref)
        sims = [self._cosine(self._vector(h, n), self._vector(r, n)) for n in range(1, self.max_n + 1)]
        return self.scale * sum(sims) / self.max_n

    def score_corpus(self, hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> Tuple[np.ndarray, float]:
        if len(hyps) != len(refs):
            raise ValueError("hypotheses and references differ in length")
        per = np.array([self.score(h, r) for h, r in zip(hyps, refs)])
        return per, float(per.mean()) if len(per) else 0.0


def cider(hyps: Sequence[Tokens], refs: Sequence[Tokens], corpus: Optional[Sequence[Tokens]] = None, scale: float = 1.0):
    """Per-example scores and their mean; the IDF table defaults to ``refs``."""
    return Cider(refs if corpus is None else corpus, scale=scale).score_corpus(hyps, refs)


NLG_METRICS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "meteor", "rouge_l", "cider")


@dataclass
class ScoredPair:
    hypothesis: List[str]
    reference: List[str]
    scores: Dict[str, float] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)


def score_pairs(hyps: Sequence[Tokens], refs: Sequence[Tokens], cider_corpus: Optional[Sequence[Tokens]] = None) -> List[ScoredPair]:
    """Example-level scores for every metric; empty inputs are flagged and score 0."""
    if len(hyps) != len(refs):
        raise ValueError("hypotheses and references differ in length")
    scorer = Cider(refs if cider_corpus is None else cider_corpus)
    out = []
    for hyp, ref in zip(hyps, refs):
        h, r = _tokens(hyp), _tokens(ref)
        pair = ScoredPair(h, r)
        if not h:
            pair.flags.append("empty_hypothesis")
        if not r:
            pair.flags.append("empty_reference")
        for n in range(1, 5):
            pair.scores[f"bleu_{n}"] = bleu(h, r, n) if r else 0.0
        pair.scores["meteor"] = meteor(h, r) if r else 0.0
        pair.scores["rouge_l"] = rouge_l(h, r)
        pair.scores["cider"] = scorer.score(h, r)
        out.append(pair)
    return out
