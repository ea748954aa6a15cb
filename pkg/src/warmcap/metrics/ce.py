"""Clinical-efficacy scoring: a rule labeler over report text, binarisation,
and example- and label-based precision/recall/F1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..corpus import GRAMMAR, NO_ACUTE_FINDINGS, OBSERVATIONS, ObservationAnnotation, ObservationClass

POS, NEG, UNC, NONE = (
    ObservationClass.POSITIVE,
    ObservationClass.NEGATIVE,
    ObservationClass.UNCERTAIN,
    ObservationClass.NO_MENTION,
)

# Exact sentence -> (observation, class), the inverse of the template grammar.
SENTENCE_TABLE: Dict[str, Tuple[str, ObservationClass]] = {
    sentence.rstrip(" ."): (name, cls) for name, row in GRAMMAR.items() for cls, sentence in row.items()
}

# Fallback for sentences outside the grammar: keyword stems per observation.
KEYWORDS: Dict[str, Tuple[str, ...]] = {
    "enlarged cardiomediastinum": ("mediastin",),
    "cardiomegaly": ("cardiomegaly", "heart"),
    "lung opacity": ("opacit",),
    "lung lesion": ("nodule", "lesion", "mass"),
    "edema": ("edema",),
    "consolidation": ("consolidation",),
    "pneumonia": ("pneumonia",),
    "atelectasis": ("atelectasis",),
    "pneumothorax": ("pneumothorax",),
    "pleural effusion": ("effusion",),
    "pleural other": ("thickening",),
    "fracture": ("fracture",),
    "support devices": ("device", "line", "tube", "catheter"),
}
NEGATION_CUES = ("no", "without", "normal", "clear", "negative", "free")
UNCERTAINTY_CUES = ("possible", "possibly", "may", "likely", "probable", "suggest", "suspected")

# When one observation is mentioned more than once, the higher rank wins.
_PRIORITY = {POS: 3, UNC: 2, NEG: 1, NONE: 0}


def _sentences(text: str) -> List[str]:
    return [s.strip() for s in text.lower().split(".") if s.strip()]


def _keyword_class(words: List[str]) -> ObservationClass:
    if any(w in UNCERTAINTY_CUES for w in words):
        return UNC
    if any(w in NEGATION_CUES for w in words):
        return NEG
    return POS


def extract_observations(text: str) -> ObservationAnnotation:
    """Label a report: grammar sentences by exact lookup, anything else by keywords."""
    found: Dict[str, ObservationClass] = {}

    def record(name: str, cls: ObservationClass) -> None:
        if _PRIORITY[cls] > _PRIORITY[found.get(name, NONE)]:
            found[name] = cls

    for sentence in _sentences(text):
        key = " ".join(sentence.split())
        if key in SENTENCE_TABLE:
            record(*SENTENCE_TABLE[key])
            continue
        if key == NO_ACUTE_FINDINGS.rstrip(" ."):
            continue
        words = key.split()
        cls = _keyword_class(words)
        for name, stems in KEYWORDS.items():
            if any(w.startswith(s) for w in words for s in stems):
                record(name, cls)
    return ObservationAnnotation.from_dict(found)


def binarize(annotation) -> np.ndarray:
    """Positive -> True; negative, uncertain and no-mention -> False."""
    classes = annotation.classes if isinstance(annotation, ObservationAnnotation) else annotation
    arr = np.asarray([int(c) for c in classes])
    if arr.shape != (len(OBSERVATIONS),):
        raise ValueError(f"expected {len(OBSERVATIONS)} observation classes, got shape {arr.shape}")
    return arr == int(POS)


def _as_matrix(rows) -> np.ndarray:
    m = np.asarray([binarize(r) if isinstance(r, ObservationAnnotation) else np.asarray(r, dtype=bool) for r in rows])
    if m.ndim != 2:
        m = m.reshape(len(rows), -1)
    return m.astype(bool)


def _ratio(num: np.ndarray, den: np.ndarray, both_empty: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    out[~ok & both_empty] = 1.0
    return out


def _f1(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


@dataclass
class ExampleScores:
    precision: float
    recall: float
    f1: float
    per_example: np.ndarray  # (n, 3)


def example_based_prf(gen, gt) -> ExampleScores:
    """Per-example P = |gen & gt| / |gen|, R = |gen & gt| / |gt|, averaged over examples.

    An empty denominator scores 1 when both sets are empty and 0 otherwise.
    """
    if len(gen) != len(gt):
        raise ValueError(f"generated ({len(gen)}) and ground-truth ({len(gt)}) lists differ in length")
    if len(gen) == 0:
        raise ValueError("no examples to score")
    g, t = _as_matrix(gen), _as_matrix(gt)
    inter = (g & t).sum(1)
    ng, nt = g.sum(1), t.sum(1)
    both_empty = (ng == 0) & (nt == 0)
    p = _ratio(inter, ng, both_empty)
    r = _ratio(inter, nt, both_empty)
    f = _f1(p, r)
    f[both_empty] = 1.0
    return ExampleScores(float(p.mean()), float(r.mean()), float(f.mean()), np.stack([p, r, f], axis=1))


@dataclass
class LabelScores:
    labels: Tuple[str, ...]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray  # nan where undefined
    recall: np.ndarray
    f1: np.ndarray
    macro: Dict[str, float]
    micro: Dict[str, float]
    macro_counts: Dict[str, int]

    def table(self) -> List[dict]:
        def clean(x):
            return None if np.isnan(x) else float(x)

        return [
            {
                "label": name,
                "tp": int(self.tp[i]),
                "fp": int(self.fp[i]),
                "fn": int(self.fn[i]),
                "precision": clean(self.precision[i]),
                "recall": clean(self.recall[i]),
                "f1": clean(self.f1[i]),
            }
            for i, name in enumerate(self.labels)
        ]


def label_based_prf(gen, gt, labels: Sequence[str] = OBSERVATIONS) -> LabelScores:
    """Per-label P/R/F1 over examples, with macro and micro averages.

    Labels whose precision (or recall) has a zero denominator are left
    undefined and excluded from that macro average; the number of labels
    contributing is reported in ``macro_counts``.
    """
    if len(gen) != len(gt):
        raise ValueError(f"generated ({len(gen)}) and ground-truth ({len(gt)}) lists differ in length")
    g, t = _as_matrix(gen), _as_matrix(gt)
    tp = (g & t).sum(0)
    fp = (g & ~t).sum(0)
    fn = (~g & t).sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), np.nan)
        r = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), np.nan)
        f = np.where(np.isnan(p) | np.isnan(r), np.nan, _f1(np.nan_to_num(p), np.nan_to_num(r)))
    macro, counts = {}, {}
    for key, arr in (("precision", p), ("recall", r), ("f1", f)):
        ok = ~np.isnan(arr)
        counts[key] = int(ok.sum())
        macro[key] = float(arr[ok].mean()) if ok.any() else float("nan")
    TP, FP, FN = int(tp.sum()), int(fp.sum()), int(fn.sum())
    mp = TP / (TP + FP) if TP + FP else float("nan")
    mr = TP / (TP + FN) if TP + FN else float("nan")
    mf = 2 * mp * mr / (mp + mr) if TP else (0.0 if (TP + FP) and (TP + FN) else float("nan"))
    return LabelScores(tuple(labels), tp, fp, fn, p, r, f, macro, {"precision": mp, "recall": mr, "f1": mf}, counts)


def ce_scores(hyp_texts: Sequence[str], ref_texts: Sequence[str]) -> Tuple[ExampleScores, LabelScores]:
    """Label both sides with the rule labeler and score them."""
    gen = [binarize(extract_observations(h)) for h in hyp_texts]
    gt = [binarize(extract_observations(r)) for r in ref_texts]
    return example_based_prf(gen, gt), label_based_prf(gen, gt)
