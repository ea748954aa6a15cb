"""Scoring generated reports against references and the JSON documents that carry the results."""

from __future__ import annotations

import json
import math
from importlib import resources
from typing import Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from . import stats
from .corpus import OBSERVATIONS, preprocess_report
from .metrics.ce import binarize, example_based_prf, extract_observations, label_based_prf
from .metrics.nlg import NLG_METRICS, score_pairs

METRICS_SCHEMA_ID = "warmcap-metrics/1"
COMPARE_SCHEMA_ID = "warmcap-compare/1"
CE_METRICS = ("ce_precision", "ce_recall", "ce_f1")
PER_EXAMPLE_METRICS = NLG_METRICS + CE_METRICS


def load_schema(name: str) -> dict:
    return json.loads(resources.files("warmcap").joinpath("schemas", name).read_text())


def validate(document: dict) -> None:
    """Validate a metrics or comparison document against its versioned schema."""
    schema_id = document.get("schema")
    files = {METRICS_SCHEMA_ID: "metrics-v1.json", COMPARE_SCHEMA_ID: "compare-v1.json"}
    if schema_id not in files:
        raise jsonschema.ValidationError(f"unknown schema identifier {schema_id!r}")
    jsonschema.validate(document, load_schema(files[schema_id]))


def _finite(x: float) -> Optional[float]:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def score_reports(
    hyps: Sequence[str],
    refs: Sequence[str],
    ids: Optional[Sequence[str]] = None,
    seed: int = 0,
    resamples: int = stats.BOOTSTRAP_RESAMPLES,
    level: float = stats.CONFIDENCE_LEVEL,
) -> dict:
    """Per-example NLG and CE scores, their means, bootstrap intervals, and CE tables."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("nothing to score")
    ids = [str(i) for i in range(len(hyps))] if ids is None else [str(i) for i in ids]
    hyps = [preprocess_report(h) for h in hyps]
    refs = [preprocess_report(r) for r in refs]
    pairs = score_pairs(hyps, refs)
    gen = [binarize(extract_observations(h)) for h in hyps]
    gt = [binarize(extract_observations(r)) for r in refs]
    ex = example_based_prf(gen, gt)
    lab = label_based_prf(gen, gt)
    per_example = []
    for k, (pair, i) in enumerate(zip(pairs, ids)):
        row = {"id": i, "hypothesis": hyps[k], "reference": refs[k], "flags": pair.flags}
        row.update(pair.scores)
        row.update(dict(zip(CE_METRICS, (float(v) for v in ex.per_example[k]))))
        per_example.append(row)
    aggregate, intervals = {}, {}
    for m in PER_EXAMPLE_METRICS:
        col = np.array([row[m] for row in per_example])
        aggregate[m] = float(col.mean())
        intervals[m] = stats.bootstrap_ci(col, resamples, level, seed).to_json()
    return {
        "n": len(per_example),
        "per_example": per_example,
        "aggregate": aggregate,
        "bootstrap": intervals,
        "ce": {
            "example_based": {"precision": ex.precision, "recall": ex.recall, "f1": ex.f1},
            "label_based": {
                "labels": list(OBSERVATIONS),
                "per_label": lab.table(),
                "macro": {k: _finite(v) for k, v in lab.macro.items()},
                "micro": {k: _finite(v) for k, v in lab.micro.items()},
                "macro_label_counts": lab.macro_counts,
            },
        },
    }


def metrics_document(scores: dict, fingerprint: str, seed: int, source: dict, run_info: Optional[dict] = None) -> dict:
    doc = {"schema": METRICS_SCHEMA_ID, "fingerprint": fingerprint, "seed": int(seed), "source": source}
    doc.update(scores)
    doc["run_info"] = run_info or {}
    return doc


def per_example_column(document: dict, metric: str) -> np.ndarray:
    if metric not in PER_EXAMPLE_METRICS:
        raise KeyError(f"unknown metric {metric!r}; choose from {PER_EXAMPLE_METRICS}")
    return np.array([row[metric] for row in document["per_example"]], dtype=np.float64)


def compare_documents(
    groups: Dict[str, List[dict]], metric: str = "cider", pooling: str = "pooled", alpha: float = 0.05
) -> dict:
    """Levene -> Welch ANOVA -> Games-Howell over groups of metrics documents.

    ``pooled`` concatenates every example score of every run in a group;
    ``run_mean`` uses one value per run (its mean score).
    """
    if len(groups) < 2:
        raise ValueError("comparison needs at least two groups")
    if pooling not in ("pooled", "run_mean"):
        raise ValueError(f"pooling must be 'pooled' or 'run_mean', got {pooling!r}")
    labels, samples, inputs = [], [], []
    for label, docs in groups.items():
        cols = [per_example_column(d, metric) for d in docs]
        samples.append(np.concatenate(cols) if pooling == "pooled" else np.array([c.mean() for c in cols]))
        labels.append(label)
        for d in docs:
            inputs.append({"group": label, "fingerprint": d.get("fingerprint", ""), "seed": d.get("seed", 0)})
    report = stats.compare_groups(samples, labels, alpha)
    return {
        "schema": COMPARE_SCHEMA_ID,
        "metric": metric,
        "pooling": pooling,
        "inputs": inputs,
        **report,
    }


def json_safe(obj):
    """Replace non-finite floats (NaN, +/-inf) with None so documents stay strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_document(document: dict, path) -> None:
    doc = json_safe(document)
    validate(doc)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")
