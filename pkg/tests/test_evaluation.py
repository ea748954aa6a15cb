import json

import jsonschema
import numpy as np
import pytest

from oracles import welch_anova_direct
from warmcap.corpus import sample_annotation, template
from warmcap.evaluation import (
    COMPARE_SCHEMA_ID,
    METRICS_SCHEMA_ID,
    PER_EXAMPLE_METRICS,
    compare_documents,
    json_safe,
    metrics_document,
    per_example_column,
    score_reports,
    validate,
    write_document,
)


def reports(seed, n=8):
    rng = np.random.default_rng(seed)
    return [template(sample_annotation(rng, "clinical")) for _ in range(n)]


def doc_for(hyps, refs, seed=0):
    return metrics_document(score_reports(hyps, refs, seed=seed, resamples=50), "fp", seed, {"mode": "test"})


def test_metrics_document_is_schema_valid(tmp_path):
    refs = reports(0)
    doc = doc_for(reports(1), refs)
    write_document(doc, tmp_path / "m.json")
    back = json.loads((tmp_path / "m.json").read_text())
    validate(back)
    assert back["schema"] == METRICS_SCHEMA_ID
    assert set(PER_EXAMPLE_METRICS) <= set(back["aggregate"])
    assert back["n"] == len(refs)


def test_self_scores():
    refs = reports(2)
    scores = score_reports(refs, refs, resamples=20)
    assert scores["aggregate"]["ce_f1"] == 1.0
    assert scores["aggregate"]["bleu_4"] == pytest.approx(1.0)
    assert scores["ce"]["label_based"]["micro"]["f1"] == 1.0


def test_aggregate_is_the_column_mean():
    doc = doc_for(reports(3), reports(4))
    for m in PER_EXAMPLE_METRICS:
        assert doc["aggregate"][m] == pytest.approx(per_example_column(doc, m).mean(), abs=1e-15)
    with pytest.raises(KeyError):
        per_example_column(doc, "spice")


def test_score_reports_checks_lengths():
    with pytest.raises(ValueError):
        score_reports(["a"], [])
    with pytest.raises(ValueError):
        score_reports([], [])


def test_invalid_documents_are_rejected():
    doc = json_safe(doc_for(reports(5, 3), reports(6, 3)))
    validate(doc)
    with pytest.raises(jsonschema.ValidationError):
        validate(dict(doc, schema="other/9"))
    bad = json.loads(json.dumps(doc))
    bad["per_example"][0]["bleu_1"] = 1.5
    with pytest.raises(jsonschema.ValidationError):
        validate(bad)
    del bad["aggregate"]
    with pytest.raises(jsonschema.ValidationError):
        validate(bad)


def test_json_safe_replaces_non_finite():
    assert json_safe({"a": [float("nan"), np.float64(2.0), np.int64(3)], "b": np.bool_(True)}) == {
        "a": [None, 2.0, 3], "b": True
    }


def test_compare_pooled_uses_every_example(tmp_path):
    refs = reports(10, 12)
    good = [doc_for(refs[:6] + reports(14, 6), refs)]
    bad = [doc_for(reports(11, 12), refs), doc_for(reports(12, 12), refs)]
    out = compare_documents({"good": good, "bad": bad}, "cider")
    assert out["schema"] == COMPARE_SCHEMA_ID
    samples = [per_example_column(good[0], "cider"),
               np.concatenate([per_example_column(d, "cider") for d in bad])]
    f, d1, d2 = welch_anova_direct([list(s) for s in samples])
    assert out["welch_anova"]["statistic"] == pytest.approx(f, rel=1e-9)
    write_document(out, tmp_path / "c.json")
    assert [i["group"] for i in out["inputs"]] == ["good", "bad", "bad"]


def test_compare_run_mean_and_argument_checks():
    refs = reports(13, 6)
    docs = {k: [doc_for(reports(20 + i + 10 * j, 6), refs) for i in range(3)] for j, k in enumerate("ab")}
    out = compare_documents(docs, "bleu_1", pooling="run_mean")
    assert [g["n"] for g in out["groups"]] == [3, 3]
    with pytest.raises(ValueError):
        compare_documents({"a": docs["a"]})
    with pytest.raises(ValueError):
        compare_documents(docs, pooling="median")
