import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_bleu, brute_lcs, brute_rouge_l, dense_cider
from warmcap.metrics.nlg import (
    Cider,
    align,
    bleu,
    cider,
    corpus_bleu,
    count_chunks,
    lcs_length,
    meteor,
    rouge_l,
    score_pairs,
    stem,
)

ALPHABET = list("abcdef")
sentences = st.lists(st.sampled_from(ALPHABET), max_size=12)


def random_pairs(count=200, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        h = [str(t) for t in rng.choice(ALPHABET, size=rng.integers(0, 13))]
        r = [str(t) for t in rng.choice(ALPHABET, size=rng.integers(1, 13))]
        pairs.append((h, r))
    return pairs


# -- BLEU ---------------------------------------------------------------------


def test_bleu_brevity_example():
    assert bleu("the cat", "the cat sat", 1) == pytest.approx(math.exp(1 - 3 / 2), abs=1e-15)
    assert round(bleu("the cat", "the cat sat", 1), 4) == 0.6065


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_bleu_identity(n):
    assert bleu("no acute cardiopulmonary process .", "no acute cardiopulmonary process .", n) == 1.0


def test_bleu_zero_unigram_overlap():
    assert bleu("a b", "c d", 4) == 0.0


def test_bleu_empty_hypothesis():
    assert bleu("", "a b", 2) == 0.0


def test_bleu_smooths_missing_higher_orders():
    # unigrams 2/2, bigram 0/1 -> sqrt(1 * 1e-9)
    assert bleu("b a", "a b", 2) == pytest.approx(math.sqrt(1e-9), rel=1e-12)


def test_bleu_order_must_be_in_range():
    with pytest.raises(ValueError):
        bleu("a", "a", 5)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_bleu_matches_brute_force(n):
    worst = max(abs(bleu(h, r, n) - brute_bleu(h, r, n)) for h, r in random_pairs())
    assert worst <= 1e-9


def test_corpus_bleu_pools_counts():
    hyps, refs = ["a b c", "a"], ["a b c", "a b"]
    # unigrams 4/4, bigrams 2/2; c = 4, r = 5
    assert corpus_bleu(hyps, refs, 2) == pytest.approx(math.exp(1 - 5 / 4), abs=1e-12)


def test_corpus_bleu_is_unsmoothed():
    assert corpus_bleu(["b a"], ["a b"], 2) == 0.0


# -- ROUGE-L ------------------------------------------------------------------


def test_rouge_l_hand_case():
    assert rouge_l("a b c d", "a c d") == pytest.approx(6 / 7, abs=1e-15)


def test_rouge_l_identity_and_disjoint():
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b", "c d") == 0.0
    assert rouge_l("", "a") == 0.0


def test_lcs_matches_subsequence_enumeration():
    for h, r in random_pairs(seed=1):
        assert lcs_length(h, r) == brute_lcs(h, r)


def test_rouge_l_matches_brute_force():
    worst = max(abs(rouge_l(h, r) - brute_rouge_l(h, r)) for h, r in random_pairs(seed=2))
    assert worst <= 1e-9


# -- METEOR -------------------------------------------------------------------


def test_meteor_identical_ten_tokens():
    s = " ".join("abcdefghij")
    assert meteor(s, s) == pytest.approx(0.9995, abs=1e-12)


def test_meteor_zero_overlap():
    assert meteor("a b", "c d") == 0.0


def test_meteor_reversal_only_adds_fragmentation():
    ref = "a b c d e".split()
    fwd, rev = meteor(ref, ref), meteor(ref[::-1], ref)
    assert rev < fwd
    # P = R = 1 in both; five singleton chunks
    assert rev == pytest.approx(1 - 0.5 * (5 / 5) ** 3, abs=1e-12)


def test_meteor_weights_recall_over_precision():
    # same match count, recall 1 vs precision 1
    long_hyp = meteor("a b x y", "a b")
    short_hyp = meteor("a", "a b")
    p, r = 0.5, 1.0
    assert long_hyp == pytest.approx(p * r / (0.9 * p + 0.1 * r) * (1 - 0.5 * (1 / 2) ** 3), abs=1e-12)
    assert long_hyp > short_hyp


def test_stem_matching():
    assert stem("effusions") == "effusion"
    assert stem("is") == "is"
    assert align(["effusions"], ["effusion"]) == [(0, 0)]


def test_alignment_prefers_exact_matches():
    assert align(["a", "a"], ["a"]) == [(0, 0)]
    assert count_chunks([(0, 0), (1, 1), (3, 2)]) == 2


# -- CIDEr --------------------------------------------------------------------


def test_cider_matches_dense_tf_idf():
    pairs = random_pairs(seed=3)
    hyps = [h for h, _ in pairs]
    refs = [r for _, r in pairs]
    fast = Cider(refs)
    expected = dense_cider(hyps, refs, refs)
    worst = max(abs(fast.score(h, r) - e) for h, r, e in zip(hyps, refs, expected))
    assert worst <= 1e-9


def test_cider_unique_identical_pair_scores_one():
    corpus = ["p q r s t", "a b", "c d", "e f"]
    assert Cider(corpus).score("p q r s t", "p q r s t") == pytest.approx(1.0, abs=1e-12)


def test_cider_no_shared_ngrams():
    assert Cider(["a b", "c d"]).score("a b", "c d") == 0.0


def test_cider_discounts_common_words():
    corpus = ["the lungs are clear", "the heart the size", "the effusion the", "the x", "the y"]
    ref = "the lungs are clear"
    stop, content = "the the the the", "lungs are clear the"
    scorer = Cider(corpus)
    s_stop, s_content = scorer.score(stop, ref), scorer.score(content, ref)
    assert s_content > s_stop
    assert [s_stop, s_content] == pytest.approx(
        dense_cider([stop.split(), content.split()], [ref.split()] * 2, [d.split() for d in corpus]), abs=1e-12
    )


def test_cider_idf_is_unsmoothed_log_ratio():
    scorer = Cider(["a b", "a c", "d"])
    assert scorer.idf(("a",)) == pytest.approx(math.log(3 / 3))
    assert scorer.idf(("b",)) == pytest.approx(math.log(3 / 2))


def test_cider_scale_flag():
    per, mean = cider(["a b c d"], ["a b c d"], corpus=["a b c d", "e", "f"], scale=10.0)
    assert per[0] == pytest.approx(10.0) and mean == pytest.approx(10.0)


def test_cider_needs_a_corpus():
    with pytest.raises(ValueError):
        Cider([])


# -- properties ---------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(sentences, sentences.filter(bool))
def test_bounded_scores(h, r):
    for n in (1, 2, 3, 4):
        assert 0.0 <= bleu(h, r, n) <= 1.0
    assert 0.0 <= rouge_l(h, r) <= 1.0
    assert 0.0 <= meteor(h, r) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(ALPHABET), min_size=2, max_size=12), st.data())
def test_appending_the_next_reference_token_helps(ref, data):
    k = data.draw(st.integers(1, len(ref) - 1))
    shorter, longer = ref[:k], ref[: k + 1]
    assert bleu(longer, ref, 1) > bleu(shorter, ref, 1)
    assert rouge_l(longer, ref) > rouge_l(shorter, ref)
    assert bleu(longer, ref, 1) == pytest.approx(brute_bleu(longer, ref, 1), abs=1e-12)
    assert rouge_l(longer, ref) == pytest.approx(brute_rouge_l(longer, ref), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(sentences.filter(bool))
def test_identical_pairs_score_maximal(s):
    assert bleu(s, s, 1) == 1.0
    assert rouge_l(s, s) == 1.0
    assert meteor(s, s) == pytest.approx(1 - 0.5 / len(s) ** 3)


def test_score_pairs_flags_empty_inputs():
    pairs = score_pairs(["", "a b"], ["a b", ""])
    assert pairs[0].flags == ["empty_hypothesis"]
    assert pairs[1].flags == ["empty_reference"]
    assert all(v == 0.0 for p in pairs for k, v in p.scores.items() if k != "cider")
