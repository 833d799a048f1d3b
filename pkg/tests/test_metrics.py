import numpy as np
import pytest
from hypothesis import given, strategies as st

from micap.metrics import CiderScorer, accuracy, cider, multilabel_avg_accuracy

REF_A = "signet ring cells infiltrate the mucosa"
REF_B = "granulomas with multinucleated giant cells present"


def test_accuracy_cases():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 1, 0], [1, 0, 1]) == 0.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])


def test_multilabel_one_label_always_wrong():
    labels = np.random.default_rng(0).integers(0, 2, (30, 22))
    preds = labels.copy()
    preds[:, 7] = 1 - preds[:, 7]
    assert multilabel_avg_accuracy(preds, labels) == pytest.approx(21 / 22, abs=1e-15)


def test_two_image_oracle():
    # every n-gram occurs in exactly one of the two images, so idf = ln 2 for all of them
    # and each self-match cosine is exactly 1; the disjoint image shares no n-gram at all
    refs = [[REF_A], [REF_B]]
    mean, scores = cider([REF_A, REF_B], refs)
    assert abs(scores[0] - 10.0) < 1e-9 and abs(scores[1] - 10.0) < 1e-9
    _, crossed = cider([REF_B, REF_A], refs)
    assert np.all(np.abs(crossed) < 1e-9)


def test_hand_computed_partial_match():
    # one shared unigram "cells" (df 2 -> idf 0) contributes nothing; candidate "signet ring" against REF_A:
    # unigram cosine = 2/sqrt(2*6), bigram cosine = 1/sqrt(1*5), tri/4-gram vectors of the candidate are empty
    scorer = CiderScorer([[REF_A], [REF_B]])
    uni = 2 / np.sqrt(2 * 5)  # "cells" has idf 0, leaving 5 weighted unigrams in the reference
    bi = 1 / np.sqrt(5)
    assert scorer.score("signet ring", [REF_A]) == pytest.approx(10 * (uni + bi) / 4, abs=1e-12)


def test_empty_candidate_scores_zero_and_needs_references():
    scorer = CiderScorer([[REF_A], [REF_B]])
    assert scorer.score("", [REF_A]) == 0.0
    with pytest.raises(ValueError):
        scorer.score(REF_A, [])


words = st.sampled_from("cells tumour gland nuclei stroma the a with of necrosis".split())


@given(st.lists(words, min_size=1, max_size=8), st.lists(words, min_size=1, max_size=8))
def test_self_match_is_maximal(a, b):
    corpus = [[" ".join(a)], [" ".join(b)], ["unrelated background text here"]]
    scorer = CiderScorer(corpus)
    ref = [" ".join(a)]
    assert scorer.score(" ".join(a), ref) >= scorer.score(" ".join(b), ref) - 1e-12
