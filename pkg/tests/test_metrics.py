import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aejoint.errors import DegenerateInput, InvalidInput
from aejoint.metrics import accuracy, corpus_wer, uar, wer, word_edit_distance


def brute_edit(a, b):
    """Recursive edit distance with memoisation, written independently of the kernels."""
    memo = {}

    def d(i, j):
        if (i, j) in memo:
            return memo[i, j]
        if i == 0:
            r = j
        elif j == 0:
            r = i
        else:
            r = min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
        memo[i, j] = r
        return r

    return d(len(a), len(b))


def confusion_uar(preds, labels):
    classes = sorted(set(labels))
    idx = {c: k for k, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes) + 1))
    for p, t in zip(preds, labels):
        cm[idx[t], idx.get(p, len(classes))] += 1
    return float(np.mean([cm[k, k] / cm[k].sum() for k in range(len(classes))]))


class TestWer:
    def test_examples(self):
        assert wer("a b c", "a b c") == 0.0
        assert wer("a b c", "a x c") == pytest.approx(1 / 3)
        assert wer("a", "x y") == 2.0
        assert wer(["a", "b"], []) == 1.0

    def test_empty_reference(self):
        with pytest.raises(DegenerateInput):
            wer("", "a")

    def test_randomised_against_brute_force(self):
        rng = np.random.default_rng(0)
        vocab = list("abcde")
        for _ in range(200):
            r = list(rng.choice(vocab, int(rng.integers(1, 9))))
            h = list(rng.choice(vocab, int(rng.integers(0, 9))))
            assert word_edit_distance(r, h) == brute_edit(r, h)
            assert wer(r, h) == brute_edit(r, h) / len(r)

    @settings(max_examples=100, deadline=None)
    @given(r=st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
           h=st.lists(st.sampled_from("abcd"), max_size=8))
    def test_zero_iff_equal_and_relabel_invariant(self, r, h):
        assert (wer(r, h) == 0) == (r == h)
        relabel = dict(zip("abcd", ["w", "x", "y", "z"]))
        assert wer([relabel[w] for w in r], [relabel[w] for w in h]) == wer(r, h)

    def test_corpus_wer(self):
        assert corpus_wer(["a b", "c d e f"], ["a b", "c x e"]) == pytest.approx(2 / 6)
        with pytest.raises(InvalidInput):
            corpus_wer(["a"], [])


class TestClassification:
    def test_perfect(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert uar([1, 2, 3], [1, 2, 3]) == 1.0

    def test_two_class_recalls(self):
        assert uar([0, 0, 1, 0], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_majority_predictor(self):
        labels = [0] * 9 + [1]
        preds = [0] * 10
        assert accuracy(preds, labels) == pytest.approx(0.9)
        assert uar(preds, labels) == pytest.approx(0.5)

    def test_absent_class(self):
        with pytest.raises(DegenerateInput):
            uar([0, 1], [0, 0], classes=[0, 1])

    def test_length_mismatch(self):
        with pytest.raises(InvalidInput):
            accuracy([1], [1, 2])
        with pytest.raises(InvalidInput):
            uar([1], [1, 2])

    def test_randomised_against_confusion_matrix(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n, k = int(rng.integers(1, 40)), int(rng.integers(1, 6))
            labels = list(rng.integers(0, k, n))
            preds = list(rng.integers(0, k + 1, n))
            assert uar(preds, labels) == pytest.approx(confusion_uar(preds, labels), abs=1e-15)
            assert accuracy(preds, labels) == sum(p == t for p, t in zip(preds, labels)) / n

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 31))
    def test_uar_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        labels = list(rng.integers(0, 3, 20))
        preds = list(rng.integers(0, 3, 20))
        perm = rng.permutation(20)
        assert uar([preds[i] for i in perm], [labels[i] for i in perm]) == pytest.approx(uar(preds, labels))
