"""Evaluation metrics: accuracy, unweighted average recall and word error rate."""

from __future__ import annotations

from fractions import Fraction
from typing import Hashable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateInput, InvalidInput


def _words(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def word_edit_distance(reference, hypothesis) -> int:
    ref, hyp = _words(reference), _words(hypothesis)
    vocab: dict[Hashable, int] = {}
    r = [vocab.setdefault(w, len(vocab)) for w in ref]
    h = [vocab.setdefault(w, len(vocab)) for w in hyp]
    return kernels.edit_distance(r, h)


def wer(reference, hypothesis) -> float:
    """(substitutions + deletions + insertions) / len(reference). Can exceed 1."""
    ref = _words(reference)
    if not ref:
        raise DegenerateInput("reference must contain at least one word")
    return word_edit_distance(ref, hypothesis) / len(ref)


def corpus_wer(references: Sequence, hypotheses: Sequence) -> float:
    """Total edit errors over total reference words."""
    if len(references) != len(hypotheses):
        raise InvalidInput("reference/hypothesis count mismatch")
    total = sum(len(_words(r)) for r in references)
    if total == 0:
        raise DegenerateInput("references contain no words")
    errors = sum(word_edit_distance(r, h) for r, h in zip(references, hypotheses))
    return errors / total


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    if len(predictions) != len(labels):
        raise InvalidInput("predictions and labels differ in length")
    if not labels:
        raise DegenerateInput("no samples")
    return float(np.mean([p == t for p, t in zip(predictions, labels)]))


def uar(predictions: Sequence, labels: Sequence, classes: Optional[Sequence] = None) -> float:
    """Mean per-class recall. ``classes`` defaults to the classes present in ``labels``."""
    if len(predictions) != len(labels):
        raise InvalidInput("predictions and labels differ in length")
    if not labels:
        raise DegenerateInput("no samples")
    present = list(dict.fromkeys(labels))
    classes = present if classes is None else list(classes)
    # exact rational mean, rounded once, so the value does not depend on class order
    total = Fraction(0)
    for c in classes:
        idx = [i for i, t in enumerate(labels) if t == c]
        if not idx:
            raise DegenerateInput(f"class {c!r} has no samples; recall undefined")
        total += Fraction(sum(predictions[i] == c for i in idx), len(idx))
    return float(total / len(classes))
