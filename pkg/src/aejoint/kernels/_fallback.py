"""Pure-Python versions of the compiled kernels, numerically identical."""

import numpy as np


def edit_distance(ref, hyp) -> int:
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def ctc_nll(log_probs, target, blank) -> float:
    log_probs = np.asarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T = log_probs.shape[0]
    L = target.shape[0]
    S = 2 * L + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    if T == 0:
        return np.inf if L else 0.0
    # skip transition s-2 -> s allowed for non-blank labels differing from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    alpha = np.full(S, -np.inf)
    alpha[0] = log_probs[0, blank]
    if S > 1:
        alpha[1] = log_probs[0, ext[1]]
    for t in range(1, T):
        shifted1 = np.concatenate(([-np.inf], alpha))[:S]
        shifted2 = np.where(skip, np.concatenate(([-np.inf, -np.inf], alpha))[:S], -np.inf)
        alpha = np.logaddexp(np.logaddexp(alpha, shifted1), shifted2) + log_probs[t, ext]
    total = alpha[-1] if S == 1 else np.logaddexp(alpha[-1], alpha[-2])
    return float(-total)
