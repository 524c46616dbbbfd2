"""Independent reference computations used by several test modules."""

import itertools

import numpy as np

from tempo.blocks import encoder_forward


def block_causal_mask(N, P):
    m = np.zeros((N * P, N * P))
    for i in range(N * P):
        for j in range(N * P):
            m[i, j] = 1.0 if j // P <= i // P else 0.0
    return m


def pair_score(h_rows, t_rows, w1, w2, v):
    """Mean over all row pairs of v . tanh(W1 h + W2 t), written with loops."""
    total = 0.0
    for h in h_rows:
        for t in t_rows:
            total += float(v @ np.tanh(w1 @ h + w2 @ t))
    return total / (len(h_rows) * len(t_rows))


def naive_table(sample, params, cfg):
    """Recompute every (prefix, candidate) entry from scratch."""
    frames = [sample.frames[i].features.data for i in sample.true_order]
    N, P = len(frames), frames[0].shape[0]
    w1, w2, v = (params[k].data for k in ("add.w1", "add.w2", "add.v"))
    table = np.zeros((N - 1, N - 1))
    for r in range(N - 1):
        prefix = np.concatenate(frames[: r + 1])
        enc = encoder_forward(prefix, block_causal_mask(r + 1, P), params, cfg).data
        h = enc[r * P : (r + 1) * P]
        for c in range(N - 1):
            table[r, c] = pair_score(h, frames[c + 1], w1, w2, v)
    return table


def margin_loss_reference(rho, delta, exclude_used=False):
    """Margin ranking loss written directly from its definition."""
    K = rho.shape[0]
    terms = []
    for n in range(K):  # prefix ending just before true frame n
        for m in range(K):
            if m == n or (exclude_used and m < n):
                continue
            terms.append(max(rho[n, m] - rho[n, n] + delta, 0.0))
    return sum(terms) / len(terms) if terms else 0.0


def exhaustive_best(candidates, score_fn):
    """Argmax of score_fn over all orderings of candidate tags."""
    tags = sorted(c.frame_tag for c in candidates)
    best, best_score = None, -np.inf
    for perm in itertools.permutations(tags):
        s = score_fn(list(perm))
        if s > best_score:
            best, best_score = list(perm), s
    return best, best_score
