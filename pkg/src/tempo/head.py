"""Frame-ordering head: block-causal history encoding, transition scores,
the margin ranking loss, and ordering decoders.

Frame indices in this module are 0-based: frame 0 is the anchor and the
candidates are frames 1..N-1. A transition table row ``r`` holds the scores
of every candidate given the true prefix of length ``r + 1``, and column
``c`` is true frame ``c + 1``, so the correct successor of row ``r`` sits on
the diagonal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from tempo import autodiff as ad
from tempo.autodiff import Tensor
from tempo.blocks import ModelConfig, additive_attention, as_params, encoder_forward, linear, pairwise_scores
from tempo.errors import ContractError, LimitError, ShapeError

# Upper bound on elements of one (rows, cols, D) tanh block.
_CHUNK_ELEMS = 1 << 22
MAX_BRUTE_FORCE_FRAMES = 7


@dataclass(frozen=True)
class ProposalSet:
    features: Tensor
    frame_tag: Hashable = 0

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            object.__setattr__(self, "features", Tensor(self.features))
        if self.features.ndim != 2:
            raise ShapeError(f"proposal set must be (P, D), got {self.features.shape}")

    @property
    def P(self):
        return self.features.shape[0]

    @property
    def D(self):
        return self.features.shape[1]


@dataclass
class SequenceSample:
    """One training sample as presented to the model.

    ``frames[0]`` is the anchor and ``frames[1:]`` are the shuffled candidates.
    ``true_order[t]`` is the index into ``frames`` of the frame at time t, and
    ``shuffle`` is its inverse (the time step of each presented frame).
    """

    frames: list[ProposalSet]
    true_order: list[int]
    shuffle: list[int] = field(default=None)

    def __post_init__(self):
        n = len(self.frames)
        if sorted(self.true_order) != list(range(n)):
            raise ContractError(f"true_order {self.true_order} is not a permutation of 0..{n - 1}")
        if self.true_order[0] != 0:
            raise ContractError("the anchor must be presented first")
        inv = [0] * n
        for t, i in enumerate(self.true_order):
            inv[i] = t
        if self.shuffle is None:
            self.shuffle = inv
        elif list(self.shuffle) != inv:
            raise ContractError("shuffle is not the inverse of true_order")

    @property
    def N(self):
        return len(self.frames)

    def ordered_frames(self) -> list[ProposalSet]:
        return [self.frames[i] for i in self.true_order]


@dataclass
class HistoryTokens:
    blocks: list[Tensor]  # blocks[k - 1] = H_k, k = 1..N-1

    def __getitem__(self, k: int) -> Tensor:
        if not 1 <= k <= len(self.blocks):
            raise IndexError(f"prefix length {k} outside 1..{len(self.blocks)}")
        return self.blocks[k - 1]

    def __len__(self):
        return len(self.blocks)


@dataclass
class TransitionTable:
    rho: Tensor

    @property
    def values(self) -> np.ndarray:
        return self.rho.data


def build_frame_mask(N: int, P: int) -> Tensor:
    if N < 1 or P < 1:
        raise ContractError(f"N and P must be >= 1, got N={N}, P={P}")
    return Tensor(np.kron(np.tril(np.ones((N, N))), np.ones((P, P))))


def _frame_tokens(frames: Sequence[ProposalSet], params, cfg: ModelConfig) -> Tensor:
    x = ad.concat_rows([f.features for f in frames])
    if x.shape[1] != cfg.D:
        raise ShapeError(f"frames have width {x.shape[1]}, model expects {cfg.D}")
    if cfg.use_frame_embedding:
        P = frames[0].P
        emb = ad.slice_rows(params["frame_emb"], 0, len(frames))
        emb = ad.reshape(ad.mul(ad.reshape(emb, (len(frames), 1, cfg.D)), np.ones((1, P, 1))),
                         (len(frames) * P, cfg.D))
        x = ad.add(x, emb)
    return x


def encode_frames(frames: Sequence[ProposalSet], params, cfg: ModelConfig) -> Tensor:
    """Encoder output for frames in the given temporal order, (len*P, D)."""
    params = as_params(params)
    P = frames[0].P
    for f in frames:
        if f.P != P:
            raise ShapeError(f"frames differ in proposal count: {f.P} vs {P}")
    x = _frame_tokens(frames, params, cfg)
    return encoder_forward(x, build_frame_mask(len(frames), P), params, cfg)


def history_tokens(frames: Sequence[ProposalSet], params, cfg: ModelConfig) -> HistoryTokens:
    """History blocks H_1..H_{N-1} from one masked pass over frames in true order.

    The final frame is encoded too (its outputs are unused); the block-causal
    mask keeps every H_k a function of frames 1..k only.
    """
    out = encode_frames(frames, params, cfg)
    P = frames[0].P
    return HistoryTokens([ad.slice_rows(out, k * P, (k + 1) * P) for k in range(len(frames) - 1)])


def transition_prob(H_k, T_m, params, cfg: ModelConfig | None = None) -> Tensor:
    """AvgPool of the association matrix between one history block and one frame."""
    offset = cfg.score_offset if cfg is not None else 0.0
    return ad.mean_all(additive_attention(H_k, T_m, params, offset))


def _block_mean_rows(a_rows: Tensor, b_all: Tensor, P: int, v: Tensor, offset: float) -> Tensor:
    """Mean association score of one P-row history block against each P-row
    candidate block stacked in ``b_all``; returns a (1, n_blocks) tensor."""
    n_blocks = b_all.shape[0] // P
    D = b_all.shape[1]
    per_chunk = max(1, _CHUNK_ELEMS // (P * P * D))
    ones_row = np.full((1, P), 1.0 / P)
    pieces = []
    for start in range(0, n_blocks, per_chunk):
        stop = min(n_blocks, start + per_chunk)
        b = b_all if (start, stop) == (0, n_blocks) else ad.slice_rows(b_all, start * P, stop * P)
        s = pairwise_scores(a_rows, b, v, offset)  # (P, c*P)
        pool = np.kron(np.eye(stop - start), np.full((P, 1), 1.0 / P))  # (c*P, c)
        pieces.append(ad.matmul(ad.matmul(ones_row, s), pool))
    return pieces[0] if len(pieces) == 1 else ad.concat_rows(pieces, axis=1)


def transition_table(sample: SequenceSample, params, cfg: ModelConfig) -> TransitionTable:
    """Scores of every candidate given each true prefix (teacher forcing).

    One encoder pass produces all history blocks; the candidate side uses the
    raw proposal features.
    """
    params = as_params(params)
    frames = sample.ordered_frames()
    N, P = len(frames), frames[0].P
    if N < 2:
        raise ContractError("a sample needs an anchor and at least one candidate")
    enc = encode_frames(frames, params, cfg)
    hist = ad.slice_rows(enc, 0, (N - 1) * P)
    cand = ad.concat_rows([f.features for f in frames[1:]])
    a_all = linear(hist, params["add.w1"])
    b_all = linear(cand, params["add.w2"])
    rows = [
        _block_mean_rows(ad.slice_rows(a_all, r * P, (r + 1) * P), b_all, P, params["add.v"], cfg.score_offset)
        for r in range(N - 1)
    ]
    return TransitionTable(ad.concat_rows(rows))


def pair_mask(K: int, exclude_used: bool = False) -> np.ndarray:
    """0/1 mask of the (prefix, competitor) pairs that enter the loss."""
    m = 1.0 - np.eye(K)
    if exclude_used:
        m = np.triu(m)
    return m


def tempo_loss(table, delta: float, exclude_used: bool = False) -> Tensor:
    """Margin ranking loss over all prefixes, averaged over contributing pairs.

    Each row contributes ``max(rho[r, c] - rho[r, r] + delta, 0)`` for every
    competitor column ``c != r``; ``exclude_used`` drops competitors already
    in the prefix (``c < r``).
    """
    if delta < 0:
        raise ContractError(f"delta must be >= 0, got {delta}")
    rho = table.rho if isinstance(table, TransitionTable) else ad.as_tensor(table)
    K = rho.shape[0]
    if rho.shape != (K, K):
        raise ShapeError(f"transition table must be square, got {rho.shape}")
    mask = pair_mask(K, exclude_used)
    n_pairs = int(mask.sum())
    if n_pairs == 0:
        return ad.mul(ad.mean_all(rho), 0.0)
    correct = ad.matmul(ad.mul(rho, np.eye(K)), np.ones((K, 1)))  # (K, 1)
    hinge = ad.relu(ad.add(ad.add(rho, ad.mul(correct, -1.0)), delta))
    return ad.mul(ad.mean_all(ad.mul(hinge, mask)), K * K / n_pairs)


def _candidate_scores(prefix: Sequence[ProposalSet], candidates: Sequence[ProposalSet], params, cfg) -> np.ndarray:
    """rho of each candidate given the decoded prefix."""
    P = prefix[0].P
    enc = encode_frames(prefix, params, cfg)
    h_last = ad.slice_rows(enc, (len(prefix) - 1) * P, len(prefix) * P)
    a = linear(h_last, params["add.w1"])
    b = linear(ad.concat_rows([c.features for c in candidates]), params["add.w2"])
    return _block_mean_rows(a, b, P, params["add.v"], cfg.score_offset).data[0]


def _tag_key(tag):
    return (0, tag) if isinstance(tag, (int, np.integer)) else (1, str(tag))


def greedy_order(candidates: Sequence[ProposalSet], anchor: ProposalSet, params, cfg: ModelConfig) -> list:
    """Decode an ordering by repeatedly appending the best-scoring candidate.

    Returns the candidates' frame tags in predicted temporal order. Ties go to
    the lowest tag.
    """
    if not candidates:
        raise ContractError("greedy_order needs at least one candidate")
    params = as_params(params)
    remaining = sorted(candidates, key=lambda c: _tag_key(c.frame_tag))
    prefix = [anchor]
    order = []
    while remaining:
        if len(remaining) == 1:
            best = 0
        else:
            scores = _candidate_scores(prefix, remaining, params, cfg)
            best = int(np.flatnonzero(scores == scores.max())[0])
        pick = remaining.pop(best)
        prefix.append(pick)
        order.append(pick.frame_tag)
    return order


def sequence_score(order: Sequence, candidates: Sequence[ProposalSet], anchor: ProposalSet, params, cfg: ModelConfig) -> float:
    """Sum of rho(frame at step n | decoded prefix) along ``order`` (tags)."""
    params = as_params(params)
    by_tag = {c.frame_tag: c for c in candidates}
    prefix = [anchor]
    total = 0.0
    for tag in order:
        frame = by_tag[tag]
        total += float(_candidate_scores(prefix, [frame], params, cfg)[0])
        prefix.append(frame)
    return total


def brute_force_order(candidates: Sequence[ProposalSet], anchor: ProposalSet, params, cfg: ModelConfig):
    """Exhaustive argmax of the sequence score over all candidate orderings.

    Prefix scores are memoized, so each distinct prefix is encoded once.
    Returns ``(tags, score)``; ties keep the lexicographically smallest tag
    sequence.
    """
    n_frames = len(candidates) + 1
    if n_frames > MAX_BRUTE_FORCE_FRAMES:
        raise LimitError(f"brute force limited to {MAX_BRUTE_FORCE_FRAMES} frames, got {n_frames}")
    if not candidates:
        raise ContractError("brute_force_order needs at least one candidate")
    params = as_params(params)
    cands = sorted(candidates, key=lambda c: _tag_key(c.frame_tag))
    memo: dict[tuple, np.ndarray] = {}

    def scores_after(prefix_idx: tuple) -> np.ndarray:
        if prefix_idx not in memo:
            prefix = [anchor] + [cands[i] for i in prefix_idx]
            memo[prefix_idx] = _candidate_scores(prefix, cands, params, cfg)
        return memo[prefix_idx]

    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(len(cands))):
        total = 0.0
        for step, idx in enumerate(perm):
            total += float(scores_after(perm[:step])[idx])
        if total > best_score:
            best, best_score = perm, total
    return [cands[i].frame_tag for i in best], best_score


def retrieval_similarity(frame_a: ProposalSet, frame_b: ProposalSet, params, cfg: ModelConfig | None = None,
                         use_encoder: bool = False) -> float:
    """Mean association score between two frames.

    By default both sides are raw proposal features; ``use_encoder`` first
    passes ``frame_a`` through the encoder as a one-frame history.
    """
    params = as_params(params)
    a = frame_a.features
    if use_encoder:
        if cfg is None:
            raise ContractError("use_encoder requires a model config")
        a = encode_frames([frame_a], params, cfg)
    return transition_prob(a, frame_b.features, params, cfg).item()
