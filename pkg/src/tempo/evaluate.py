"""Ordering/retrieval metrics and the FLOP scaling benchmark."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from tempo.autodiff import Tensor
from tempo.blocks import ModelConfig, ParameterStore, as_params, count_flops
from tempo.errors import ContractError
from tempo.head import (
    ProposalSet,
    SequenceSample,
    brute_force_order,
    greedy_order,
    retrieval_similarity,
    tempo_loss,
    transition_table,
)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TEMPO_THREADS", "1")))
    except ValueError:
        return 1


def kendall_tau(pred: Sequence, truth: Sequence) -> float:
    if len(pred) != len(truth):
        raise ContractError(f"length mismatch: {len(pred)} vs {len(truth)}")
    if set(pred) != set(truth) or len(set(truth)) != len(truth) or len(set(pred)) != len(pred):
        raise ContractError("pred and truth must be permutations of the same items")
    n = len(truth)
    if n < 2:
        return 1.0
    rank = {item: i for i, item in enumerate(truth)}
    r = [rank[p] for p in pred]
    conc = disc = 0
    for i in range(n):
        for j in range(i + 1, n):
            if r[i] < r[j]:
                conc += 1
            else:
                disc += 1
    return (conc - disc) / (n * (n - 1) / 2)


@dataclass
class OrderingReport:
    n_samples: int
    exact_match: float
    kendall_tau: float
    mean_loss: float
    per_n: dict = field(default_factory=dict)
    bruteforce_agreement: float | None = None
    zero_loss_samples: int = 0
    zero_loss_agreement: float | None = None

    def to_dict(self):
        return asdict(self)


def _eval_one(sample: SequenceSample, params, cfg: ModelConfig, brute: bool):
    anchor, cands = sample.frames[0], sample.frames[1:]
    truth = [sample.frames[i].frame_tag for i in sample.true_order[1:]]
    pred = greedy_order(cands, anchor, params, cfg)
    loss = tempo_loss(transition_table(sample, params, cfg), cfg.delta, cfg.exclude_used).item()
    bf = None
    if brute:
        bf, _ = brute_force_order(cands, anchor, params, cfg)
    return pred == truth, kendall_tau(pred, truth), loss, (None if bf is None else bf == pred)


def evaluate_ordering(samples: Sequence[SequenceSample], params, cfg: ModelConfig,
                      brute_force: bool | None = None) -> OrderingReport:
    """Greedy decoding accuracy; adds the exhaustive-decoder comparison for N <= 6."""
    if not samples:
        raise ContractError("no samples to evaluate")
    params = as_params(params)
    if brute_force is None:
        brute_force = all(s.N <= 6 for s in samples)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda s: _eval_one(s, params, cfg, brute_force), samples))
    else:
        rows = [_eval_one(s, params, cfg, brute_force) for s in samples]

    per_n: dict[int, dict] = {}
    for s, (ok, tau, _, _) in zip(samples, rows):
        d = per_n.setdefault(s.N, {"n": 0, "exact_match": 0.0, "kendall_tau": 0.0})
        d["n"] += 1
        d["exact_match"] += ok
        d["kendall_tau"] += tau
    for d in per_n.values():
        d["exact_match"] /= d["n"]
        d["kendall_tau"] /= d["n"]

    report = OrderingReport(
        n_samples=len(samples),
        exact_match=float(np.mean([r[0] for r in rows])),
        kendall_tau=float(np.mean([r[1] for r in rows])),
        mean_loss=float(np.mean([r[2] for r in rows])),
        per_n={str(k): v for k, v in sorted(per_n.items())},
    )
    if brute_force:
        report.bruteforce_agreement = float(np.mean([r[3] for r in rows]))
        zero = [r[3] for r in rows if r[2] == 0.0]
        report.zero_loss_samples = len(zero)
        report.zero_loss_agreement = float(np.mean(zero)) if zero else None
    return report


def retrieval_topk(pool: Sequence[tuple[ProposalSet, object]], k: int, params, cfg: ModelConfig | None = None,
                   use_encoder: bool = False) -> float:
    """Fraction of queries with a same-label frame among their k most similar
    frames (self excluded). Ties rank the earlier pool entry first."""
    if len(pool) < k + 1:
        raise ContractError(f"pool of {len(pool)} is too small for k={k}")
    params = as_params(params)
    hits = 0
    for qi, (query, label) in enumerate(pool):
        sims = [(-retrieval_similarity(query, other, params, cfg, use_encoder), j)
                for j, (other, _) in enumerate(pool) if j != qi]
        sims.sort()
        hits += any(pool[j][1] == label for _, j in sims[:k])
    return hits / len(pool)


@dataclass
class ScalingRow:
    N: int
    flops: int
    wall_ms: float | None
    flops_per_N: float


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    exponent: float
    r2: float

    def to_csv(self) -> str:
        lines = ["N,flops,wall_ms,flops_per_N"]
        for r in self.rows:
            wall = "" if r.wall_ms is None else f"{r.wall_ms:.3f}"
            lines.append(f"{r.N},{r.flops},{wall},{r.flops_per_N:.1f}")
        lines.append(f"# exponent={self.exponent:.6f} r2={self.r2:.6f}")
        return "\n".join(lines) + "\n"


def fit_exponent(ns: Sequence[int], ys: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log y against log N, and its R^2."""
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(ys, float))
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def _time_forward(cfg: ModelConfig, N: int, params, repeats: int, seed: int) -> float:
    rng = np.random.default_rng([seed, N])
    frames = [ProposalSet(Tensor(rng.standard_normal((cfg.P, cfg.D))), i) for i in range(N)]
    sample = SequenceSample(frames, list(range(N)))
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        tempo_loss(transition_table(sample, params, cfg), cfg.delta, cfg.exclude_used)
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def run_scaling(cfg: ModelConfig, n_list: Sequence[int], repeats: int = 5, measure_wall: bool = True,
                seed: int = 0) -> ScalingReport:
    """Counted FLOPs (and optionally median wall-clock) of one forward pass
    plus loss, per sequence length."""
    ns = list(n_list)
    if len(ns) < 3:
        raise ContractError(f"need at least 3 sequence lengths, got {len(ns)}")
    if any(b <= a for a, b in zip(ns, ns[1:])) or ns[0] < 2:
        raise ContractError(f"sequence lengths must be strictly increasing and >= 2: {ns}")
    if measure_wall and repeats < 5:
        raise ContractError(f"wall-clock medians need >= 5 repetitions, got {repeats}")
    params = ParameterStore.init(cfg, seed).constants() if measure_wall else None
    rows = []
    with threadpool_limits(limits=1):
        for N in ns:
            flops = count_flops(cfg, N)["total"]
            wall = _time_forward(cfg, N, params, repeats, seed) if measure_wall else None
            rows.append(ScalingRow(N=N, flops=flops, wall_ms=wall, flops_per_N=flops / N))
    exponent, r2 = fit_exponent(ns, [r.flops for r in rows])
    return ScalingReport(rows, exponent, r2)
