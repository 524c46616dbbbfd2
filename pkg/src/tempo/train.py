"""AdamW training of the multi-frame head, step-decay schedule, checkpoints.

Checkpoint layout (little endian)::

    b"TMPC" | u32 version | u32 n | n bytes of JSON {model, train, epoch}
    u32 count, then per parameter: u16 name_len | name | u32 ndim | u32[ndim] | f64 data
    u64 step | f64 lr | per parameter (same order): f64 first moment | f64 second moment
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tempo import autodiff as ad
from tempo.blocks import ModelConfig, ParameterStore
from tempo.errors import ContractError, FormatError, NumericsError
from tempo.evaluate import evaluate_ordering
from tempo.head import SequenceSample, tempo_loss, transition_table

CKPT_MAGIC = b"TMPC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2.5e-5
    weight_decay: float = 1e-4
    epochs: int = 6
    batch_size: int = 8
    decay_every: int = 3
    decay_factor: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None
    grad_clip: float | None = None
    n_eval: int = 200

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.decay_every < 1:
            raise ContractError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ContractError(f"max_steps must be >= 0, got {self.max_steps}")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 2.5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def init(cls, params: ParameterStore, cfg: TrainConfig) -> "OptimState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
            lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
        )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def adamw_step(params: ParameterStore, grads: dict[str, np.ndarray], state: OptimState):
    """One decoupled-weight-decay Adam update, in place.

    All gradients are validated first, so a non-finite gradient leaves both
    parameters and state untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r} at step {state.step}")
    b1, b2 = state.betas
    t = state.step + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        p *= 1.0 - state.lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return params, state


def batch_loss(samples: Sequence[SequenceSample], params: ParameterStore, cfg: ModelConfig):
    """Mean tempo loss over ``samples`` and its gradient w.r.t. every parameter."""
    tape = ad.Tape()
    watched = params.watch(tape)
    total = None
    for s in samples:
        loss = tempo_loss(transition_table(s, watched, cfg), cfg.delta, cfg.exclude_used)
        total = loss if total is None else ad.add(total, loss)
    total = ad.mul(total, 1.0 / len(samples))
    grads = ad.backward(total)
    return total.item(), {k: grads[t] for k, t in watched.items()}


def _clip(grads, max_norm):
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads


@dataclass
class TrainResult:
    params: ParameterStore
    state: OptimState
    log: list[dict] = field(default_factory=list)


def train(
    samples: Sequence[SequenceSample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    eval_samples: Sequence[SequenceSample] | None = None,
    checkpoint_dir=None,
    metrics_path=None,
    resume: "Checkpoint | None" = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch (or from ``resume``), one metrics record per epoch.

    Each epoch visits the samples in an order derived from ``(seed, epoch)``,
    so a run resumed from an epoch checkpoint retraces the uninterrupted one.
    Metrics are computed on ``eval_samples`` (default: the first
    ``cfg.n_eval`` training samples).
    """
    if not samples:
        raise ContractError("training set is empty")
    if eval_samples is None:
        eval_samples = samples[: cfg.n_eval]
    if resume is not None:
        params, state, start = resume.params.copy(), _copy_state(resume.state), resume.epoch + 1
    else:
        params = ParameterStore.init(model_cfg, cfg.seed)
        state = OptimState.init(params, cfg)
        start = 0
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    result = TrainResult(params, state)
    n = len(samples)
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
        losses = []
        capped = False
        for b in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                capped = True
                break
            batch = [samples[i] for i in order[b : b + cfg.batch_size]]
            try:
                loss, grads = batch_loss(batch, params, model_cfg)
                if cfg.grad_clip is not None:
                    grads = _clip(grads, cfg.grad_clip)
                adamw_step(params, grads, state)
            except NumericsError as exc:
                raise NumericsError(f"step {state.step}: {exc}") from exc
            losses.append(loss)
        report = evaluate_ordering(eval_samples, params, model_cfg, brute_force=False)
        record = {
            "epoch": epoch,
            "lr": state.lr,
            "loss": report.mean_loss,
            "train_loss": float(np.mean(losses)) if losses else None,
            "steps": state.step,
            "exact_match": report.exact_match,
            "kendall_tau": report.kendall_tau,
            "wall_ms": round((time.perf_counter() - t0) * 1e3, 3),
        }
        result.log.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_epoch{epoch:03d}.tmpc",
                            Checkpoint(model_cfg, params, state, epoch, cfg))
        if on_epoch is not None:
            on_epoch(record)
        if capped or (cfg.max_steps is not None and state.step >= cfg.max_steps):
            break
    return result


def _copy_state(s: OptimState) -> OptimState:
    return OptimState({k: v.copy() for k, v in s.m.items()}, {k: v.copy() for k, v in s.v.items()},
                      s.step, s.lr, tuple(s.betas), s.eps, s.weight_decay)


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ParameterStore
    state: OptimState
    epoch: int
    train_cfg: TrainConfig | None = None


def _blob(arr: np.ndarray) -> bytes:
    return struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + np.ascontiguousarray(arr, "<f8").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "model": ckpt.model_cfg.to_dict(),
        "train": ckpt.train_cfg.to_dict() if ckpt.train_cfg is not None else None,
        "epoch": ckpt.epoch,
        "optim": {"betas": list(ckpt.state.betas), "eps": ckpt.state.eps,
                  "weight_decay": ckpt.state.weight_decay},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    names = ckpt.params.names()
    out.append(struct.pack("<I", len(names)))
    for name in names:
        enc = name.encode()
        out.append(struct.pack("<H", len(enc)) + enc + _blob(ckpt.params[name]))
    out.append(struct.pack("<Qd", ckpt.state.step, ckpt.state.lr))
    for name in names:
        out.append(np.ascontiguousarray(ckpt.state.m[name], "<f8").tobytes())
        out.append(np.ascontiguousarray(ckpt.state.v[name], "<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint at offset {self.pos}", offset=self.pos)
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def f64(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; a differing ``expected`` config field raises
    :class:`FormatError` whose ``field`` names it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", field="magic", offset=0)
    version, meta_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", field="version", offset=4)
    meta = json.loads(r.take(meta_len))
    model_cfg = ModelConfig.from_dict(meta["model"])
    if expected is not None:
        for f in fields(ModelConfig):
            have, want = getattr(model_cfg, f.name), getattr(expected, f.name)
            if have != want:
                raise FormatError(f"{f.name}: checkpoint has {have!r}, expected {want!r}", field=f.name)
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        arrays[name] = r.f64(shape)
    params = ParameterStore(arrays)
    step, lr = r.unpack("<Qd")
    m, v = {}, {}
    for name, a in arrays.items():
        m[name] = r.f64(a.shape)
        v[name] = r.f64(a.shape)
    if r.pos != len(r.raw):
        raise FormatError(f"{len(r.raw) - r.pos} trailing bytes in checkpoint", offset=r.pos)
    opt = meta["optim"]
    state = OptimState(m, v, step, lr, tuple(opt["betas"]), opt["eps"], opt["weight_decay"])
    train_cfg = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
    return Checkpoint(model_cfg, params, state, meta["epoch"], train_cfg)
