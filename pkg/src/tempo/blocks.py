"""Layers of the multi-frame head and their exact parameter/FLOP accounting.

Weight matrices follow the (out, in) convention, so a linear layer computes
``x @ W.T + b`` on row-vector tokens.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from tempo import autodiff as ad
from tempo.autodiff import Tape, Tensor
from tempo.errors import ContractError, ShapeError

# Per-element cost charged to softmax, layer norm and tanh.
NONLINEAR_FLOPS = 5


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    L: int = 2
    heads: int = 4
    d_ff: int = 128
    P: int = 8
    N_seq: int = 4
    delta: float = 0.1
    use_frame_embedding: bool = False
    exclude_used: bool = False
    # Constant added to every association score. Orderings must not depend on it.
    score_offset: float = 0.0

    def __post_init__(self):
        for name in ("D", "heads", "d_ff", "P", "N_seq"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.L < 0:
            raise ContractError(f"L must be >= 0, got {self.L}")
        if self.D % self.heads:
            raise ContractError(f"D={self.D} is not divisible by heads={self.heads}")
        if not self.delta >= 0:
            raise ContractError(f"delta must be >= 0, got {self.delta}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


PAPER_MODEL = ModelConfig(D=256, L=2, heads=8, d_ff=1536, P=100, N_seq=8)
DESK_MODEL = ModelConfig(D=32, L=2, heads=4, d_ff=128, P=8, N_seq=4)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every trainable tensor."""
    D, F = cfg.D, cfg.d_ff
    shapes = {}
    for l in range(cfg.L):
        p = f"enc.{l}."
        shapes[p + "ln1.g"] = (D,)
        shapes[p + "ln1.b"] = (D,)
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (D, D)
            shapes[p + f"attn.b{w}"] = (D,)
        shapes[p + "ln2.g"] = (D,)
        shapes[p + "ln2.b"] = (D,)
        shapes[p + "ff1.w"] = (F, D)
        shapes[p + "ff1.b"] = (F,)
        shapes[p + "ff2.w"] = (D, F)
        shapes[p + "ff2.b"] = (D,)
    shapes["add.w1"] = (D, D)
    shapes["add.w2"] = (D, D)
    shapes["add.v"] = (D,)
    if cfg.use_frame_embedding:
        shapes["frame_emb"] = (cfg.N_seq, D)
    return shapes


def _init_fan_in(name, shapes):
    shape = shapes[name]
    if name == "frame_emb" or len(shape) == 2:
        return shape[-1]
    if name == "add.v":
        return shape[0]
    # biases take the fan-in of their weight
    head, last = name.rsplit(".", 1)
    weight = head + ".w" + last[1:] if ".attn." in name else head + ".w"
    return shapes[weight][1]


class ParameterStore:
    """Named float64 parameter arrays, initialized from ``(seed, name)``."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ParameterStore":
        shapes = param_shapes(cfg)
        arrays = {}
        for name, shape in shapes.items():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            if name.endswith("ln1.g") or name.endswith("ln2.g"):
                arrays[name] = np.ones(shape)
            elif name.endswith("ln1.b") or name.endswith("ln2.b"):
                arrays[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(_init_fan_in(name, shapes))
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arrays)

    def names(self):
        return list(self.arrays)

    def n_scalars(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __len__(self):
        return len(self.arrays)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.arrays.items()})

    def watch(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.watch(v) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}


def as_params(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParameterStore):
        return params.constants()
    return params


# --- layers ----------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    y = ad.matmul(x, ad.transpose(w))
    return ad.add(y, b) if b is not None else y


def self_attention(x, mask, params, prefix, heads) -> Tensor:
    T, D = x.shape
    dh = D // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (T, heads, dh)), (1, 0, 2))

    q = split(linear(x, params[prefix + "wq"], params[prefix + "bq"]))
    k = split(linear(x, params[prefix + "wk"], params[prefix + "bk"]))
    v = split(linear(x, params[prefix + "wv"], params[prefix + "bv"]))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    scores = ad.masked_fill(scores, mask)
    weights = ad.softmax_lastdim(scores)
    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (T, D))
    return linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def encoder_forward(tokens, mask, params, cfg: ModelConfig) -> Tensor:
    """Pre-norm transformer encoder over a (T, D) token matrix.

    ``mask[i, j] = 1`` lets token i attend to token j; masked pairs get zero
    attention weight. With ``cfg.L == 0`` the tokens are returned unchanged.
    """
    x = ad.as_tensor(tokens)
    if x.ndim != 2 or x.shape[1] != cfg.D:
        raise ShapeError(f"encoder: tokens shape {x.shape} is not (T, {cfg.D})")
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    T = x.shape[0]
    if m.shape != (T, T):
        raise ShapeError(f"encoder: mask shape {m.shape} does not match ({T}, {T})")
    if not np.all(np.diagonal(m) == 1):
        raise ContractError("encoder: mask diagonal must be all ones")
    params = as_params(params)
    for l in range(cfg.L):
        p = f"enc.{l}."
        h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = ad.add(x, self_attention(h, m, params, p + "attn.", cfg.heads))
        h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = linear(ad.relu(linear(h, params[p + "ff1.w"], params[p + "ff1.b"])),
                   params[p + "ff2.w"], params[p + "ff2.b"])
        x = ad.add(x, h)
    return x


def additive_attention(H, T, params, offset: float = 0.0) -> Tensor:
    """Association scores ``score[i, j] = v . tanh(W1 H[i] + W2 T[j])``."""
    H, T = ad.as_tensor(H), ad.as_tensor(T)
    if H.ndim != 2 or T.ndim != 2 or H.shape[1] != T.shape[1]:
        raise ShapeError(f"additive_attention: widths of {H.shape} and {T.shape} differ")
    params = as_params(params)
    D = H.shape[1]
    if params["add.w1"].shape != (D, D):
        raise ShapeError(f"additive_attention: W1 {params['add.w1'].shape} vs width {D}")
    a = linear(H, params["add.w1"])
    b = linear(T, params["add.w2"])
    return pairwise_scores(a, b, params["add.v"], offset)


def pairwise_scores(a, b, v, offset: float = 0.0) -> Tensor:
    """``v . tanh(a[i] + b[j])`` for already-projected rows."""
    Pa, D = a.shape
    Pb = b.shape[0]
    s = ad.tanh(ad.add(ad.reshape(a, (Pa, 1, D)), ad.reshape(b, (1, Pb, D))))
    s = ad.reshape(ad.matmul(s, ad.reshape(v, (D, 1))), (Pa, Pb))
    return ad.add(s, offset) if offset else s


# --- accounting --------------------------------------------------------------


def count_params(cfg: ModelConfig) -> dict[str, int]:
    D, F = cfg.D, cfg.d_ff
    layer = (2 * D) + (4 * D * D + 4 * D) + (2 * D) + (D * F + F + F * D + D)
    counts = {
        "encoder_layer": layer,
        "encoder": cfg.L * layer,
        "additive_attention": 2 * D * D + D,
        "frame_embedding": cfg.N_seq * D if cfg.use_frame_embedding else 0,
    }
    counts["total"] = counts["encoder"] + counts["additive_attention"] + counts["frame_embedding"]
    return counts


def linear_flops(tokens: int, d_in: int, d_out: int) -> int:
    return 2 * tokens * d_in * d_out


def encoder_layer_flops(cfg: ModelConfig, T: int) -> int:
    D, F, h = cfg.D, cfg.d_ff, cfg.heads
    nl = NONLINEAR_FLOPS
    return (
        nl * T * D  # ln1
        + 3 * linear_flops(T, D, D)  # q, k, v
        + 2 * T * T * D  # q k^T over all heads
        + h * T * T  # 1/sqrt(dh) scaling
        + nl * h * T * T  # softmax
        + 2 * T * T * D  # weights @ v
        + linear_flops(T, D, D)  # output projection
        + T * D  # residual
        + nl * T * D  # ln2
        + linear_flops(T, D, F) + T * F + linear_flops(T, F, D)  # ff + relu
        + T * D  # residual
    )


def count_flops(cfg: ModelConfig, N: int) -> dict[str, int]:
    """FLOPs of one forward pass of the multi-frame head plus the loss.

    1 multiply-accumulate = 2 FLOPs; softmax, layer norm and tanh cost 5 per
    element; adds and scalings cost 1. The encoder runs over all N*P tokens,
    the association scores cover the (N-1)^2 prefix/candidate frame pairs.
    """
    if N < 1:
        raise ContractError(f"N must be >= 1, got {N}")
    D, P = cfg.D, cfg.P
    T = N * P
    K = N - 1
    pairs = K * K * P * P
    enc = cfg.L * encoder_layer_flops(cfg, T)
    addatt = (
        linear_flops(K * P, D, D) * 2  # W1 on history rows, W2 on candidate rows
        + pairs * D  # broadcast add
        + NONLINEAR_FLOPS * pairs * D  # tanh
        + 2 * pairs * D  # dot with v
    )
    reduction = pairs + K * K
    loss = 3 * K * K + K * K
    out = {"encoder": enc, "additive_attention": addatt, "reduction": reduction, "loss": loss}
    out["total"] = sum(out.values())
    return out
