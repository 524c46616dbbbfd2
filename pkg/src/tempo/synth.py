"""Synthetic proposal-feature sequences and the ``TMPO`` dataset format.

Each sequence has K objects moving linearly in a 4-d latent space, embedded
into D dimensions by a fixed seed-derived projection. The remaining P - K
rows are low-quality proposals drawn i.i.d. per frame. Rows are shuffled
independently per frame, so a frame is only meaningful as a set.

Binary layout (little endian)::

    header  magic b"TMPO" | u32 version | u32 N_seq | u32 P | u32 D | u64 count | u32 float_width
    sample  u32[N_seq] true_order | f32[N_seq * P * D] features of the presented frames
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from tempo.autodiff import Tensor
from tempo.errors import ContractError, FormatError
from tempo.head import ProposalSet, SequenceSample

MAGIC = b"TMPO"
VERSION = 1
LATENT_DIM = 4
_HEADER = struct.Struct("<4sIIIIQI")


@dataclass(frozen=True)
class SceneSpec:
    K: int = 6
    D: int = 32
    P: int = 8
    step_size: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.K:
            raise ContractError(f"K must be >= 1, got {self.K}")
        if self.P < self.K:
            raise ContractError(f"P >= K required (P={self.P}, K={self.K})")
        if self.D < 1:
            raise ContractError(f"D must be >= 1, got {self.D}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.step_size < 0:
            raise ContractError(f"step_size must be >= 0, got {self.step_size}")
        if not 0 <= self.seed < 2**64:
            raise ContractError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def embedding_matrix(spec: SceneSpec) -> np.ndarray:
    """Fixed (D, 4) projection; orthonormal columns scaled to unit feature variance."""
    rng = np.random.default_rng([spec.seed, 0])
    g = rng.standard_normal((spec.D, LATENT_DIM))
    if spec.D >= LATENT_DIM:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        return q * np.sqrt(spec.D / LATENT_DIM)
    return g / np.sqrt(LATENT_DIM)


def gen_sequence(spec: SceneSpec, length: int, index: int = 0) -> list[ProposalSet]:
    """Frames 0..length-1 of sequence ``index``; frame tags are time steps."""
    if length < 1:
        raise ContractError(f"length must be >= 1, got {length}")
    E = embedding_matrix(spec)
    rng = np.random.default_rng([spec.seed, 1, index])
    latent = rng.standard_normal((spec.K, LATENT_DIM))
    drift = rng.standard_normal((spec.K, LATENT_DIM))
    drift *= spec.step_size / np.linalg.norm(drift, axis=1, keepdims=True)
    frames = []
    for t in range(length):
        objects = (latent + t * drift) @ E.T
        objects = objects + spec.noise_sigma * rng.standard_normal(objects.shape)
        clutter = spec.noise_sigma * rng.standard_normal((spec.P - spec.K, spec.D))
        rows = np.concatenate([objects, clutter])[rng.permutation(spec.P)]
        frames.append(ProposalSet(Tensor(rows), t))
    return frames


def make_sample(sequence: Sequence[ProposalSet], shuffle_seed: int) -> SequenceSample:
    """Anchor first, then the remaining frames in a seeded random order.

    Presented frames are re-tagged with their presentation index so tags
    carry no ordering information.
    """
    n = len(sequence)
    if n < 2:
        raise ContractError(f"a sample needs at least 2 frames, got {n}")
    perm = np.random.default_rng(shuffle_seed).permutation(n - 1) + 1
    shown = [0] + [int(p) for p in perm]  # shown[j] = time step of presented frame j
    frames = [ProposalSet(sequence[t].features, j) for j, t in enumerate(shown)]
    true_order = [0] * n
    for j, t in enumerate(shown):
        true_order[t] = j
    return SequenceSample(frames, true_order, shown)


def gen_dataset(spec: SceneSpec, n_samples: int, n_seq: int, start: int = 0) -> list[SequenceSample]:
    """Samples ``start .. start + n_samples - 1``; each index is an independent scene."""
    out = []
    for i in range(start, start + n_samples):
        seq = gen_sequence(spec, n_seq, index=i)
        out.append(make_sample(seq, shuffle_seed=[spec.seed, 2, i]))
    return out


@dataclass(frozen=True)
class DatasetHeader:
    N_seq: int
    P: int
    D: int
    count: int
    version: int = VERSION
    float_width: int = 4
    magic: str = MAGIC.decode()

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.N_seq, self.P, self.D, self.count, self.float_width)

    @classmethod
    def unpack(cls, raw: bytes) -> "DatasetHeader":
        if len(raw) < _HEADER.size:
            raise FormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", offset=len(raw))
        magic, version, n_seq, P, D, count, width = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", field="magic", offset=0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", field="version", offset=4)
        if width != 4:
            raise FormatError(f"unsupported float width {width}", field="float_width", offset=28)
        return cls(N_seq=n_seq, P=P, D=D, count=count, version=version, float_width=width)


def write_dataset(path, samples: Sequence[SequenceSample], shape: tuple[int, int, int] | None = None) -> DatasetHeader:
    """Write samples plus a ``<path>.meta.json`` sidecar.

    ``shape = (N_seq, P, D)`` is required only for an empty dataset.
    """
    path = Path(path)
    if samples:
        s0 = samples[0]
        dims = (s0.N, s0.frames[0].P, s0.frames[0].D)
    elif shape is not None:
        dims = tuple(shape)
    else:
        raise ContractError("an empty dataset needs an explicit (N_seq, P, D) shape")
    header = DatasetHeader(N_seq=dims[0], P=dims[1], D=dims[2], count=len(samples))
    chunks = [header.pack()]
    for i, s in enumerate(samples):
        feats = np.stack([f.features.data for f in s.frames])
        if (s.N,) + feats.shape[1:] != dims:
            raise ContractError(f"sample {i} has shape {(s.N,) + feats.shape[1:]}, dataset is {dims}")
        chunks.append(np.asarray(s.true_order, dtype="<u4").tobytes())
        chunks.append(feats.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".meta.json").write_text(json.dumps(asdict(header), indent=2, sort_keys=True) + "\n")
    return header


def read_header(path) -> DatasetHeader:
    with open(path, "rb") as fh:
        return DatasetHeader.unpack(fh.read(_HEADER.size))


def read_dataset(path) -> list[SequenceSample]:
    raw = Path(path).read_bytes()
    header = DatasetHeader.unpack(raw)
    n, P, D = header.N_seq, header.P, header.D
    order_bytes = 4 * n
    feat_bytes = 4 * n * P * D
    offset = _HEADER.size
    samples = []
    for i in range(header.count):
        end = offset + order_bytes + feat_bytes
        if end > len(raw):
            raise FormatError(f"truncated file: sample {i} needs bytes up to {end}, file has {len(raw)}",
                              offset=len(raw))
        order = np.frombuffer(raw, dtype="<u4", count=n, offset=offset).astype(int).tolist()
        feats = np.frombuffer(raw, dtype="<f4", count=n * P * D, offset=offset + order_bytes)
        feats = feats.reshape(n, P, D).astype(np.float64)
        try:
            samples.append(SequenceSample([ProposalSet(Tensor(feats[j]), j) for j in range(n)], order))
        except ContractError as exc:
            raise FormatError(f"sample {i} has an invalid order: {exc}", offset=offset) from None
        offset = end
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after {header.count} samples", offset=offset)
    return samples
