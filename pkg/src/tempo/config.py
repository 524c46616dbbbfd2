"""Run configuration: model, training, scene and data settings in one place.

Resolution order is profile defaults, then a JSON config file, then
command-line overrides. A file looks like::

    {"profile": "desk", "seed": 3, "train": {"epochs": 2}, "data": {"n_train": 500}}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from tempo.blocks import DESK_MODEL, PAPER_MODEL, ModelConfig
from tempo.errors import ContractError
from tempo.synth import SceneSpec
from tempo.train import TrainConfig

PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_test: int = 200

    def __post_init__(self):
        if self.n_train < 0 or self.n_test < 0:
            raise ContractError(f"sample counts must be >= 0, got {self.n_train}, {self.n_test}")


@dataclass(frozen=True)
class BenchConfig:
    n_list: tuple[int, ...] = (2, 4, 8, 16, 32)
    repeats: int = 5
    measure_wall: bool = True

    def __post_init__(self):
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=lambda: DESK_MODEL)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if (self.scene.P, self.scene.D) != (self.model.P, self.model.D):
            raise ContractError(
                f"scene (P={self.scene.P}, D={self.scene.D}) does not match model (P={self.model.P}, D={self.model.D})")

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "scene": asdict(self.scene),
            "data": asdict(self.data),
            "bench": {**asdict(self.bench), "n_list": list(self.bench.n_list)},
        }

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def profile_defaults(name: str) -> dict:
    if name == "desk":
        return {
            "model": DESK_MODEL.to_dict(),
            # lr 1e-3 instead of 2.5e-5: the small model has to learn within minutes
            "train": {"lr0": 1e-3, "batch_size": 2, "epochs": 5, "max_steps": 5000},
            "scene": {"K": 6, "D": DESK_MODEL.D, "P": DESK_MODEL.P},
            "data": {"n_train": 2000, "n_test": 200},
            "bench": {"n_list": [2, 4, 8, 16, 32], "repeats": 5},
        }
    if name == "paper":
        return {
            "model": PAPER_MODEL.to_dict(),
            "train": {},
            "scene": {"K": 6, "D": PAPER_MODEL.D, "P": PAPER_MODEL.P},
            "data": {"n_train": 2000, "n_test": 200},
            "bench": {"n_list": [4, 6, 8], "repeats": 5},
        }
    raise ContractError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _section(cls, d: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ContractError(f"unknown {what} config fields: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ContractError(f"bad {what} config: {exc}") from None


def parse_override(text: str) -> dict:
    """``section.field=value`` to a nested dict; the value is parsed as JSON
    when possible, otherwise kept as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ContractError(f"override must look like section.field=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config_file(path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ContractError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ContractError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ContractError(f"config {path} must hold a JSON object")
    return data


def resolve(file_data: dict | None = None, profile: str | None = None, seed: int | None = None,
            overrides: list[dict] | None = None) -> RunConfig:
    """Build a RunConfig. Arguments win over ``file_data``, which wins over the
    profile defaults. The run seed is copied into the scene and train sections."""
    file_data = dict(file_data or {})
    name = profile or file_data.pop("profile", None) or "desk"
    file_data.pop("profile", None)
    merged = _merge(profile_defaults(name), file_data)
    for o in overrides or []:
        merged = _merge(merged, o)
    if seed is not None:
        merged["seed"] = seed
    run_seed = merged.pop("seed", 0)
    if not isinstance(run_seed, int) or not 0 <= run_seed < 2**64:
        raise ContractError(f"seed must be an unsigned 64-bit integer, got {run_seed!r}")
    unknown = set(merged) - {"model", "train", "scene", "data", "bench"}
    if unknown:
        raise ContractError(f"unknown config sections: {sorted(unknown)}")
    model = _section(ModelConfig, merged.get("model", {}), "model")
    train = _section(TrainConfig, {**merged.get("train", {}), "seed": run_seed}, "train")
    scene = _section(SceneSpec, {**merged.get("scene", {}), "seed": run_seed}, "scene")
    data = _section(DataConfig, merged.get("data", {}), "data")
    bench = _section(BenchConfig, merged.get("bench", {}), "bench")
    return RunConfig(profile=name, seed=run_seed, model=model, train=train, scene=scene, data=data, bench=bench)

