import numpy as np
import pytest
from hypothesis import settings

from tempo.blocks import ModelConfig, ParameterStore
from tempo.head import ProposalSet, SequenceSample

settings.register_profile("tempo", derandomize=True, deadline=None, max_examples=100)
settings.load_profile("tempo")


def random_frames(rng, n, P, D, scale=1.0):
    return [ProposalSet(scale * rng.standard_normal((P, D)), i) for i in range(n)]


def random_sample(seed, N, P, D):
    rng = np.random.default_rng(seed)
    frames = random_frames(rng, N, P, D)
    perm = [0] + list(rng.permutation(N - 1) + 1)
    shown = [frames[t] for t in perm]
    shown = [ProposalSet(f.features, j) for j, f in enumerate(shown)]
    true_order = [0] * N
    for j, t in enumerate(perm):
        true_order[t] = j
    return SequenceSample(shown, true_order)


@pytest.fixture
def toy_cfg():
    return ModelConfig(D=8, L=2, heads=2, d_ff=16, P=4, N_seq=3)


@pytest.fixture
def toy_params(toy_cfg):
    return ParameterStore.init(toy_cfg, seed=0)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Desk-profile data plus one full training run through the CLI."""
    import time

    from tempo.cli import main

    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    assert main(["gen", "--out", str(root / "data")]) == 0
    args = ["train", "--dataset", str(root / "data" / "train.tmpo"),
            "--eval-dataset", str(root / "data" / "test.tmpo"), "--out", str(root / "run")]
    assert main(args) == 0
    seconds = time.perf_counter() - t0
    ckpts = sorted((root / "run").glob("ckpt_epoch*.tmpc"))
    return {"root": root, "train_args": args, "checkpoint": ckpts[-1],
            "train": root / "data" / "train.tmpo", "test": root / "data" / "test.tmpo",
            "metrics": root / "run" / "metrics.jsonl", "seconds": seconds}
