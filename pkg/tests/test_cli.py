import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

import tempo.train as train_mod
from tempo.cli import main
from tempo.synth import read_header

SMALL = ["--set", "data.n_train=24", "--set", "data.n_test=12"]
FAST_TRAIN = ["--set", "train.epochs=2", "--set", "train.batch_size=4"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _strip_wall(path):
    return [{k: v for k, v in json.loads(line).items() if k != "wall_ms"} for line in path.read_text().splitlines()]


@pytest.fixture
def small_data(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "d"), *SMALL]) == 0
    return tmp_path / "d"


# --- gen ---------------------------------------------------------------------------


def test_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--seed", "7", *SMALL]) == 0
    for f in ("train.tmpo", "test.tmpo", "train.tmpo.meta.json"):
        assert _sha(tmp_path / "a" / f) == _sha(tmp_path / "b" / f)
    assert (tmp_path / "a" / "resolved.json").read_text() == (tmp_path / "b" / "resolved.json").read_text()


def test_gen_default_header(small_data):
    h = read_header(small_data / "train.tmpo")
    assert (h.N_seq, h.P, h.D, h.count) == (4, 8, 32, 24)
    assert read_header(small_data / "test.tmpo").count == 12


def test_gen_p_below_k_exits_2(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--set", "scene.K=12"]) == 2
    assert "P >= K" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "data": {"n_train": 6, "n_test": 2}}))
    assert main(["gen", "--config", str(tmp_path / "c.json"), "--seed", "11", "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o" / "resolved.json").read_text())
    assert resolved["seed"] == 11 and resolved["scene"]["seed"] == 11
    assert resolved["data"] == {"n_train": 6, "n_test": 2}


def test_argparse_usage_error_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--profile", "huge"])
    assert exc.value.code == 2


# --- train -------------------------------------------------------------------------


def test_train_rerun_identical_metrics(small_data, tmp_path):
    for name in ("r1", "r2"):
        args = ["train", "--dataset", str(small_data / "train.tmpo"), "--out", str(tmp_path / name), *FAST_TRAIN]
        assert main(args) == 0
    a, b = tmp_path / "r1" / "metrics.jsonl", tmp_path / "r2" / "metrics.jsonl"
    assert len(a.read_text().splitlines()) == 2
    assert _strip_wall(a) == _strip_wall(b)
    assert sorted(p.name for p in (tmp_path / "r1").glob("*.tmpc")) == ["ckpt_epoch000.tmpc", "ckpt_epoch001.tmpc"]
    assert _sha(tmp_path / "r1" / "ckpt_epoch001.tmpc") == _sha(tmp_path / "r2" / "ckpt_epoch001.tmpc")


def test_train_missing_dataset_exits_2(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "none.tmpo"), "--out", str(tmp_path)]) == 2


def test_train_width_mismatch_exits_2(small_data, tmp_path):
    args = ["train", "--dataset", str(small_data / "train.tmpo"), "--out", str(tmp_path / "r"), "--profile", "paper"]
    assert main(args) == 2


def test_train_numeric_failure_exits_3(small_data, tmp_path, monkeypatch, capsys):
    real = train_mod.batch_loss

    def poisoned(batch, params, cfg):
        loss, grads = real(batch, params, cfg)
        return loss, {k: np.full_like(g, np.nan) for k, g in grads.items()}

    monkeypatch.setattr(train_mod, "batch_loss", poisoned)
    args = ["train", "--dataset", str(small_data / "train.tmpo"), "--out", str(tmp_path / "r"), *FAST_TRAIN]
    assert main(args) == 3
    assert "step 0" in capsys.readouterr().err


def test_train_resume_continues_log(small_data, tmp_path):
    base = ["train", "--dataset", str(small_data / "train.tmpo"), "--set", "train.batch_size=4"]
    assert main([*base, "--out", str(tmp_path / "full"), "--set", "train.epochs=4"]) == 0
    assert main([*base, "--out", str(tmp_path / "part"), "--set", "train.epochs=2"]) == 0
    assert main([*base, "--out", str(tmp_path / "part"), "--set", "train.epochs=4",
                 "--resume", str(tmp_path / "part" / "ckpt_epoch001.tmpc")]) == 0
    assert _strip_wall(tmp_path / "part" / "metrics.jsonl") == _strip_wall(tmp_path / "full" / "metrics.jsonl")


# --- eval --------------------------------------------------------------------------


def _untrained(data_dir, out, seed=0):
    args = ["train", "--dataset", str(data_dir / "train.tmpo"), "--out", str(out), "--seed", str(seed),
            "--set", "train.max_steps=0", "--set", "train.epochs=1"]
    assert main(args) == 0
    return out / "ckpt_epoch000.tmpc"


def test_eval_untrained_is_chance_on_static_scene(tmp_path):
    # with no motion the frames carry no order information, so any model sits at 1/3!
    data = tmp_path / "d"
    assert main(["gen", "--out", str(data), "--set", "data.n_train=4", "--set", "data.n_test=600",
                 "--set", "scene.step_size=0"]) == 0
    ckpt = _untrained(data, tmp_path / "r")
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data / "test.tmpo"), "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "ordering.json").read_text())
    p = 1 / math.factorial(3)
    assert abs(report["exact_match"] - p) < 4 * math.sqrt(p * (1 - p) / 600)


def test_eval_two_frame_dataset(tmp_path):
    data = tmp_path / "d"
    assert main(["gen", "--out", str(data), "--set", "model.N_seq=2", *SMALL]) == 0
    ckpt = _untrained(data, tmp_path / "r")
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data / "test.tmpo"), "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "ordering.json").read_text())["exact_match"] == 1.0
    retrieval = json.loads((tmp_path / "e" / "retrieval.json").read_text())
    assert retrieval["k"] == 1 and retrieval["pool_size"] == 8


def test_eval_config_mismatch_exits_2(small_data, tmp_path, capsys):
    ckpt = _untrained(small_data, tmp_path / "r")
    args = ["eval", "--checkpoint", str(ckpt), "--dataset", str(small_data / "test.tmpo"),
            "--out", str(tmp_path / "e"), "--profile", "paper"]
    assert main(args) == 2
    assert "D:" in capsys.readouterr().err


def test_eval_trained_desk_checkpoint(desk_run, tmp_path):
    args = ["eval", "--checkpoint", str(desk_run["checkpoint"]), "--dataset", str(desk_run["test"]),
            "--out", str(tmp_path)]
    assert main(args) == 0
    report = json.loads((tmp_path / "ordering.json").read_text())
    assert report["exact_match"] >= 0.90 and report["kendall_tau"] >= 0.9


# --- bench -------------------------------------------------------------------------


def test_bench_single_n_exits_2(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "--n-list", "4"]) == 2


def test_bench_counts_repeatable(tmp_path):
    for name in ("a", "b"):
        assert main(["bench", "--out", str(tmp_path / name), "--n-list", "2,4,8"]) == 0
    cols = []
    for name in ("a", "b"):
        rows = (tmp_path / name / "scaling.csv").read_text().splitlines()[1:4]
        cols.append([r.split(",")[1] for r in rows])
    assert cols[0] == cols[1]


def test_bench_paper_profile_ratio(tmp_path):
    assert main(["bench", "--profile", "paper", "--out", str(tmp_path), "--no-wall"]) == 0
    rows = [r.split(",") for r in (tmp_path / "scaling.csv").read_text().splitlines()[1:4]]
    flops = {int(r[0]): int(r[1]) for r in rows}
    ratio = flops[8] / flops[4]
    assert ratio < 4 and abs(ratio - 2.61) <= 0.3 * 2.61


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "tempo", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "bench" in out.stdout
