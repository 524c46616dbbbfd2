import itertools
import json

import numpy as np
import pytest
from scipy.stats import chisquare

from tempo.errors import ContractError, FormatError
from tempo.synth import (
    SceneSpec,
    gen_dataset,
    gen_sequence,
    make_sample,
    read_dataset,
    read_header,
    write_dataset,
)


def _sorted_rows(a):
    return a[np.lexsort(a.T[::-1])]


def test_spec_validation():
    with pytest.raises(ContractError, match="P >= K"):
        SceneSpec(K=9, P=8)
    with pytest.raises(ContractError):
        SceneSpec(noise_sigma=-1.0)


def test_static_noiseless_frames_identical():
    spec = SceneSpec(K=3, D=8, P=5, step_size=0.0, noise_sigma=0.0, seed=4)
    frames = gen_sequence(spec, 5)
    ref = _sorted_rows(frames[0].features.data)
    for f in frames[1:]:
        np.testing.assert_array_equal(_sorted_rows(f.features.data), ref)


def test_generation_deterministic():
    spec = SceneSpec(seed=123)
    a = gen_sequence(spec, 4, index=7)
    b = gen_sequence(spec, 4, index=7)
    for fa, fb in zip(a, b):
        assert fa.features.data.tobytes() == fb.features.data.tobytes()
    c = gen_sequence(SceneSpec(seed=124), 4, index=7)
    assert a[0].features.data.tobytes() != c[0].features.data.tobytes()


def test_linear_drift_constant_step():
    spec = SceneSpec(K=1, D=16, P=1, step_size=0.7, noise_sigma=0.0, seed=2)
    feats = [f.features.data[0] for f in gen_sequence(spec, 6)]
    dists = [np.linalg.norm(b - a) for a, b in zip(feats, feats[1:])]
    np.testing.assert_allclose(dists, dists[0], rtol=1e-12)
    # orthonormal embedding scaled by sqrt(D / 4)
    assert dists[0] == pytest.approx(0.7 * np.sqrt(16 / 4), rel=1e-12)


def test_noiseless_nearest_neighbour_recovers_order():
    spec = SceneSpec(noise_sigma=0.0, seed=9)
    for index in range(200):
        frames = gen_sequence(spec, 6, index=index)
        centroids = [f.features.data.mean(axis=0) for f in frames]
        order, left = [0], set(range(1, 6))
        while left:
            cur = centroids[order[-1]]
            nxt = min(left, key=lambda j: np.linalg.norm(centroids[j] - cur))
            order.append(nxt)
            left.remove(nxt)
        assert order == list(range(6))


def test_make_sample_two_frames():
    seq = gen_sequence(SceneSpec(), 2)
    for seed in range(5):
        s = make_sample(seq, seed)
        assert s.true_order == [0, 1]


def test_make_sample_reproducible_and_labelled():
    seq = gen_sequence(SceneSpec(), 5)
    a, b = make_sample(seq, 42), make_sample(seq, 42)
    assert a.true_order == b.true_order
    assert a.frames[0].features is seq[0].features
    for t, j in enumerate(a.true_order):
        assert a.frames[j].features is seq[t].features
        assert a.shuffle[j] == t
    assert [f.frame_tag for f in a.frames] == list(range(5))


def test_make_sample_too_short():
    with pytest.raises(ContractError):
        make_sample(gen_sequence(SceneSpec(), 1), 0)


def test_shuffle_uniformity():
    seq = gen_sequence(SceneSpec(D=4, P=4, K=2), 4)
    perms = list(itertools.permutations([1, 2, 3]))
    counts = dict.fromkeys(perms, 0)
    n = 10_000
    for seed in range(n):
        counts[tuple(make_sample(seq, seed).true_order[1:])] += 1
    freq = np.array([counts[p] for p in perms])
    assert np.all(np.abs(freq / n - 1 / 6) <= 0.02)
    assert chisquare(freq).pvalue > 1e-3


def test_empty_dataset_roundtrip(tmp_path):
    path = tmp_path / "empty.tmpo"
    write_dataset(path, [], shape=(4, 8, 32))
    assert path.stat().st_size == 32
    assert read_dataset(path) == []
    h = read_header(path)
    assert (h.N_seq, h.P, h.D, h.count) == (4, 8, 32, 0)


def test_dataset_roundtrip_bitwise_f32(tmp_path):
    path = tmp_path / "one.tmpo"
    samples = gen_dataset(SceneSpec(seed=5), 3, 4)
    write_dataset(path, samples)
    back = read_dataset(path)
    assert len(back) == 3
    for s, r in zip(samples, back):
        assert s.true_order == r.true_order
        for fs, fr in zip(s.frames, r.frames):
            assert fs.features.data.astype("<f4").tobytes() == fr.features.data.astype("<f4").tobytes()
    meta = json.loads((tmp_path / "one.tmpo.meta.json").read_text())
    assert meta == {"magic": "TMPO", "version": 1, "N_seq": 4, "P": 8, "D": 32, "count": 3, "float_width": 4}


def test_dataset_bytes_deterministic(tmp_path):
    spec = SceneSpec(seed=77)
    write_dataset(tmp_path / "a.tmpo", gen_dataset(spec, 5, 4))
    write_dataset(tmp_path / "b.tmpo", gen_dataset(spec, 5, 4))
    assert (tmp_path / "a.tmpo").read_bytes() == (tmp_path / "b.tmpo").read_bytes()


def test_corrupted_magic(tmp_path):
    path = tmp_path / "bad.tmpo"
    write_dataset(path, gen_dataset(SceneSpec(), 1, 3))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        read_dataset(path)
    assert exc.value.field == "magic"


def test_bad_version(tmp_path):
    path = tmp_path / "v.tmpo"
    write_dataset(path, [], shape=(3, 2, 2))
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_dataset(path)


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "t.tmpo"
    write_dataset(path, gen_dataset(SceneSpec(), 2, 3))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError) as exc:
        read_dataset(path)
    assert exc.value.offset == len(raw) - 10


def test_mixed_shapes_rejected(tmp_path):
    samples = gen_dataset(SceneSpec(), 1, 3) + gen_dataset(SceneSpec(), 1, 4)
    with pytest.raises(ContractError):
        write_dataset(tmp_path / "x.tmpo", samples)
