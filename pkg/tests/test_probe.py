import math

import numpy as np
import pytest
import torch

from drprobe.cache import EmbeddingCache, text_hash
from drprobe.dataset import ProbeVariant
from drprobe.errors import CacheMissError, ProbeTrainingError
from drprobe.probe import (
    FeatureSet,
    Hyperparameters,
    LinearProbe,
    assemble_features,
    build_feature_set,
    evaluate_probe,
    load_flags,
    read_results,
    run_probe_sweep,
    save_flags,
    train_probe,
)

FAST = Hyperparameters(learning_rate=1e-2, batch_size=64, max_epochs=5)


def _random(n, N, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSet(rng.standard_normal((n, (N + 1) * d)), rng.integers(0, N, n), N, 1,
                      [f"i{k}" for k in range(n)])


def test_assemble_features_order():
    q = np.array([1, 2], np.float32)
    ps = [np.array([3, 4], np.float32), np.array([5, 6], np.float32)]
    f = assemble_features(q, ps, 1, layer=3)
    np.testing.assert_array_equal(f.z, [1, 2, 3, 4, 5, 6])
    assert (f.label, f.N, f.layer) == (1, 2, 3)


def test_feature_set_validation():
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((2, 7)), [0, 1], 2, 1)
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((2, 6)), [0, 2], 2, 1)


def test_initialisation_and_meta():
    probe = train_probe(_random(100, 3), _random(20, 3, seed=1), Hyperparameters(max_epochs=1))
    bound = 1 / math.sqrt(16)
    assert probe.W.shape == (3, 16) and np.abs(probe.W).max() <= bound + 1e-3
    meta = probe.training_meta
    assert (meta["seed"], meta["learning_rate"], meta["batch_size"], meta["max_epochs"]) == (42, 1e-4, 32768, 1)


def test_training_is_deterministic():
    a = train_probe(_random(200, 2), _random(50, 2, seed=1), FAST)
    b = train_probe(_random(200, 2), _random(50, 2, seed=1), FAST)
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.b, b.b)


def test_best_epoch_earliest_on_ties():
    # constant features: every epoch scores the same on validation
    train = FeatureSet(np.ones((40, 6)), np.zeros(40, int), 2, 1)
    probe = train_probe(train, train, FAST)
    assert len(set(probe.training_meta["val_history"])) == 1
    assert probe.training_meta["best_epoch"] == 1


def test_empty_validation_falls_back():
    probe = train_probe(_random(50, 2), FeatureSet(np.zeros((0, 12)), [], 2, 1), FAST)
    assert probe.training_meta["validation_fallback"]
    assert probe.training_meta["best_epoch"] == FAST.max_epochs


def test_nan_loss_raises():
    bad = _random(10, 2)
    bad.Z[0, 0] = np.nan
    with pytest.raises(ProbeTrainingError):
        train_probe(bad, None, FAST)


def test_evaluate_ties_go_to_lowest_index():
    probe = LinearProbe(np.zeros((3, 8), np.float32), np.zeros(3, np.float32), 1, 3, {})
    test = FeatureSet(np.ones((3, 8)), [0, 1, 2], 3, 1, ["a", "b", "c"])
    res = evaluate_probe(probe, test)
    np.testing.assert_array_equal(res.flags, [1, 0, 0])
    with pytest.raises(ValueError):
        evaluate_probe(probe, _random(3, 2))


def test_flags_round_trip(tmp_path):
    probe = train_probe(_random(100, 4), None, FAST)
    res = evaluate_probe(probe, _random(37, 4, seed=3), "m", "mean")
    save_flags(tmp_path / "f.npz", res)
    flags, digest = load_flags(tmp_path / "f.npz")
    np.testing.assert_array_equal(flags, res.flags)
    assert len(digest) == 64


def _caches(tmp_path, texts, L=2, d=3, seed=0):
    rng = np.random.default_rng(seed)
    q = EmbeddingCache.create(tmp_path / "q.rpec", "enc", "mean", L, d, layers=[1, 2])
    p = EmbeddingCache.create(tmp_path / "p.rpec", "enc", "mean", L, d, layers=[1, 2])
    for c in (q, p):
        c.append([text_hash(t) for t in texts], rng.standard_normal((len(texts), L, d)))
    return q, p


def test_feature_set_from_caches(tmp_path):
    q, p = _caches(tmp_path, ["q", "a", "b"])
    v = ProbeVariant("q", ["a", "b"], 1, 2, "id0")
    fs = build_feature_set([v], q, p, layer_pos=1, layer=2)
    np.testing.assert_array_equal(fs.Z[0], np.concatenate([q.get_text("q")[1], p.get_text("a")[1], p.get_text("b")[1]]))
    with pytest.raises(CacheMissError):
        build_feature_set([ProbeVariant("zz", ["a", "b"], 0, 2)], q, p, 0)


def test_sweep_writes_results(tmp_path):
    texts = [f"t{i}" for i in range(60)]
    q, p = _caches(tmp_path, texts)
    rng = np.random.default_rng(1)

    def variants(N, n):
        out = []
        for k in range(n):
            pick = rng.choice(60, N + 1, replace=False)
            out.append(ProbeVariant(texts[pick[0]], [texts[i] for i in pick[1:]], int(rng.integers(N)), N, f"v{k}"))
        return out

    by_n = {N: {"train": variants(N, 40), "validation": variants(N, 10), "test": variants(N, 15)} for N in (2, 3)}
    rows = run_probe_sweep(q, p, by_n, (2, 3), hp=FAST, dataset="toy", out_dir=tmp_path / "res")
    assert [(r["N"], r["layer"]) for r in rows] == [(2, 1), (2, 2), (3, 1), (3, 2)]
    assert read_results(tmp_path / "res/results.csv") == rows
    assert len(list((tmp_path / "res/flags").glob("*.npz"))) == 4
