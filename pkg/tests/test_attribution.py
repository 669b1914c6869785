import numpy as np
import pytest
import torch

from conftest import TEXT
from drprobe.attribution import (
    ActivationAccumulator,
    AttributionConfig,
    AttributionRecord,
    NeuronAddress,
    _Attributor,
    active_masks,
    aggregate_activation_frequency,
    attribute_example,
    feed_forward_modules,
    integrated_gradient_attribution,
    model_topology,
    normalize_and_threshold,
    riemann_nodes,
    scalar_output,
)
from drprobe.errors import StorageError
from drprobe.store import (
    AttributionStore,
    read_rollup_csv,
    read_summary_csv,
    write_rollup_csv,
    write_summary_csv,
)


def test_addresses_and_config_validation():
    with pytest.raises(ValueError):
        NeuronAddress(0, "intermediate", 1)
    with pytest.raises(ValueError):
        NeuronAddress(1, "attention", 1)
    for bad in (dict(n_steps=0), dict(scalar_target="logit"), dict(reduction="sum"), dict(scheme="left")):
        with pytest.raises(ValueError):
            AttributionConfig(**bad)


def test_topology(encoder_handle, decoder_handle):
    assert model_topology(encoder_handle.model) == {"intermediate": (2, 64), "output": (2, 16)}
    assert len(feed_forward_modules(decoder_handle.model)) == 2


def test_riemann_weights_sum_to_one():
    for scheme in ("right", "trapezoid"):
        a, w = riemann_nodes(13, scheme)
        assert w.sum() == pytest.approx(1.0) and a[-1] == 1.0


def test_scalar_output_endpoints(encoder_handle):
    cfg = AttributionConfig(pooling="first_token")
    att = _Attributor(encoder_handle, TEXT, cfg)
    ref = att.reference
    addr = NeuronAddress(1, "intermediate", 2)
    assert scalar_output(encoder_handle, TEXT, addr, 1.0, cfg) == pytest.approx(float(ref @ ref))
    with pytest.raises(ValueError):
        scalar_output(encoder_handle, TEXT, addr, 1.5, cfg)


def test_single_neuron_matches_full_record(encoder_handle):
    cfg = AttributionConfig(pooling="mean", n_steps=8)
    rec = attribute_example(encoder_handle, TEXT, "x", cfg)
    for addr in (NeuronAddress(1, "output", 4), NeuronAddress(2, "intermediate", 40)):
        single = integrated_gradient_attribution(encoder_handle, TEXT, addr, 8, cfg)
        assert rec[addr] == pytest.approx(single, rel=1e-5, abs=1e-9)


def test_reductions_and_targets_differ(encoder_handle):
    base = attribute_example(encoder_handle, TEXT, "x", AttributionConfig(pooling="first_token", n_steps=4))
    raw = attribute_example(encoder_handle, TEXT, "x",
                            AttributionConfig(pooling="first_token", n_steps=4, reduction="raw_integral"))
    norm = attribute_example(encoder_handle, TEXT, "x",
                             AttributionConfig(pooling="first_token", n_steps=4, scalar_target="embedding_norm"))
    assert not np.allclose(base.flat(), raw.flat())
    assert not np.allclose(base.flat(), norm.flat())
    assert (raw.reduction, norm.scalar_target) == ("raw_integral", "embedding_norm")


def test_out_of_memory_halves_batch(encoder_handle, monkeypatch):
    cfg = AttributionConfig(pooling="first_token", n_steps=4, rows_per_batch=64)
    att = _Attributor(encoder_handle, TEXT, cfg)
    up, _ = feed_forward_modules(encoder_handle.model)[0]
    expected = att.integrate(up, np.arange(10))
    real = att.run
    sizes = []

    def limited(linear, neurons, alphas, want_vectors=False):
        sizes.append(len(neurons))
        if len(neurons) > 16:
            raise RuntimeError("CUDA out of memory")
        return real(linear, neurons, alphas, want_vectors)

    monkeypatch.setattr(att, "run", limited)
    got = att.integrate(up, np.arange(10))
    np.testing.assert_allclose(got, expected, rtol=1e-10)
    assert sizes[:3] == [40, 32, 16]


def _record(inter, out, rid="r"):
    return AttributionRecord(rid, {"intermediate": np.asarray(inter, np.float32),
                                   "output": np.asarray(out, np.float32)}, 20, "frozen_dot", "weighted")


def test_threshold_examples():
    rec = _record([[10, 1, 0.99], [-5, 2, 3]], [[0.5, 1], [0, 0]])
    active = normalize_and_threshold(rec, 0.1)
    assert active == {NeuronAddress(1, "intermediate", 0), NeuronAddress(1, "intermediate", 1),
                      NeuronAddress(2, "intermediate", 1), NeuronAddress(2, "intermediate", 2),
                      NeuronAddress(1, "output", 1)}
    assert normalize_and_threshold(_record([[-1, -2]], [[-3]]), 0.1) == set()
    with pytest.raises(ValueError):
        active_masks(rec, 0.0)


def test_aggregation_and_rollup():
    topo = {"intermediate": (2, 3), "output": (2, 2)}
    recs = [_record([[1, 0, 0], [0, 0, 0]], [[0, 0], [0, 1]]), _record([[1, 1, 0], [0, 0, 0]], [[0, 0], [0, 0]])]
    summary = aggregate_activation_frequency([normalize_and_threshold(r, 0.5) for r in recs], topo, 0.5)
    np.testing.assert_array_equal(summary.frequencies["intermediate"], [[1, 0.5, 0], [0, 0, 0]])
    roll = {(r["layer"], r["sublayer"]): r for r in summary.rollup()}
    assert roll[(1, "intermediate")]["active_count"] == 3
    assert roll[(1, "intermediate")]["activation_pct"] == pytest.approx(50.0)
    assert roll[(2, "output")]["active_per_example"] == 0.5
    with pytest.raises(ValueError):
        aggregate_activation_frequency([{NeuronAddress(3, "output", 0)}], topo)
    with pytest.raises(ValueError):
        ActivationAccumulator(topo).add(_record([[1]], [[1]]))


def test_store_round_trip(tmp_path, encoder_handle):
    rec = attribute_example(encoder_handle, TEXT, "q-1", AttributionConfig(pooling="first_token", n_steps=2))
    store = AttributionStore(tmp_path / "a.rpat", rec.topology)
    store.append(rec)
    store.append(AttributionRecord("q-2", {k: v * 2 for k, v in rec.scores.items()}, 2, "frozen_dot", "weighted"))
    with open(store.path, "ab") as f:
        f.write(b"\x40\x00\x00\x00partial")
    reopened = AttributionStore(tmp_path / "a.rpat")
    assert reopened.ids() == ["q-1", "q-2"]
    back = list(reopened)[0]
    for k in rec.scores:
        np.testing.assert_array_equal(back.scores[k], rec.scores[k])
    reopened.append(AttributionRecord("q-3", rec.scores, 2, "frozen_dot", "weighted"))
    assert AttributionStore(tmp_path / "a.rpat").ids() == ["q-1", "q-2", "q-3"]
    with pytest.raises(StorageError):
        AttributionStore(tmp_path / "a.rpat", {"intermediate": (1, 1), "output": (1, 1)})
    with pytest.raises(StorageError):
        AttributionStore(tmp_path / "missing.rpat")


def test_summary_csvs_round_trip(tmp_path):
    topo = {"intermediate": (2, 3), "output": (2, 2)}
    rng = np.random.default_rng(0)
    acc = ActivationAccumulator(topo, 0.1)
    for i in range(7):
        acc.add(_record(rng.standard_normal((2, 3)), rng.standard_normal((2, 2)), f"r{i}"))
    summary = acc.summary()
    write_summary_csv(tmp_path / "s.csv", summary)
    back = read_summary_csv(tmp_path / "s.csv", example_count=7)
    for k in topo:
        np.testing.assert_array_equal(back.counts[k], summary.counts[k])
    write_rollup_csv(tmp_path / "r.csv", summary, "m")
    rows = read_rollup_csv(tmp_path / "r.csv")
    assert len(rows) == 4 and all(r["model_id"] == "m" and r["example_count"] == 7 for r in rows)


def test_decoder_attribution_is_finite(decoder_handle):
    rec = attribute_example(decoder_handle, TEXT, "d", AttributionConfig(pooling="last_token", n_steps=2))
    assert np.isfinite(rec.flat()).all()
    assert rec.topology == {"intermediate": (2, 64), "output": (2, 16)}
