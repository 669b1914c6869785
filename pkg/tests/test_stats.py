import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drprobe.errors import InsufficientDataError, PairingError
from drprobe.stats import (
    bonferroni_alpha,
    compare_models,
    paired_t_test,
    read_significance_csv,
    significance_table,
    write_significance_csv,
)


def test_degenerate_differences():
    ones, zeros = np.ones(50), np.zeros(50)
    assert paired_t_test(ones, zeros)[1] < 1e-10
    assert paired_t_test(ones, ones)[1] == 1.0
    assert paired_t_test(zeros, zeros)[1] == 1.0


def test_bad_inputs():
    with pytest.raises(ValueError):
        compare_models([1, 0], [1], 1)
    with pytest.raises(InsufficientDataError):
        compare_models([1], [0], 1)
    with pytest.raises(ValueError):
        bonferroni_alpha(0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=200))
def test_symmetry(pairs):
    a, b = np.array(pairs).T
    t1, p1 = paired_t_test(a, b)
    t2, p2 = paired_t_test(b, a)
    assert p1 == pytest.approx(p2, abs=1e-15)
    assert t1 == -t2 or (t1 == t2 == 0.0)
    assert 0.0 <= p1 <= 1.0


def _row(model, N, layer, flags, dataset="nq", pooling="first_token", digest="x"):
    return {"model_id": model, "dataset": dataset, "pooling": pooling, "N": N, "layer": layer,
            "flags": np.asarray(flags), "ids_digest": digest}


def test_table_family_sizes():
    rng = np.random.default_rng(0)
    rows = []
    for model in ("base", "ft"):
        for N in (2, 3):
            for layer in (1, 2, 3):
                rows.append(_row(model, N, layer, rng.integers(0, 2, 100)))
    cells = significance_table(rows, "base", "layers")
    assert len(cells) == 6
    assert {c.corrected_alpha for c in cells} == {0.05 / 3}
    cells = significance_table(rows, "base", "layers_x_n")
    assert {c.corrected_alpha for c in cells} == {0.05 / 6}
    assert all(c.significant == (c.p_value < c.corrected_alpha) for c in cells)


def test_table_pairing_errors():
    flags = np.ones(10)
    with pytest.raises(PairingError):
        significance_table([_row("ft", 2, 1, flags)], "base")
    with pytest.raises(PairingError):
        significance_table([_row("base", 2, 1, flags), _row("ft", 2, 2, flags)], "base")
    with pytest.raises(PairingError):
        significance_table([_row("base", 2, 1, flags, digest="a"), _row("ft", 2, 1, flags, digest="b")], "base")
    with pytest.raises(PairingError):
        significance_table([_row("base", 2, 1, flags), _row("ft", 2, 1, flags, pooling="mean")], "base")


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    rows = [_row(m, 2, l, rng.integers(0, 2, 80)) for m in ("base", "ft") for l in (1, 2)]
    cells = significance_table(rows, "base")
    write_significance_csv(tmp_path / "s.csv", cells)
    assert read_significance_csv(tmp_path / "s.csv") == cells
