import csv
import json

import numpy as np
import pytest

from drprobe.attribution import ActivationAccumulator, AttributionRecord
from drprobe.errors import ComparisonError
from drprobe.probe import RESULT_COLUMNS
from drprobe.report import load_style, render_activation_profile, render_probe_accuracy
from drprobe.stats import SignificanceCell, write_significance_csv
from drprobe.store import write_rollup_csv


def _results(path, model, cells):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for (N, layer), acc in cells.items():
            w.writerow({"model_id": model, "pooling": "first_token", "dataset": "nq", "N": N, "layer": layer,
                        "best_epoch": 1, "val_accuracy": acc, "test_accuracy": acc, "n_test": 10})
    return path


def _read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_probe_figure_sidecar_and_stars(tmp_path):
    base = _results(tmp_path / "a.csv", "base", {(2, 1): 0.5, (2, 2): 0.55, (3, 1): 0.4, (3, 2): 0.41})
    ft = _results(tmp_path / "b.csv", "ft", {(2, 1): 0.6, (2, 2): 0.52, (3, 1): 0.3})
    sig = tmp_path / "sig.csv"
    write_significance_csv(sig, [SignificanceCell("ft", "base", "nq", 2, 1, 1e-5, 0.025, True),
                                 SignificanceCell("ft", "base", "nq", 2, 2, 0.5, 0.025, False)])
    out = tmp_path / "fig"
    paths = render_probe_accuracy([base, ft], sig, out, load_style(baseline="base"))
    names = {p.name for p in paths}
    assert {"probe_accuracy__nq__first_token.svg", "probe_accuracy__nq__first_token.png",
            "probe_accuracy__nq__first_token.csv", "probe_accuracy_warnings.json"} <= names
    rows = _read(out / "probe_accuracy__nq__first_token.csv")
    assert len(rows) == 7
    starred = [(r["model_id"], r["N"], r["layer"]) for r in rows if r["significant"] == "1"]
    assert starred == [("ft", "2", "1")]
    missing = json.loads((out / "probe_accuracy_warnings.json").read_text())["missing_cells"]
    assert missing == [{"dataset": "nq", "pooling": "first_token", "model_id": "ft", "N": 3, "layer": 2}]


def test_figures_are_deterministic(tmp_path):
    base = _results(tmp_path / "a.csv", "base", {(2, 1): 0.5, (2, 2): 0.55})
    style = load_style(monochrome=True)
    render_probe_accuracy(base, None, tmp_path / "x", style)
    render_probe_accuracy(base, None, tmp_path / "y", style)
    for ext in ("svg", "png", "csv"):
        name = f"probe_accuracy__nq__first_token.{ext}"
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_style_file(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"monochrome": True, "formats": ["svg"]}))
    style = load_style(tmp_path / "s.json", dpi=72)
    assert style["monochrome"] and style["formats"] == ["svg"] and style["dpi"] == 72


def _rollup(path, model, topo, seed):
    rng = np.random.default_rng(seed)
    acc = ActivationAccumulator(topo, 0.1)
    for i in range(5):
        acc.add(AttributionRecord(str(i), {k: rng.standard_normal(v).astype(np.float32) for k, v in topo.items()},
                                  20, "frozen_dot", "weighted"))
    write_rollup_csv(path, acc.summary(), model)
    return path


def test_activation_profile(tmp_path):
    topo = {"intermediate": (3, 8), "output": (3, 4)}
    a = _rollup(tmp_path / "a.csv", "base", topo, 0)
    b = _rollup(tmp_path / "b.csv", "ft", topo, 1)
    paths = render_activation_profile([a, b], tmp_path / "fig", "base")
    assert {p.suffix for p in paths} == {".svg", ".png", ".csv"}
    rows = _read(tmp_path / "fig/activation_profile__ft__vs__base.csv")
    assert len(rows) == 2 * 2 * 3


def test_activation_profile_topology_mismatch(tmp_path):
    a = _rollup(tmp_path / "a.csv", "base", {"intermediate": (3, 8), "output": (3, 4)}, 0)
    b = _rollup(tmp_path / "b.csv", "ft", {"intermediate": (2, 8), "output": (2, 4)}, 1)
    with pytest.raises(ComparisonError):
        render_activation_profile([a, b], tmp_path / "fig", "base")
    with pytest.raises(ComparisonError):
        render_activation_profile([a, b], tmp_path / "fig", "other")
