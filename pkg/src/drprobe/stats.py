"""Paired significance tests between a fine-tuned model and its backbone."""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import kernels
from .errors import InsufficientDataError, PairingError
from .probe import flags_filename, load_flags

ALPHA = 0.05
SIGNIFICANCE_COLUMNS = ["model", "baseline", "dataset", "N", "layer", "p_value",
                        "corrected_alpha", "significant"]


@dataclass
class SignificanceCell:
    model_id: str
    baseline_id: str
    dataset: str
    N: int
    layer: int
    p_value: float
    corrected_alpha: float
    significant: bool

    def as_row(self):
        return {
            "model": self.model_id,
            "baseline": self.baseline_id,
            "dataset": self.dataset,
            "N": self.N,
            "layer": self.layer,
            "p_value": repr(self.p_value),
            "corrected_alpha": repr(self.corrected_alpha),
            "significant": int(self.significant),
        }


def bonferroni_alpha(num_comparisons, alpha=ALPHA):
    if num_comparisons < 1:
        raise ValueError("num_comparisons must be >= 1")
    return alpha / num_comparisons


def paired_t_test(a, b):
    """Two-tailed paired t-test on ``a - b``; returns ``(t, p)``.

    Zero variance: p = 1 when the mean difference is zero, else p = 0.
    """
    mean, var, n = kernels.paired_moments(a, b)
    if var == 0.0:
        return (0.0, 1.0) if mean == 0.0 else (math.copysign(math.inf, mean), 0.0)
    t = mean / math.sqrt(var / n)
    p = 2.0 * special.stdtr(n - 1, -abs(t))
    return t, float(min(max(p, 0.0), 1.0))


def compare_models(flags_a, flags_b, num_comparisons, model_id="", baseline_id="",
                   dataset="", N=0, layer=0, alpha=ALPHA):
    a = np.asarray(flags_a, dtype=np.float64)
    b = np.asarray(flags_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"flag vectors differ in length: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise InsufficientDataError("a paired t-test needs at least 2 examples")
    _, p = paired_t_test(a, b)
    corrected = bonferroni_alpha(num_comparisons, alpha)
    return SignificanceCell(model_id, baseline_id, dataset, N, layer, p, corrected, p < corrected)


def significance_table(results, baseline_id, scope="layers", alpha=ALPHA):
    """One cell per (model, dataset, N, layer) against the baseline's matching result.

    Pairs are matched on dataset, pooling, N and layer. ``results`` holds dicts
    with keys model_id, dataset, N, layer, flags and optionally pooling and
    ids_digest (checked when both sides have one). ``scope`` sets
    the Bonferroni family: "layers" (per model and N) or "layers_x_n".
    """
    if scope not in ("layers", "layers_x_n"):
        raise ValueError("scope must be 'layers' or 'layers_x_n'")
    base = {}
    for r in results:
        if r["model_id"] == baseline_id:
            base[(r["dataset"], r.get("pooling", ""), r["N"], r["layer"])] = r
    if not base:
        raise PairingError(f"no results for baseline {baseline_id!r}")
    others = [r for r in results if r["model_id"] != baseline_id]
    family = {}
    for r in others:
        key = (r["model_id"], r["dataset"]) + ((r["N"],) if scope == "layers" else ())
        family.setdefault(key, set()).add((r["N"], r["layer"]))
    cells = []
    for r in sorted(others, key=lambda r: (r["model_id"], r["dataset"], r["N"], r["layer"])):
        key = (r["dataset"], r.get("pooling", ""), r["N"], r["layer"])
        if key not in base:
            raise PairingError(
                f"no baseline result for model {r['model_id']} dataset {key[0]} pooling {key[1]!r} "
                f"N={key[2]} layer={key[3]}")
        other = base[key]
        da, db = r.get("ids_digest"), other.get("ids_digest")
        if da and db and da != db:
            raise PairingError(f"test examples differ between {r['model_id']} and {baseline_id} at {key}")
        fkey = (r["model_id"], r["dataset"]) + ((r["N"],) if scope == "layers" else ())
        cells.append(compare_models(r["flags"], other["flags"], len(family[fkey]),
                                    r["model_id"], baseline_id, r["dataset"], r["N"], r["layer"], alpha))
    return cells


def collect_results(results_dirs):
    """Load probe rows plus their correctness sidecars from sweep output directories."""
    from .probe import read_results

    out = []
    for d in results_dirs:
        d = Path(d)
        for row in read_results(d / "results.csv"):
            flags, digest = load_flags(d / "flags" / flags_filename(row["model_id"], row["pooling"], row["N"], row["layer"]))
            out.append({**row, "flags": flags, "ids_digest": digest})
    return out


def write_significance_csv(path, cells):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SIGNIFICANCE_COLUMNS)
        w.writeheader()
        for c in cells:
            w.writerow(c.as_row())


def read_significance_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        SignificanceCell(r["model"], r["baseline"], r["dataset"], int(r["N"]), int(r["layer"]),
                         float(r["p_value"]), float(r["corrected_alpha"]), bool(int(r["significant"])))
        for r in rows
    ]
