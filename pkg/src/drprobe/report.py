"""Figures for probe accuracy and neuron-activation profiles.

Every figure is written next to a sidecar CSV holding exactly the plotted
numbers, so the charts can always be regenerated or checked.
"""

import csv
import json
import logging
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ComparisonError  # noqa: E402
from .probe import read_results  # noqa: E402
from .stats import read_significance_csv  # noqa: E402
from .store import read_rollup_csv  # noqa: E402

logger = logging.getLogger(__name__)

DEFAULT_STYLE = {
    "monochrome": False,
    "formats": ["svg", "png"],
    "dpi": 150,
    "panel_width": 3.6,
    "panel_height": 3.0,
    "baseline": None,
}
PROBE_SIDECAR_COLUMNS = ["model_id", "pooling", "dataset", "N", "layer", "test_accuracy", "significant"]
ACTIVATION_SIDECAR_COLUMNS = ["model_id", "sublayer", "layer", "activation_pct"]
_MARKERS = ["o", "s", "^", "D", "v", "P", "X"]
_LINESTYLES = ["-", "--", "-.", ":"]


def load_style(path=None, **overrides):
    style = dict(DEFAULT_STYLE)
    if path:
        text = Path(path).read_text()
        if str(path).endswith((".yml", ".yaml")):
            import yaml

            style.update(yaml.safe_load(text) or {})
        else:
            style.update(json.loads(text))
    style.update({k: v for k, v in overrides.items() if v is not None})
    return style


def _series_style(i, style):
    if style["monochrome"]:
        return dict(color="black", marker=_MARKERS[i % len(_MARKERS)],
                    linestyle=_LINESTYLES[i % len(_LINESTYLES)], markerfacecolor="white")
    return dict(color=f"C{i}", marker=_MARKERS[i % len(_MARKERS)], linestyle="-")


def _save(fig, base, style):
    plt.rcParams["svg.hashsalt"] = "drprobe"
    paths = []
    for fmt in style["formats"]:
        path = base.with_suffix(f".{fmt}")
        meta = {"Date": None} if fmt == "svg" else {"Software": None} if fmt == "png" else None
        fig.savefig(path, dpi=style["dpi"], metadata=meta)
        paths.append(path)
    plt.close(fig)
    return paths


def _ordered_models(models, baseline):
    models = sorted(models)
    if baseline in models:
        models.remove(baseline)
        models.insert(0, baseline)
    return models


def _headroom(values):
    vals = [v for v in values if np.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    pad = max((hi - lo) * 0.15, 0.02 * max(abs(hi), 1e-9), 1e-3)
    return lo - pad, hi + 2 * pad


def render_probe_accuracy(results_csv, significance_csv, out_dir, style=None):
    """One figure per (dataset, pooling) with one panel per N; returns written paths."""
    style = style or load_style()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in ([results_csv] if isinstance(results_csv, (str, Path)) else results_csv):
        rows.extend(read_results(p))
    sig = set()
    if significance_csv and Path(significance_csv).exists():
        for c in read_significance_csv(significance_csv):
            if c.significant:
                sig.add((c.model_id, c.dataset, c.N, c.layer))
    groups = defaultdict(list)
    for r in rows:
        groups[(r["dataset"], r["pooling"])].append(r)
    written = []
    warnings = []
    for (dataset, pooling), grp in sorted(groups.items()):
        n_values = sorted({r["N"] for r in grp})
        layers = sorted({r["layer"] for r in grp})
        models = _ordered_models({r["model_id"] for r in grp}, style.get("baseline"))
        cell = {(r["model_id"], r["N"], r["layer"]): r["test_accuracy"] for r in grp}
        fig, axes = plt.subplots(1, len(n_values), squeeze=False, layout="constrained",
                                 figsize=(style["panel_width"] * len(n_values), style["panel_height"]))
        sidecar = []
        for ax, N in zip(axes[0], n_values):
            panel_vals = []
            for i, m in enumerate(models):
                ys = []
                for layer in layers:
                    v = cell.get((m, N, layer), np.nan)
                    if (m, N, layer) not in cell:
                        warnings.append({"dataset": dataset, "pooling": pooling, "model_id": m, "N": N, "layer": layer})
                    ys.append(v)
                    if np.isfinite(v):
                        sidecar.append({"model_id": m, "pooling": pooling, "dataset": dataset, "N": N,
                                        "layer": layer, "test_accuracy": repr(float(v)),
                                        "significant": int((m, dataset, N, layer) in sig)})
                panel_vals.extend(ys)
                ax.plot(layers, ys, label=m, **_series_style(i, style))
            lo, hi = _headroom(panel_vals)
            for i, m in enumerate(models):
                color = _series_style(i, style)["color"]
                for layer in layers:
                    v = cell.get((m, N, layer))
                    if v is not None and (m, dataset, N, layer) in sig:
                        ax.annotate("*", (layer, v), textcoords="offset points", xytext=(0, 4),
                                    ha="center", color=color, fontsize=12)
            ax.set_ylim(lo, hi)
            ax.set_title(f"N={N}")
            ax.set_xlabel("layer")
            ax.set_xticks(layers)
        axes[0][0].set_ylabel("accuracy")
        axes[0][0].legend(fontsize=7)
        fig.suptitle(f"{dataset} ({pooling})")
        base = out_dir / f"probe_accuracy__{dataset}__{pooling}"
        written.extend(_save(fig, base, style))
        written.append(_write_csv(base.with_suffix(".csv"), PROBE_SIDECAR_COLUMNS, sidecar))
    if warnings:
        path = out_dir / "probe_accuracy_warnings.json"
        path.write_text(json.dumps({"missing_cells": warnings}, indent=2))
        logger.warning("%d probe cells missing; see %s", len(warnings), path)
        written.append(path)
    return written


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    return path


def _profile(rows):
    """``{sublayer: {layer: pct}}`` plus widths, for one model's rollup rows."""
    prof = defaultdict(dict)
    widths = {}
    for r in rows:
        prof[r["sublayer"]][r["layer"]] = r["activation_pct"]
        widths.setdefault(r["sublayer"], r["n_neurons"])
    return prof, widths


def render_activation_profile(rollup_csvs, out_dir, baseline_id=None, style=None):
    """Paired intermediate/output panels of per-layer activation percentage vs. a baseline."""
    style = style or load_style()
    baseline_id = baseline_id or style.get("baseline")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_model = defaultdict(list)
    for p in ([rollup_csvs] if isinstance(rollup_csvs, (str, Path)) else rollup_csvs):
        for r in read_rollup_csv(p):
            by_model[r["model_id"]].append(r)
    if baseline_id is None:
        if len(by_model) != 2:
            raise ComparisonError("name the baseline model when comparing more than two summaries")
        baseline_id = sorted(by_model)[0]
    if baseline_id not in by_model:
        raise ComparisonError(f"no activation summary for baseline {baseline_id!r}")
    base_prof, base_widths = _profile(by_model[baseline_id])
    written = []
    for model_id in sorted(m for m in by_model if m != baseline_id):
        prof, widths = _profile(by_model[model_id])
        if widths != base_widths or {k: sorted(v) for k, v in prof.items()} != {k: sorted(v) for k, v in base_prof.items()}:
            raise ComparisonError(f"topology of {model_id} differs from {baseline_id}")
        fig, axes = plt.subplots(1, 2, layout="constrained",
                                 figsize=(style["panel_width"] * 2, style["panel_height"]))
        sidecar = []
        for ax, sub in zip(axes, ("intermediate", "output")):
            layers = sorted(base_prof[sub])
            vals = []
            for i, m in enumerate((baseline_id, model_id)):
                p = base_prof if m == baseline_id else prof
                ys = [p[sub][layer] for layer in layers]
                vals.extend(ys)
                ax.plot(layers, ys, label=m, **_series_style(i, style))
                sidecar.extend({"model_id": m, "sublayer": sub, "layer": layer, "activation_pct": repr(float(y))}
                               for layer, y in zip(layers, ys))
            lo, hi = _headroom(vals)
            ax.set_ylim(max(lo, 0.0), min(hi, 100.0) if hi <= 100 else hi)
            ax.set_xticks(layers)
            ax.set_xlabel("layer")
            ax.set_title(f"{sub} layers")
        axes[0].set_ylabel("% examples active")
        axes[0].legend(fontsize=7)
        base = out_dir / f"activation_profile__{_safe(model_id)}__vs__{_safe(baseline_id)}"
        written.extend(_save(fig, base, style))
        written.append(_write_csv(base.with_suffix(".csv"), ACTIVATION_SIDECAR_COLUMNS, sidecar))
    return written


def _safe(s):
    from .cache import _slug

    return _slug(s)
