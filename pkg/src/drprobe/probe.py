"""N-way linear relevance probes over concatenated query/passage embeddings."""

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .cache import text_hash
from .dataset import PROBE_SIZES
from .errors import ProbeTrainingError

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["model_id", "pooling", "dataset", "N", "layer", "best_epoch",
                  "val_accuracy", "test_accuracy", "n_test"]


@dataclass
class Hyperparameters:
    learning_rate: float = 1e-4
    batch_size: int = 32768
    max_epochs: int = 30
    seed: int = 42


@dataclass
class ProbeFeatures:
    z: np.ndarray
    label: int
    layer: int
    N: int

    def __post_init__(self):
        if self.z.shape[0] % (self.N + 1):
            raise ValueError(f"feature length {self.z.shape[0]} is not a multiple of N+1={self.N + 1}")
        if not 0 <= self.label < self.N:
            raise ValueError(f"label {self.label} outside [0, {self.N})")


@dataclass
class FeatureSet:
    """A stack of feature vectors sharing N, d and layer."""

    Z: np.ndarray  # (n, (N+1)d)
    labels: np.ndarray  # (n,)
    N: int
    layer: int
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.Z.ndim != 2 or self.Z.shape[0] != self.labels.shape[0]:
            raise ValueError("Z must be (n, (N+1)d) with one label per row")
        if self.Z.shape[1] % (self.N + 1):
            raise ValueError(f"feature width {self.Z.shape[1]} is not a multiple of N+1={self.N + 1}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.N):
            raise ValueError(f"labels must lie in [0, {self.N})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def d(self):
        return self.Z.shape[1] // (self.N + 1)

    def __getitem__(self, i):
        return ProbeFeatures(self.Z[i], int(self.labels[i]), self.layer, self.N)


@dataclass
class LinearProbe:
    W: np.ndarray  # (N, (N+1)d)
    b: np.ndarray  # (N,)
    layer: int
    N: int
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.W.shape[0] != self.N or self.W.shape[1] % (self.N + 1):
            raise ValueError(f"W shape {self.W.shape} does not fit N={self.N}")
        if self.b.shape != (self.N,):
            raise ValueError(f"b shape {self.b.shape} does not fit N={self.N}")

    @property
    def d(self):
        return self.W.shape[1] // (self.N + 1)

    def logits(self, Z):
        return np.asarray(Z, dtype=np.float64) @ self.W.T.astype(np.float64) + self.b


@dataclass
class ProbeResult:
    accuracy: float
    flags: np.ndarray
    model_id: str = ""
    pooling: str = ""
    N: int = 0
    layer: int = 0
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=np.uint8)


def assemble_features(q, passages, label, layer=0):
    q = np.asarray(q, dtype=np.float32)
    d = q.shape[0]
    for i, p in enumerate(passages):
        if np.shape(p) != (d,):
            raise ValueError(f"passage {i} has shape {np.shape(p)}, expected ({d},)")
    N = len(passages)
    if not 0 <= label < N:
        raise ValueError(f"label {label} outside [0, {N})")
    z = np.concatenate([q] + [np.asarray(p, dtype=np.float32) for p in passages])
    return ProbeFeatures(z, int(label), layer, N)


def build_feature_set(variants, query_cache, passage_cache, layer_pos, layer=None):
    """Gather cached embeddings for ``variants`` at one layer position into a FeatureSet."""
    if not variants:
        raise ValueError("no variants to featurize")
    N = variants[0].N
    qh = [text_hash(v.query_text.strip()) for v in variants]
    ph = [text_hash(p.strip()) for v in variants for p in v.passages]
    q = query_cache.gather(qh, layer_pos)
    p = passage_cache.gather(ph, layer_pos).reshape(len(variants), N, -1)
    Z = np.concatenate([q[:, None, :], p], axis=1).reshape(len(variants), -1)
    labels = [v.label for v in variants]
    if layer is None:
        layer = layer_pos + 1
    return FeatureSet(Z, labels, N, layer, [v.instance_id for v in variants])


def _init_linear(N, width, gen):
    bound = 1.0 / math.sqrt(width)
    W = (torch.rand((N, width), generator=gen) * 2 - 1) * bound
    return W, torch.zeros(N)


def _accuracy(W, b, Z, y):
    if len(y) == 0:
        return float("nan")
    with torch.no_grad():
        logits = Z @ W.T + b
    return float(kernels.argmax_correct(logits.double().numpy(), y.numpy()).mean())


def train_probe(train, validation, hp=None):
    """Fit softmax(Wz + b) by mini-batch Adam; keep the best-validation epoch.

    Ties in validation accuracy keep the earliest epoch. An empty validation
    set falls back to the final-epoch parameters and sets
    ``training_meta['validation_fallback']``.
    """
    hp = hp or Hyperparameters()
    if len(train) == 0:
        raise ValueError("training set is empty")
    if validation is not None and len(validation) and (validation.N, validation.d) != (train.N, train.d):
        raise ValueError("train and validation features disagree on N or d")
    gen = torch.Generator().manual_seed(hp.seed)
    Zt = torch.from_numpy(train.Z)
    yt = torch.from_numpy(train.labels)
    has_val = validation is not None and len(validation) > 0
    if has_val:
        Zv = torch.from_numpy(validation.Z)
        yv = torch.from_numpy(validation.labels)

    W0, b0 = _init_linear(train.N, train.Z.shape[1], gen)
    W = W0.clone().requires_grad_(True)
    b = b0.clone().requires_grad_(True)
    opt = torch.optim.Adam([W, b], lr=hp.learning_rate)

    best = (W.detach().clone(), b.detach().clone())
    best_acc, best_epoch = -1.0, 0
    history = []
    n = len(train)
    for epoch in range(1, hp.max_epochs + 1):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            logits = Zt[idx] @ W.T + b
            loss = torch.nn.functional.cross_entropy(logits, yt[idx])
            if not torch.isfinite(loss):
                raise ProbeTrainingError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if has_val:
            acc = _accuracy(W.detach(), b.detach(), Zv, yv)
            history.append(acc)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best = (W.detach().clone(), b.detach().clone())
        logger.debug("epoch %d loss %.5f", epoch, total / n)

    meta = {
        "seed": hp.seed,
        "learning_rate": hp.learning_rate,
        "batch_size": hp.batch_size,
        "max_epochs": hp.max_epochs,
        "epochs_run": hp.max_epochs,
        "val_history": history,
        "validation_fallback": not has_val,
    }
    if has_val:
        meta.update(best_epoch=best_epoch, best_val_accuracy=best_acc)
    else:
        logger.warning("empty validation set; using final-epoch probe parameters")
        best = (W.detach().clone(), b.detach().clone())
        meta.update(best_epoch=hp.max_epochs, best_val_accuracy=float("nan"))
    return LinearProbe(best[0].numpy().astype(np.float32), best[1].numpy().astype(np.float32),
                       train.layer, train.N, meta)


def evaluate_probe(probe, test, model_id="", pooling=""):
    """Argmax accuracy with ties broken toward the lowest index."""
    if test.N != probe.N or test.Z.shape[1] != probe.W.shape[1]:
        raise ValueError(
            f"probe expects N={probe.N}, width {probe.W.shape[1]}; "
            f"features have N={test.N}, width {test.Z.shape[1]}"
        )
    flags = kernels.argmax_correct(probe.logits(test.Z), test.labels)
    acc = float(flags.mean()) if len(flags) else float("nan")
    return ProbeResult(acc, flags, model_id, pooling, probe.N, probe.layer, list(test.ids))


def ids_digest(ids):
    return hashlib.sha256("\n".join(ids).encode("utf-8")).hexdigest()


def flags_filename(model_id, pooling, N, layer):
    from .cache import _slug

    return f"{_slug(model_id)}__{pooling}__N{N}__L{layer}.npz"


def save_flags(path, result):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        packed=np.packbits(result.flags),
        n=np.int64(len(result.flags)),
        ids_digest=np.array(ids_digest(result.ids)),
    )


def load_flags(path):
    with np.load(path) as data:
        n = int(data["n"])
        flags = np.unpackbits(data["packed"])[:n]
        return flags, str(data["ids_digest"])


def run_probe_sweep(query_cache, passage_cache, variants_by_n, n_list=PROBE_SIZES, layers=None,
                    hp=None, model_id=None, pooling=None, dataset="custom", out_dir=None):
    """Train and evaluate one probe per (N, layer) cell.

    ``variants_by_n`` maps N to ``{"train": [...], "validation": [...], "test": [...]}``.
    Query and passage caches may differ (paired-encoder configuration).
    Returns result-table rows; with ``out_dir`` also writes ``results.csv`` and
    per-cell correctness sidecars under ``flags/``.
    """
    hp = hp or Hyperparameters()
    if model_id is None:
        model_id = query_cache.model_id
        if passage_cache.model_id != query_cache.model_id:
            model_id = f"{query_cache.model_id}+{passage_cache.model_id}"
    pooling = pooling or query_cache.pooling
    cache_layers = query_cache.layers()
    if passage_cache.layers() != cache_layers:
        raise ValueError("query and passage caches hold different layers")
    wanted = cache_layers if layers is None else list(layers)
    rows = []
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        results_path = out_dir / "results.csv"
        new_file = not results_path.exists()
        fh = open(results_path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if new_file:
            writer.writeheader()
    try:
        for N in n_list:
            splits = variants_by_n[N]
            for layer in wanted:
                pos = cache_layers.index(layer)
                train = build_feature_set(splits["train"], query_cache, passage_cache, pos, layer)
                val = (build_feature_set(splits["validation"], query_cache, passage_cache, pos, layer)
                       if splits.get("validation") else None)
                test = build_feature_set(splits["test"], query_cache, passage_cache, pos, layer)
                probe = train_probe(train, val, hp)
                result = evaluate_probe(probe, test, model_id, pooling)
                row = {
                    "model_id": model_id,
                    "pooling": pooling,
                    "dataset": dataset,
                    "N": N,
                    "layer": layer,
                    "best_epoch": probe.training_meta["best_epoch"],
                    "val_accuracy": probe.training_meta["best_val_accuracy"],
                    "test_accuracy": result.accuracy,
                    "n_test": len(test),
                }
                rows.append(row)
                logger.info("N=%d layer=%d test accuracy %.4f", N, layer, result.accuracy)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                    save_flags(out_dir / "flags" / flags_filename(model_id, pooling, N, layer), result)
    finally:
        if writer is not None:
            fh.close()
    return rows


def read_results(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["N"] = int(r["N"])
        r["layer"] = int(r["layer"])
        r["best_epoch"] = int(r["best_epoch"])
        r["n_test"] = int(r["n_test"])
        r["val_accuracy"] = float(r["val_accuracy"])
        r["test_accuracy"] = float(r["test_accuracy"])
    return rows


def probe_to_dict(probe):
    d = asdict(probe)
    d["W"] = probe.W.tolist()
    d["b"] = probe.b.tolist()
    return d
