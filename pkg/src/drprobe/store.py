"""On-disk attribution records and activation summaries.

``attributions.rpat`` layout (little-endian)::

    b"RPAT1" | u32 L | u32 intermediate width | u32 output width
    record*: u32 payload_len | u16 len + example_id | u16 n_steps
             | u8 len + scalar_target | u8 len + reduction
             | L*inter float32 | L*out float32

Each record is one ``write`` call under a file lock; an incomplete trailing
record is ignored by readers and trimmed by the next writer.
"""

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np
from filelock import FileLock

from .attribution import SUBLAYERS, ActivationSummary, AttributionRecord
from .errors import StorageError

MAGIC = b"RPAT1"
_HEADER = struct.Struct("<5sIII")
SUMMARY_COLUMNS = ["layer", "sublayer", "neuron_index", "activation_frequency"]
ROLLUP_COLUMNS = ["model_id", "layer", "sublayer", "n_neurons", "active_count",
                  "active_per_example", "activation_pct", "example_count", "threshold"]


def _short(s, fmt):
    b = s.encode("utf-8")
    return struct.pack(fmt, len(b)) + b


class AttributionStore:
    def __init__(self, path, topology=None):
        self.path = Path(path)
        self.lock = FileLock(str(self.path) + ".lock")
        if not self.path.exists():
            if topology is None:
                raise StorageError(f"{self.path}: store does not exist")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.lock:
                if not self.path.exists():
                    L, inter = topology["intermediate"]
                    _, out = topology["output"]
                    tmp = self.path.with_suffix(".tmp")
                    tmp.write_bytes(_HEADER.pack(MAGIC, L, inter, out))
                    os.replace(tmp, self.path)
        with open(self.path, "rb") as f:
            magic, L, inter, out = _HEADER.unpack(f.read(_HEADER.size))
        if magic != MAGIC:
            raise StorageError(f"{self.path}: not an attribution store")
        self.topology = {"intermediate": (L, inter), "output": (L, out)}
        if topology is not None and {k: tuple(v) for k, v in topology.items()} != self.topology:
            raise StorageError(f"{self.path}: topology mismatch with existing store")

    def _scan(self):
        """Yield ``(offset_end, record)`` for every complete record."""
        with open(self.path, "rb") as f:
            f.seek(_HEADER.size)
            while True:
                head = f.read(4)
                if len(head) < 4:
                    return
                (n,) = struct.unpack("<I", head)
                body = f.read(n)
                if len(body) < n:
                    return
                yield f.tell(), self._decode(body)

    def _decode(self, body):
        pos = 0
        (k,) = struct.unpack_from("<H", body, pos); pos += 2
        example_id = body[pos:pos + k].decode("utf-8"); pos += k
        (n_steps,) = struct.unpack_from("<H", body, pos); pos += 2
        (k,) = struct.unpack_from("<B", body, pos); pos += 1
        target = body[pos:pos + k].decode("utf-8"); pos += k
        (k,) = struct.unpack_from("<B", body, pos); pos += 1
        reduction = body[pos:pos + k].decode("utf-8"); pos += k
        scores = {}
        for name in SUBLAYERS:
            L, w = self.topology[name]
            arr = np.frombuffer(body, dtype="<f4", count=L * w, offset=pos).reshape(L, w)
            scores[name] = arr.copy()
            pos += 4 * L * w
        return AttributionRecord(example_id, scores, n_steps, target, reduction)

    def __iter__(self):
        for _, rec in self._scan():
            yield rec

    def ids(self):
        return [rec.example_id for rec in self]

    def append(self, record):
        if {k: tuple(v) for k, v in record.topology.items()} != self.topology:
            raise StorageError("record topology does not match the store")
        body = (
            _short(record.example_id, "<H")
            + struct.pack("<H", record.n_steps)
            + _short(record.scalar_target, "<B")
            + _short(record.reduction, "<B")
            + b"".join(np.ascontiguousarray(record.scores[n], dtype="<f4").tobytes() for n in SUBLAYERS)
        )
        blob = struct.pack("<I", len(body)) + body
        with self.lock:
            end = _HEADER.size
            for end, _ in self._scan():
                pass
            with open(self.path, "r+b") as f:
                f.truncate(end)
                f.seek(end)
                f.write(blob)
                f.flush()
                os.fsync(f.fileno())


def write_manifest(path, **data):
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=2, default=str))
    os.replace(tmp, path)


def write_summary_csv(path, summary):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for layer, name, i, freq in summary.rows():
            w.writerow([layer, name, i, repr(freq)])


def read_summary_csv(path, example_count=None, threshold=float("nan")):
    """Rebuild an ``ActivationSummary`` (frequencies; counts if ``example_count`` given)."""
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.append((int(r["layer"]), r["sublayer"], int(r["neuron_index"]), float(r["activation_frequency"])))
    freqs = {}
    for name in SUBLAYERS:
        sub = [r for r in rows if r[1] == name]
        if not sub:
            raise ValueError(f"{path}: no rows for sub-layer {name!r}")
        L = max(r[0] for r in sub)
        width = max(r[2] for r in sub) + 1
        arr = np.zeros((L, width))
        for layer, _, i, fr in sub:
            arr[layer - 1, i] = fr
        freqs[name] = arr
    n = example_count or 1
    counts = {k: np.rint(v * n).astype(np.int64) if example_count else v for k, v in freqs.items()}
    return ActivationSummary(counts, threshold, n)


def write_rollup_csv(path, summary, model_id):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ROLLUP_COLUMNS)
        w.writeheader()
        for row in summary.rollup():
            w.writerow({**row, "model_id": model_id, "example_count": summary.example_count,
                        "threshold": summary.threshold})


def read_rollup_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in ("layer", "n_neurons", "active_count", "example_count"):
            r[k] = int(r[k])
        for k in ("active_per_example", "activation_pct", "threshold"):
            r[k] = float(r[k])
    return rows
