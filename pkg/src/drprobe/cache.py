"""Persistent per-layer embedding cache.

Binary layout (all little-endian)::

    b"RPEC1" | u16 len | model_id utf-8 | u16 len | pooling utf-8 | u32 L | u32 d | b"<f4\\0"
    record*: u32 payload_len | 64-byte hex sha256 of the text | L*d float32

Records have a fixed size, so the body is read back through ``numpy.memmap``.
A trailing partial record (interrupted write) is ignored on read and trimmed
before the next append. A JSON manifest sits next to the binary file.
"""

import hashlib
import json
import os
import re
import struct
from pathlib import Path

import numpy as np
from filelock import FileLock

from .errors import CacheMissError, StorageError

MAGIC = b"RPEC1"
DTYPE_TAG = b"<f4\x00"
HASH_BYTES = 64


def text_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _slug(model_id):
    return re.sub(r"[^A-Za-z0-9._-]+", "_", model_id).strip("_") or "model"


def cache_filename(model_id, pooling):
    return f"{_slug(model_id)}__{pooling}.rpec"


def _pack_header(model_id, pooling, L, d):
    mid = model_id.encode("utf-8")
    pool = pooling.encode("utf-8")
    return (
        MAGIC
        + struct.pack("<H", len(mid)) + mid
        + struct.pack("<H", len(pool)) + pool
        + struct.pack("<II", L, d)
        + DTYPE_TAG
    )


def _read_header(f):
    if f.read(5) != MAGIC:
        raise StorageError(f"{f.name}: not an embedding cache (bad magic)")
    (n,) = struct.unpack("<H", f.read(2))
    model_id = f.read(n).decode("utf-8")
    (n,) = struct.unpack("<H", f.read(2))
    pooling = f.read(n).decode("utf-8")
    L, d = struct.unpack("<II", f.read(8))
    if f.read(4) != DTYPE_TAG:
        raise StorageError(f"{f.name}: unsupported value type")
    return model_id, pooling, L, d, f.tell()


class EmbeddingCache:
    """Append-only store of ``(text_hash -> L x d float32)`` for one model and pooling."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            self.model_id, self.pooling, self.L, self.d, self._offset = _read_header(f)
        self.record_dtype = np.dtype(
            [("len", "<u4"), ("hash", f"S{HASH_BYTES}"), ("vec", "<f4", (self.L, self.d))]
        )
        self._load_index()

    @property
    def manifest_path(self):
        return self.path.with_suffix(".manifest.json")

    @classmethod
    def create(cls, path, model_id, pooling, L, d, layers=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(path) + ".lock"):
            if not path.exists():
                tmp = path.with_suffix(".tmp")
                with open(tmp, "wb") as f:
                    f.write(_pack_header(model_id, pooling, L, d))
                os.replace(tmp, path)
        cache = cls(path)
        if (cache.model_id, cache.pooling, cache.L, cache.d) != (model_id, pooling, L, d):
            raise StorageError(
                f"{path}: existing cache holds ({cache.model_id}, {cache.pooling}, "
                f"L={cache.L}, d={cache.d}); refusing to mix with "
                f"({model_id}, {pooling}, L={L}, d={d})"
            )
        if layers is not None and not cache.manifest_path.exists():
            cache.write_manifest(layers=list(layers), status="complete")
        return cache

    def _complete_records(self):
        size = self.path.stat().st_size - self._offset
        return max(size, 0) // self.record_dtype.itemsize

    def _load_index(self):
        n = self._complete_records()
        if n:
            self._mm = np.memmap(self.path, dtype=self.record_dtype, mode="r",
                                 offset=self._offset, shape=(n,))
            payload = HASH_BYTES + 4 * self.L * self.d
            if not np.all(self._mm["len"] == payload):
                raise StorageError(f"{self.path}: corrupt record length field")
            hashes = [h.decode("ascii") for h in self._mm["hash"]]
        else:
            self._mm = None
            hashes = []
        self._index = {h: i for i, h in enumerate(hashes)}

    def __len__(self):
        return len(self._index)

    def __contains__(self, key):
        return key in self._index

    def hashes(self):
        return list(self._index)

    def get(self, key):
        try:
            i = self._index[key]
        except KeyError:
            raise CacheMissError(key, self.path) from None
        return np.array(self._mm["vec"][i])

    def get_text(self, text):
        return self.get(text_hash(text))

    def gather(self, keys, layer_pos=None):
        """Stack vectors for ``keys``: (n, L, d), or (n, d) for one layer position."""
        rows = []
        for k in keys:
            try:
                rows.append(self._index[k])
            except KeyError:
                raise CacheMissError(k, self.path) from None
        idx = np.asarray(rows, dtype=np.int64)
        if self._mm is None:
            shape = (0, self.d) if layer_pos is not None else (0, self.L, self.d)
            return np.zeros(shape, dtype=np.float32)
        vec = self._mm["vec"]
        if layer_pos is None:
            return np.asarray(vec[idx])
        return np.asarray(vec[idx, layer_pos])

    def layers(self):
        if self.manifest_path.exists():
            layers = json.loads(self.manifest_path.read_text()).get("layers")
            if layers:
                return list(layers)
        return list(range(1, self.L + 1))

    def append(self, keys, vectors):
        """Commit records; each record is written with a single ``write`` call."""
        vectors = np.asarray(vectors, dtype="<f4")
        if vectors.shape[1:] != (self.L, self.d):
            raise ValueError(f"expected vectors of shape (*, {self.L}, {self.d}), got {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ValueError("refusing to cache non-finite embeddings")
        payload = HASH_BYTES + 4 * self.L * self.d
        with FileLock(str(self.path) + ".lock"):
            size = self.path.stat().st_size
            tail = (size - self._offset) % self.record_dtype.itemsize
            with open(self.path, "r+b") as f:
                if tail:
                    f.truncate(size - tail)
                f.seek(0, os.SEEK_END)
                for key, vec in zip(keys, vectors):
                    rec = struct.pack("<I", payload) + key.encode("ascii") + vec.tobytes()
                    f.write(rec)
                f.flush()
                os.fsync(f.fileno())
        self._load_index()

    def write_manifest(self, status="complete", **extra):
        data = {}
        if self.manifest_path.exists():
            data = json.loads(self.manifest_path.read_text())
        data.update(
            file=self.path.name,
            model_id=self.model_id,
            pooling=self.pooling,
            L=self.L,
            d=self.d,
            dtype="float32-le",
            records=len(self),
            status=status,
        )
        data.update(extra)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=2))
        os.replace(tmp, self.manifest_path)


def open_cache(location, model_id=None, pooling=None):
    """Open a cache given its file or its directory.

    A directory must hold exactly one cache unless ``model_id``/``pooling``
    select one.
    """
    location = Path(location)
    if location.is_file():
        return EmbeddingCache(location)
    if model_id and pooling:
        return EmbeddingCache(location / cache_filename(model_id, pooling))
    found = sorted(location.glob("*.rpec"))
    if pooling:
        found = [p for p in found if p.stem.endswith(f"__{pooling}")]
    if len(found) != 1:
        raise StorageError(
            f"{location}: expected exactly one embedding cache, found {len(found)}; "
            "pass the .rpec file directly"
        )
    return EmbeddingCache(found[0])
