"""Retrieval corpus ingestion and probe-instance construction.

Corpora come either in the DPR repository JSON layout (a list of objects with
``question``, ``positive_ctxs`` and ``hard_negative_ctxs``) or as tab-separated
``query<TAB>positive<TAB>negative`` triples. Every sampling step draws from a
``random.Random`` seeded by ``(seed, record id)`` so outputs do not depend on
record order or on the process.
"""

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import CorpusParseError, EmptyCorpusError

logger = logging.getLogger(__name__)

NUM_HARD_NEGATIVES = 4
PROBE_SIZES = (2, 3, 4, 5)
FORMATS = ("dpr_json", "tsv_triples")


@dataclass
class RawQueryRecord:
    query_text: str
    positive_passages: list
    hard_negative_passages: list
    source_id: str

    def __post_init__(self):
        if not self.query_text.strip():
            raise ValueError(f"{self.source_id}: empty query text")
        if not self.positive_passages:
            raise ValueError(f"{self.source_id}: no positive passages")


@dataclass
class ProbeInstance:
    query_text: str
    positive_passage: str
    hard_negatives: list
    instance_id: str

    def __post_init__(self):
        if len(self.hard_negatives) != NUM_HARD_NEGATIVES:
            raise ValueError(
                f"{self.instance_id}: expected {NUM_HARD_NEGATIVES} hard negatives, "
                f"got {len(self.hard_negatives)}"
            )
        if self.positive_passage in self.hard_negatives:
            raise ValueError(f"{self.instance_id}: positive passage listed as a negative")

    def to_json(self, split=None):
        row = {
            "instance_id": self.instance_id,
            "query": self.query_text,
            "positive": self.positive_passage,
            "negatives": list(self.hard_negatives),
        }
        if split is not None:
            row["split"] = split
        return row

    @classmethod
    def from_json(cls, row):
        return cls(
            query_text=row["query"],
            positive_passage=row["positive"],
            hard_negatives=list(row["negatives"]),
            instance_id=row["instance_id"],
        )


@dataclass
class ProbeVariant:
    query_text: str
    passages: list
    label: int
    N: int
    instance_id: str = ""

    def __post_init__(self):
        if len(self.passages) != self.N:
            raise ValueError(f"variant has {len(self.passages)} passages, expected {self.N}")
        if not 0 <= self.label < self.N:
            raise ValueError(f"label {self.label} outside [0, {self.N})")

    def to_json(self, split=None):
        row = asdict(self)
        if split is not None:
            row["split"] = split
        return row

    @classmethod
    def from_json(cls, row):
        return cls(
            query_text=row["query_text"],
            passages=list(row["passages"]),
            label=int(row["label"]),
            N=int(row["N"]),
            instance_id=row.get("instance_id", ""),
        )


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list = field(default_factory=list)
    seed: int = 42
    ratio: float = 0.99

    def items(self):
        yield "train", self.train
        yield "validation", self.validation
        yield "test", self.test


def _clean(text):
    return " ".join(str(text).split())


def _ctx_text(ctx, with_title):
    if isinstance(ctx, str):
        return _clean(ctx)
    if not isinstance(ctx, dict) or "text" not in ctx:
        raise TypeError("context must be a string or an object with a 'text' field")
    text = _clean(ctx["text"])
    title = _clean(ctx.get("title") or "")
    if with_title and title:
        return f"{title} {text}"
    return text


def _parse_dpr(path, with_title):
    with open(path, encoding="utf-8") as f:
        raw = f.read()
    if not raw.strip():
        raise EmptyCorpusError(f"{path}: empty corpus file")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError:
        # line-delimited variant of the same schema
        data = []
        for i, line in enumerate(raw.splitlines()):
            if not line.strip():
                continue
            try:
                data.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusParseError(i, "<json>", str(exc)) from None
    if isinstance(data, dict):
        data = data.get("data", [data])
    stem = Path(path).stem
    records = []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict):
            raise CorpusParseError(i, "<object>", "record is not a JSON object")
        question = rec.get("question")
        if not isinstance(question, str) or not question.strip():
            raise CorpusParseError(i, "question")
        if "positive_ctxs" not in rec or not isinstance(rec["positive_ctxs"], list):
            raise CorpusParseError(i, "positive_ctxs")
        if not rec["positive_ctxs"]:
            raise CorpusParseError(i, "positive_ctxs", "empty list")
        negs = rec.get("hard_negative_ctxs", [])
        if not isinstance(negs, list):
            raise CorpusParseError(i, "hard_negative_ctxs", "not a list")
        try:
            positives = [_ctx_text(c, with_title) for c in rec["positive_ctxs"]]
        except TypeError as exc:
            raise CorpusParseError(i, "positive_ctxs", str(exc)) from None
        try:
            negatives = [_ctx_text(c, with_title) for c in negs]
        except TypeError as exc:
            raise CorpusParseError(i, "hard_negative_ctxs", str(exc)) from None
        source_id = str(rec.get("id", f"{stem}:{i}"))
        records.append(RawQueryRecord(_clean(question), positives, negatives, source_id))
    return records


def _parse_tsv(path):
    stem = Path(path).stem
    grouped = {}
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not any(line.strip() for line in lines):
        raise EmptyCorpusError(f"{path}: empty corpus file")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        cols = line.split("\t")
        names = ("query", "positive", "negative")
        for j, name in enumerate(names[:2]):
            if len(cols) <= j or not cols[j].strip():
                raise CorpusParseError(i, name)
        query, positive = _clean(cols[0]), _clean(cols[1])
        negative = _clean(cols[2]) if len(cols) > 2 else ""
        entry = grouped.setdefault(query, ([], [], i))
        if positive not in entry[0]:
            entry[0].append(positive)
        if negative:
            entry[1].append(negative)
    return [
        RawQueryRecord(q, pos, neg, f"{stem}:{first}")
        for q, (pos, neg, first) in grouped.items()
    ]


def parse_retrieval_corpus(path, format="dpr_json", with_title=False):
    """Read a corpus file into ``RawQueryRecord`` objects, preserving passage order."""
    if format == "dpr_json":
        return _parse_dpr(path, with_title)
    if format == "tsv_triples":
        return _parse_tsv(path)
    raise ValueError(f"unknown corpus format {format!r}; expected one of {FORMATS}")


def build_probe_instances(records, seed=42):
    """Turn records into instances with exactly four hard negatives.

    Returns ``(instances, removed_count)``. Records with no usable negative are
    dropped; records with one to three are oversampled with replacement.
    """
    instances = []
    removed = 0
    for rec in records:
        positive = rec.positive_passages[0]
        negatives = [p for p in rec.hard_negative_passages if p != positive]
        if not negatives:
            removed += 1
            continue
        rng = random.Random(f"{seed}|{rec.source_id}")
        if len(negatives) >= NUM_HARD_NEGATIVES:
            chosen = rng.sample(negatives, NUM_HARD_NEGATIVES)
        else:
            chosen = rng.choices(negatives, k=NUM_HARD_NEGATIVES)
        instances.append(ProbeInstance(rec.query_text, positive, chosen, rec.source_id))
    if removed:
        logger.info("removed %d of %d queries without hard negatives", removed, len(records))
    return instances, removed


def split_train_validation(instances, ratio=0.99, seed=42, test=None):
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    order = list(range(len(instances)))
    random.Random(seed).shuffle(order)
    cut = int(ratio * len(instances))
    return DatasetSplit(
        train=[instances[i] for i in order[:cut]],
        validation=[instances[i] for i in order[cut:]],
        test=list(test or []),
        seed=seed,
        ratio=ratio,
    )


def derive_probe_variant(instance, N, seed=42):
    """Build an N-way variant: N-1 shuffled negatives plus the positive at a random slot."""
    if N not in PROBE_SIZES:
        raise ValueError(f"N must be one of {PROBE_SIZES}, got {N}")
    rng = random.Random(f"{seed}|{instance.instance_id}|N{N}")
    negatives = list(instance.hard_negatives)
    rng.shuffle(negatives)
    passages = negatives[: N - 1]
    label = rng.randrange(N)
    passages.insert(label, instance.positive_passage)
    return ProbeVariant(instance.query_text, passages, label, N, instance.instance_id)


def write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_dataset(out_dir, split, seed=42, sizes=PROBE_SIZES):
    """Write ``instances.jsonl`` and ``variants-N{n}.jsonl`` files; return their paths."""
    out_dir = Path(out_dir)
    rows = [inst.to_json(name) for name, part in split.items() for inst in part]
    paths = {"instances": out_dir / "instances.jsonl"}
    write_jsonl(paths["instances"], rows)
    for n in sizes:
        vrows = [
            derive_probe_variant(inst, n, seed).to_json(name)
            for name, part in split.items()
            for inst in part
        ]
        paths[f"variants-N{n}"] = out_dir / f"variants-N{n}.jsonl"
        write_jsonl(paths[f"variants-N{n}"], vrows)
    return paths


def load_variants(path):
    """Read a variants file into ``{split: [ProbeVariant, ...]}``."""
    out = {"train": [], "validation": [], "test": []}
    for row in read_jsonl(path):
        out.setdefault(row.get("split", "train"), []).append(ProbeVariant.from_json(row))
    return out


def load_instances(path):
    return [ProbeInstance.from_json(row) for row in read_jsonl(path)]
