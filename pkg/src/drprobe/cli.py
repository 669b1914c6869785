"""Command-line entry point: ``drprobe <command> ...``."""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

logger = logging.getLogger("drprobe")


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _layers(text):
    return None if text in (None, "all") else _int_list(text)


def _quiet_transformers():
    import transformers

    transformers.logging.set_verbosity_error()
    transformers.utils.logging.disable_progress_bar()


# -- build-dataset ------------------------------------------------------------

def cmd_build_dataset(args):
    from . import dataset as ds

    records = ds.parse_retrieval_corpus(args.input, args.format, args.with_title)
    instances, removed = ds.build_probe_instances(records, args.seed)
    test = []
    test_removed = 0
    if args.test_input:
        test_records = ds.parse_retrieval_corpus(args.test_input, args.test_format or args.format, args.with_title)
        test, test_removed = ds.build_probe_instances(test_records, args.seed)
    elif args.test_fraction:
        held = ds.split_train_validation(instances, 1.0 - args.test_fraction, args.seed + 1)
        instances, test = held.train, held.validation
    split = ds.split_train_validation(instances, args.ratio, args.seed, test)
    paths = ds.write_dataset(args.out, split, args.seed)
    manifest = {
        "input": str(args.input),
        "test_input": str(args.test_input) if args.test_input else None,
        "format": args.format,
        "seed": args.seed,
        "ratio": args.ratio,
        "records": len(records),
        "removed_count": removed,
        "test_removed_count": test_removed,
        "train": len(split.train),
        "validation": len(split.validation),
        "test": len(split.test),
        "files": {k: str(v) for k, v in paths.items()},
    }
    Path(args.out, "build_manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"{len(split.train)} train / {len(split.validation)} validation / {len(split.test)} test; "
          f"removed {removed} queries without negatives")
    return 0


# -- embed --------------------------------------------------------------------

def _texts_from_instances(path, which, split=None):
    from .dataset import read_jsonl

    texts = []
    for row in read_jsonl(path):
        if split and row.get("split") != split:
            continue
        if "text" in row:
            texts.append(row["text"])
            continue
        if which in ("all", "queries"):
            texts.append(row["query"])
        if which in ("all", "passages"):
            texts.append(row["positive"])
            texts.extend(row["negatives"])
    return texts


def cmd_embed(args):
    from . import encoder

    _quiet_transformers()
    handle = encoder.load_encoder(args.model, max_length=args.max_length,
                                  include_embedding_layer=args.include_embedding_layer)
    if args.model_id:
        handle.model_id = args.model_id
    if args.layers not in (None, "all"):
        wanted = _int_list(args.layers)
        available = list(range(0, handle.num_layers + 1))
        bad = [x for x in wanted if x not in available]
        if bad:
            raise SystemExit(f"layers {bad} not available; model has 0..{handle.num_layers}")
        handle.selected_layers = wanted
    texts = _texts_from_instances(args.input, args.texts)
    t0 = time.time()
    ctx = encoder.deterministic_mode() if args.deterministic else _null()
    with ctx:
        cache = encoder.precompute_embeddings(handle, texts, args.pooling, args.cache, args.batch_size)
    print(f"cache {cache.path}: {len(cache)} records ({time.time() - t0:.1f}s, "
          f"{handle.invocations} model calls, {handle.truncation_count} truncated)")
    return 0


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# -- train-probe --------------------------------------------------------------

def _load_variants(location, n_list):
    from .dataset import load_variants, read_jsonl, ProbeVariant

    location = Path(location)
    out = {}
    if location.is_dir():
        for n in n_list:
            out[n] = load_variants(location / f"variants-N{n}.jsonl")
        return out
    grouped = {}
    for row in read_jsonl(location):
        v = ProbeVariant.from_json(row)
        grouped.setdefault(v.N, {"train": [], "validation": [], "test": []})
        grouped[v.N].setdefault(row.get("split", "train"), []).append(v)
    missing = [n for n in n_list if n not in grouped]
    if missing:
        raise SystemExit(f"{location} has no variants for N={missing}")
    return {n: grouped[n] for n in n_list}


def cmd_train_probe(args):
    from .cache import open_cache
    from .probe import Hyperparameters, run_probe_sweep

    qc = open_cache(args.query_cache)
    pc = open_cache(args.passage_cache)
    variants = _load_variants(args.variants, args.N)
    for n, splits in variants.items():
        if not splits.get("test"):
            raise SystemExit(f"no test variants for N={n}; build the dataset with --test-input")
    hp = Hyperparameters(args.lr, args.batch_size, args.max_epochs, args.seed)
    rows = run_probe_sweep(qc, pc, variants, args.N, _layers(args.layers), hp,
                           model_id=args.model_id, dataset=args.dataset, out_dir=args.out)
    for r in rows:
        print(f"{r['model_id']} N={r['N']} layer={r['layer']}: test {r['test_accuracy']:.4f} "
              f"(val {r['val_accuracy']:.4f} @ epoch {r['best_epoch']})")
    return 0


# -- significance -------------------------------------------------------------

def cmd_significance(args):
    from .stats import collect_results, significance_table, write_significance_csv

    results = collect_results(args.results)
    cells = significance_table(results, args.baseline, args.correction_scope)
    write_significance_csv(args.out, cells)
    n_sig = sum(c.significant for c in cells)
    print(f"{len(cells)} comparisons, {n_sig} significant -> {args.out}")
    return 0


# -- attribute ----------------------------------------------------------------

def _attribution_inputs(path, field, split, limit):
    from .dataset import read_jsonl

    items = []
    for i, row in enumerate(read_jsonl(path)):
        if split and row.get("split") not in (None, split):
            continue
        text = row.get(field)
        if text is None:
            raise SystemExit(f"{path}: row {i} has no field {field!r}")
        items.append((str(row.get("instance_id", row.get("id", i))), text))
        if limit and len(items) >= limit:
            break
    return items


def cmd_attribute(args):
    from . import attribution as A
    from . import encoder
    from .store import AttributionStore, write_manifest, write_rollup_csv, write_summary_csv

    _quiet_transformers()
    handle = encoder.load_encoder(args.model, max_length=args.max_length)
    model_id = args.model_id or args.model
    config = A.AttributionConfig(args.pooling, args.n_steps, args.scalar_target, args.reduction,
                                 args.scheme, args.rows_per_batch)
    topology = A.model_topology(handle.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = AttributionStore(out / "attributions.rpat", topology)
    done = set(store.ids())
    items = _attribution_inputs(args.input, args.field, args.split, args.limit)
    t0 = time.time()
    ctx = encoder.deterministic_mode() if args.deterministic else _null()
    new = 0
    with ctx:
        for example_id, text in items:
            if example_id in done:
                continue
            store.append(A.attribute_example(handle, text, example_id, config))
            done.add(example_id)
            new += 1
    acc = A.ActivationAccumulator(topology, args.threshold)
    for rec in store:
        acc.add(rec)
    summary = acc.summary(model_id=model_id)
    write_summary_csv(out / "neuron_summary.csv", summary)
    write_rollup_csv(out / "layer_rollup.csv", summary, model_id)
    write_manifest(out / "manifest.json", model_id=model_id, model=args.model, pooling=args.pooling,
                   n_steps=args.n_steps, scalar_target=args.scalar_target, reduction=args.reduction,
                   scheme=args.scheme, threshold=args.threshold, examples=summary.example_count,
                   topology=topology, input=str(args.input), field=args.field)
    print(f"{new} new records ({time.time() - t0:.1f}s); summary over {summary.example_count} examples -> {out}")
    return 0


# -- report -------------------------------------------------------------------

def cmd_report(args):
    from .report import load_style, render_activation_profile, render_probe_accuracy

    style = load_style(args.style, baseline=args.baseline)
    root = Path(args.results)
    written = []
    if args.figures in ("probe", "all"):
        results = sorted(root.rglob("results.csv"))
        if results:
            sig = sorted(root.rglob("significance.csv"))
            written += render_probe_accuracy(results, sig[0] if sig else None, args.out, style)
        elif args.figures == "probe":
            raise SystemExit(f"no results.csv under {root}")
    if args.figures in ("activation", "all"):
        rollups = sorted(root.rglob("layer_rollup.csv"))
        if rollups:
            written += render_activation_profile(rollups, args.out, style.get("baseline"), style)
        elif args.figures == "activation":
            raise SystemExit(f"no layer_rollup.csv under {root}")
    for p in written:
        print(p)
    return 0


# -- toy / miniature ----------------------------------------------------------

def cmd_make_toy(args):
    from . import toy

    _quiet_transformers()
    out = Path(args.out)
    train = toy.synthetic_dpr_corpus(args.queries, args.seed, zero_negative_every=args.zero_negative_every)
    dev = toy.synthetic_dpr_corpus(args.dev_queries, args.seed + 1000)
    toy.write_corpus(out / "corpus" / "train.json", train)
    toy.write_corpus(out / "corpus" / "dev.json", dev)
    paths = toy.save_toy_pair(out / "models", train + dev, args.architecture, args.hidden,
                              args.layers, args.seed)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def cmd_miniature(args):
    """Run the whole pipeline on toy models; mirrors what a user would type."""
    out = Path(args.out)
    steps = [
        ["make-toy", "--out", str(out), "--queries", str(args.queries), "--dev-queries", str(args.dev_queries),
         "--hidden", str(args.hidden), "--layers", str(args.layers), "--zero-negative-every", "25"],
        ["build-dataset", "--input", str(out / "corpus/train.json"), "--test-input", str(out / "corpus/dev.json"),
         "--format", "dpr_json", "--seed", "42", "--ratio", str(args.ratio), "--out", str(out / "data")],
    ]
    models = {"backbone": "toy-backbone", "finetuned": "toy-finetuned"}
    for name, label in models.items():
        steps.append(["embed", "--model", str(out / "models" / name), "--model-id", label,
                      "--pooling", args.pooling, "--input", str(out / "data/instances.jsonl"),
                      "--cache", str(out / "cache" / name), "--deterministic"])
        steps.append(["train-probe", "--query-cache", str(out / "cache" / name),
                      "--passage-cache", str(out / "cache" / name), "--variants", str(out / "data"),
                      "--N", "2,3,4,5", "--out", str(out / "results/probe" / name), "--dataset", "synthetic",
                      "--lr", str(args.lr), "--batch-size", str(args.probe_batch_size)])
        steps.append(["attribute", "--model", str(out / "models" / name), "--model-id", label,
                      "--pooling", args.pooling, "--input", str(out / "data/instances.jsonl"),
                      "--field", "query", "--split", "test", "--limit", str(args.attribute_limit),
                      "--n-steps", "20", "--threshold", "0.1", "--scalar-target", "frozen_dot",
                      "--out", str(out / "results/attribution" / name), "--deterministic"])
    steps.append(["significance", "--results", str(out / "results/probe/backbone"),
                  str(out / "results/probe/finetuned"), "--baseline", "toy-backbone",
                  "--out", str(out / "results/significance.csv")])
    steps.append(["report", "--results", str(out / "results"), "--figures", "all",
                  "--out", str(out / "figures"), "--baseline", "toy-backbone"])
    for argv in steps:
        print("$ drprobe " + " ".join(argv), flush=True)
        rc = main(argv)
        if rc:
            return rc
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="drprobe", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-dataset", help="construct probe instances and N-way variants")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["dpr_json", "tsv_triples"], default="dpr_json")
    s.add_argument("--test-input", help="dev corpus used as the test split")
    s.add_argument("--test-format", choices=["dpr_json", "tsv_triples"])
    s.add_argument("--test-fraction", type=float, default=0.0,
                   help="carve a test split from --input when no dev corpus is given")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--ratio", type=float, default=0.99)
    s.add_argument("--with-title", action="store_true", help="prefix passages with their title")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("embed", help="cache per-layer pooled embeddings")
    s.add_argument("--model", required=True, help="hub id or local model directory")
    s.add_argument("--model-id", help="label stored in the cache (default: --model)")
    s.add_argument("--pooling", choices=["first_token", "mean", "last_token"], required=True)
    s.add_argument("--input", required=True, help="instances.jsonl or a jsonl with a 'text' field")
    s.add_argument("--texts", choices=["all", "queries", "passages"], default="all")
    s.add_argument("--cache", required=True)
    s.add_argument("--layers", default="all")
    s.add_argument("--include-embedding-layer", action="store_true")
    s.add_argument("--max-length", type=int)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train-probe", help="train and evaluate per-layer linear probes")
    s.add_argument("--query-cache", required=True)
    s.add_argument("--passage-cache", required=True)
    s.add_argument("--variants", required=True, help="variants file or the build-dataset output directory")
    s.add_argument("--N", type=_int_list, default=[2, 3, 4, 5])
    s.add_argument("--layers", default="all")
    s.add_argument("--out", required=True)
    s.add_argument("--model-id", help="label for the results table")
    s.add_argument("--dataset", default="custom")
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch-size", type=int, default=32768)
    s.add_argument("--max-epochs", type=int, default=30)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_train_probe)

    s = sub.add_parser("significance", help="paired t-tests against a baseline with Bonferroni correction")
    s.add_argument("--results", nargs="+", required=True, help="train-probe output directories")
    s.add_argument("--baseline", required=True)
    s.add_argument("--correction-scope", choices=["layers", "layers_x_n"], default="layers")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_significance)

    s = sub.add_parser("attribute", help="integrated-gradient neuron attribution")
    s.add_argument("--model", required=True)
    s.add_argument("--model-id")
    s.add_argument("--pooling", choices=["first_token", "mean", "last_token"], required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--field", default="text", help="jsonl field holding the text (e.g. query, positive)")
    s.add_argument("--split", help="only rows whose 'split' equals this")
    s.add_argument("--limit", type=int)
    s.add_argument("--n-steps", type=int, default=20)
    s.add_argument("--threshold", type=float, default=0.1)
    s.add_argument("--scalar-target", choices=["frozen_dot", "embedding_norm"], default="frozen_dot")
    s.add_argument("--reduction", choices=["weighted", "raw_integral"], default="weighted")
    s.add_argument("--scheme", choices=["right", "trapezoid"], default="right")
    s.add_argument("--rows-per-batch", type=int, default=1024)
    s.add_argument("--max-length", type=int)
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attribute)

    s = sub.add_parser("report", help="render figures and sidecar CSVs")
    s.add_argument("--results", required=True)
    s.add_argument("--figures", choices=["probe", "activation", "all"], default="all")
    s.add_argument("--out", required=True)
    s.add_argument("--style")
    s.add_argument("--baseline")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("make-toy", help="write a synthetic corpus and tiny backbone/fine-tuned models")
    s.add_argument("--out", required=True)
    s.add_argument("--queries", type=int, default=200)
    s.add_argument("--dev-queries", type=int, default=100)
    s.add_argument("--zero-negative-every", type=int, default=0)
    s.add_argument("--architecture", choices=["encoder_only", "decoder_only"], default="encoder_only")
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("miniature", help="run the full pipeline end to end on toy models")
    s.add_argument("--out", required=True)
    s.add_argument("--queries", type=int, default=200)
    s.add_argument("--dev-queries", type=int, default=100)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--pooling", choices=["first_token", "mean"], default="first_token")
    s.add_argument("--ratio", type=float, default=0.9)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--probe-batch-size", type=int, default=64)
    s.add_argument("--attribute-limit", type=int, default=50)
    s.set_defaults(func=cmd_miniature)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import DrProbeError

    try:
        return args.func(args)
    except (DrProbeError, FileNotFoundError) as exc:
        print(f"drprobe {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
