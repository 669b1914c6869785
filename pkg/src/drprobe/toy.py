"""Tiny randomly initialised models and synthetic corpora for offline runs.

Everything here is built locally (no hub access): a word-level tokenizer over
the corpus vocabulary, a small BERT- or Llama-style model, and a "fine-tuned"
copy whose weights are perturbed by seeded Gaussian noise.
"""

import json
import random
from pathlib import Path

import torch

SPECIALS_ENCODER = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
SPECIALS_DECODER = ["<pad>", "<unk>", "<s>", "</s>"]

_SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "pa", "di", "fu"]


def _word(rng):
    return "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3)))


def synthetic_dpr_corpus(n_queries=200, seed=0, n_topics=20, zero_negative_every=0):
    """DPR-style records: query and positive share a topic, negatives come from others.

    ``zero_negative_every=k`` gives every k-th record no hard negatives.
    """
    rng = random.Random(seed)
    topics = [[_word(rng) for _ in range(12)] for _ in range(n_topics)]
    filler = [_word(rng) for _ in range(40)]
    records = []
    for i in range(n_queries):
        t = rng.randrange(n_topics)
        query = " ".join(rng.sample(topics[t], 4))
        positive = " ".join(rng.sample(topics[t], 6) + rng.sample(filler, 4))
        k = rng.randint(1, 7)
        if zero_negative_every and i % zero_negative_every == zero_negative_every - 1:
            k = 0
        negatives = []
        for _ in range(k):
            other = rng.choice([j for j in range(n_topics) if j != t])
            negatives.append(" ".join(rng.sample(topics[other], 6) + rng.sample(filler, 4)))
        records.append({
            "question": query,
            "answers": [],
            "positive_ctxs": [{"title": "", "text": positive}],
            "negative_ctxs": [],
            "hard_negative_ctxs": [{"title": "", "text": n} for n in negatives],
        })
    return records


def write_corpus(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(records, indent=1), encoding="utf-8")
    return path


def corpus_vocabulary(records):
    words = set()
    for rec in records:
        words.update(rec["question"].split())
        for ctx in rec["positive_ctxs"] + rec["hard_negative_ctxs"]:
            words.update(ctx["text"].split())
    return sorted(words)


def build_tokenizer(vocabulary, architecture="encoder_only", max_length=64):
    from tokenizers import Tokenizer, models, pre_tokenizers, processors
    from transformers import PreTrainedTokenizerFast

    specials = SPECIALS_ENCODER if architecture == "encoder_only" else SPECIALS_DECODER
    vocab = {tok: i for i, tok in enumerate(specials + [w for w in vocabulary if w not in specials])}
    unk = specials[1]
    core = Tokenizer(models.WordLevel(vocab=vocab, unk_token=unk))
    core.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    if architecture == "encoder_only":
        core.post_processor = processors.TemplateProcessing(
            single="[CLS] $A [SEP]", special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])]
        )
        kw = dict(pad_token="[PAD]", unk_token="[UNK]", cls_token="[CLS]", sep_token="[SEP]", mask_token="[MASK]")
    else:
        core.post_processor = processors.TemplateProcessing(
            single="<s> $A", special_tokens=[("<s>", vocab["<s>"])]
        )
        kw = dict(pad_token="<pad>", unk_token="<unk>", bos_token="<s>", eos_token="</s>")
    return PreTrainedTokenizerFast(tokenizer_object=core, model_max_length=max_length, **kw)


def build_toy_model(vocab_size, architecture="encoder_only", hidden=32, layers=2, heads=4,
                    intermediate=None, max_positions=64, seed=0, layernorm_noise=0.0):
    from transformers import BertConfig, BertModel, LlamaConfig, LlamaModel

    torch.manual_seed(seed)
    intermediate = intermediate or 4 * hidden
    if architecture == "encoder_only":
        config = BertConfig(
            vocab_size=vocab_size, hidden_size=hidden, num_hidden_layers=layers,
            num_attention_heads=heads, intermediate_size=intermediate,
            max_position_embeddings=max_positions, hidden_dropout_prob=0.0,
            attention_probs_dropout_prob=0.0,
        )
        model = BertModel(config)
    else:
        config = LlamaConfig(
            vocab_size=vocab_size, hidden_size=hidden, num_hidden_layers=layers,
            num_attention_heads=heads, num_key_value_heads=heads,
            intermediate_size=intermediate, max_position_embeddings=max_positions,
            pad_token_id=0, bos_token_id=2, eos_token_id=3,
        )
        model = LlamaModel(config)
    if layernorm_noise:
        randomize_norms(model, layernorm_noise, seed)
    return model.eval()


def randomize_norms(model, scale, seed=0):
    """Move normalisation gains/biases off their (1, 0) initialisation.

    Freshly initialised LayerNorm makes every pooled output lie on a sphere,
    which makes the frozen-dot target stationary at the learned weights.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, module in model.named_modules():
            if "norm" not in type(module).__name__.lower() or not hasattr(module, "weight"):
                continue
            w = module.weight
            w.add_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * scale)
            if getattr(module, "bias", None) is not None:
                b = module.bias
                b.add_(torch.randn(b.shape, generator=gen, dtype=b.dtype) * scale)
    return model


def perturb_weights(model, scale=0.05, seed=1):
    """Add seeded Gaussian noise (relative to each tensor's std) to every float parameter."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.is_floating_point() and p.numel() > 1:
                std = p.std().item() or 1.0
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std * scale)
    return model


def save_toy_pair(out_dir, records, architecture="encoder_only", hidden=32, layers=2,
                  seed=0, perturb_scale=0.05, max_length=64, layernorm_noise=0.3):
    """Write ``backbone/`` and ``finetuned/`` model directories; returns both paths."""
    out_dir = Path(out_dir)
    tok = build_tokenizer(corpus_vocabulary(records), architecture, max_length)
    base = build_toy_model(len(tok), architecture, hidden, layers, seed=seed,
                           max_positions=max_length, layernorm_noise=layernorm_noise)
    paths = {}
    for name in ("backbone", "finetuned"):
        model = base if name == "backbone" else perturb_weights(base, perturb_scale, seed + 1)
        target = out_dir / name
        model.save_pretrained(target)
        tok.save_pretrained(target)
        paths[name] = target
    return paths
