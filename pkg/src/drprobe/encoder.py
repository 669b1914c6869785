"""Per-layer hidden-state extraction and pooling for transformer text encoders."""

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .cache import EmbeddingCache, cache_filename, text_hash
from .errors import EnvironmentLoadError, PoolingMismatchError, StorageError

logger = logging.getLogger(__name__)

ENCODER_ONLY = "encoder_only"
DECODER_ONLY = "decoder_only"
POOLINGS = ("first_token", "mean", "last_token")
_POOL_MODE = {
    "first_token": kernels.FIRST_TOKEN,
    "mean": kernels.MEAN,
    "last_token": kernels.LAST_TOKEN,
}
DEFAULT_MAX_LENGTH = {ENCODER_ONLY: 512, DECODER_ONLY: 2048}
_DECODER_TYPES = {"llama", "mistral", "qwen2", "qwen3", "gemma", "gemma2", "phi", "phi3", "gpt2", "gpt_neox", "opt"}


@dataclass
class EncoderHandle:
    model_id: str
    architecture: str
    num_layers: int
    hidden_dim: int
    max_sequence_length: int
    model: torch.nn.Module = field(repr=False, default=None)
    tokenizer: object = field(repr=False, default=None)
    include_embedding_layer: bool = False
    selected_layers: list = None
    truncation_count: int = 0
    invocations: int = 0

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be positive")
        if self.architecture not in (ENCODER_ONLY, DECODER_ONLY):
            raise ValueError(f"unknown architecture {self.architecture!r}")

    @property
    def layer_indices(self):
        """Indices into the model's hidden-state tuple (0 is the embedding output)."""
        if self.selected_layers:
            return list(self.selected_layers)
        start = 0 if self.include_embedding_layer else 1
        return list(range(start, self.num_layers + 1))

    @property
    def device(self):
        return next(self.model.parameters()).device


@dataclass
class LayerHiddenStates:
    states: np.ndarray  # (L, T, d) float32
    attention_mask: np.ndarray  # (T,) uint8
    architecture: str = ENCODER_ONLY
    layers: list = None

    def __post_init__(self):
        if self.states.ndim != 3:
            raise ValueError("states must have shape (L, T, d)")
        if self.attention_mask.shape != (self.states.shape[1],):
            raise ValueError("attention mask length must equal token count")
        if self.layers is None:
            self.layers = list(range(1, self.states.shape[0] + 1))

    @property
    def token_count(self):
        return self.states.shape[1]


@dataclass
class LayerEmbeddings:
    vectors: np.ndarray  # (L, d)
    pooling: str
    text_hash: str = ""
    layers: list = None

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding contains non-finite values")


def infer_architecture(config):
    if getattr(config, "is_decoder", False) and not getattr(config, "add_cross_attention", False):
        return DECODER_ONLY
    if getattr(config, "model_type", "") in _DECODER_TYPES:
        return DECODER_ONLY
    if any("CausalLM" in a for a in (getattr(config, "architectures", None) or [])):
        return DECODER_ONLY
    return ENCODER_ONLY


def load_encoder(model_id, architecture=None, max_length=None, dtype=torch.float32,
                 device="cpu", include_embedding_layer=False):
    """Load a Hugging Face model and tokenizer from a hub id or a local directory."""
    from transformers import AutoConfig, AutoModel, AutoTokenizer

    try:
        config = AutoConfig.from_pretrained(model_id)
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id, dtype=dtype)
    except Exception as exc:  # hub/network/file errors all surface here
        raise EnvironmentLoadError(f"could not load model {model_id!r}: {exc}") from exc
    model.to(device).eval()
    architecture = architecture or infer_architecture(config)
    if architecture == DECODER_ONLY:
        if tokenizer.pad_token is None:
            tokenizer.pad_token = tokenizer.eos_token
        tokenizer.padding_side = "right"
    limit = max_length or DEFAULT_MAX_LENGTH[architecture]
    for cap in (getattr(config, "max_position_embeddings", None), getattr(tokenizer, "model_max_length", None)):
        if cap and cap < limit:
            limit = cap
    return EncoderHandle(
        model_id=model_id,
        architecture=architecture,
        num_layers=config.num_hidden_layers,
        hidden_dim=config.hidden_size,
        max_sequence_length=int(limit),
        model=model,
        tokenizer=tokenizer,
        include_embedding_layer=include_embedding_layer,
    )


@contextlib.contextmanager
def deterministic_mode(seed=0):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def prepare_text(handle, text):
    text = text.strip()
    if not text:
        raise ValueError("cannot encode empty text")
    eos = getattr(handle.tokenizer, "eos_token", None)
    if handle.architecture == DECODER_ONLY and eos and not text.endswith(eos):
        text = f"{text}{eos}"
    return text


def tokenize(handle, texts):
    """Tokenize a batch with right padding; counts texts that get truncated."""
    texts = [prepare_text(handle, t) for t in texts]
    tok = handle.tokenizer
    full = tok(texts, add_special_tokens=True, truncation=False, verbose=False)["input_ids"]
    over = sum(len(ids) > handle.max_sequence_length for ids in full)
    if over:
        handle.truncation_count += over
        logger.debug("%d texts truncated to %d tokens", over, handle.max_sequence_length)
    return tok(texts, padding=True, truncation=True, max_length=handle.max_sequence_length,
               return_tensors="pt")


def forward_hidden(handle, batch):
    """Run the model and return the selected hidden states (tuple of (B, T, d) tensors)."""
    batch = {k: v.to(handle.device) for k, v in batch.items()}
    handle.invocations += 1
    out = handle.model(**batch, output_hidden_states=True, return_dict=True)
    hs = out.hidden_states
    return [hs[i] for i in handle.layer_indices]


@torch.no_grad()
def extract_hidden_states(handle, text):
    batch = tokenize(handle, [text])
    hs = forward_hidden(handle, batch)
    states = np.stack([h[0].float().cpu().numpy() for h in hs]).astype(np.float32)
    mask = batch["attention_mask"][0].cpu().numpy().astype(np.uint8)
    return LayerHiddenStates(states, mask, handle.architecture, handle.layer_indices)


def _pool(H, strategy):
    L, T, _ = H.states.shape
    mask = np.broadcast_to(H.attention_mask, (L, T))
    return kernels.pool_hidden(H.states, mask, _POOL_MODE[strategy])


def pool_first_token(H):
    if H.architecture == DECODER_ONLY:
        raise PoolingMismatchError(
            "first-token pooling needs a leading classification token; "
            "decoder-only models have none"
        )
    return _pool(H, "first_token")


def pool_mean(H):
    if not H.attention_mask.any():
        raise ValueError("attention mask is all zero")
    return _pool(H, "mean")


def pool_last_token(H):
    if not H.attention_mask.any():
        raise ValueError("attention mask is all zero")
    return _pool(H, "last_token")


_POOLERS = {"first_token": pool_first_token, "mean": pool_mean, "last_token": pool_last_token}


def pool(H, strategy):
    try:
        return _POOLERS[strategy](H)
    except KeyError:
        raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLINGS}") from None


def check_pooling(handle, strategy):
    if strategy not in POOLINGS:
        raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLINGS}")
    if strategy == "first_token" and handle.architecture == DECODER_ONLY:
        raise PoolingMismatchError(f"{handle.model_id} is decoder-only; first_token pooling is not defined")


def pool_tensor(hidden, mask, strategy):
    """Differentiable torch pooling of (B, T, d) under a (B, T) mask."""
    if strategy == "first_token":
        return hidden[:, 0]
    m = mask.to(hidden.dtype)
    if strategy == "mean":
        return (hidden * m.unsqueeze(-1)).sum(1) / m.sum(1, keepdim=True)
    if strategy == "last_token":
        T = mask.shape[1]
        pos = torch.arange(T, device=mask.device).expand_as(mask)
        last = torch.where(mask.bool(), pos, torch.full_like(pos, -1)).max(1).values
        return hidden[torch.arange(hidden.shape[0], device=hidden.device), last]
    raise ValueError(f"unknown pooling {strategy!r}")


@torch.no_grad()
def embed_texts(handle, texts, pooling, batch_size=16):
    """Pooled float32 embeddings of shape (n, L, d)."""
    check_pooling(handle, pooling)
    mode = _POOL_MODE[pooling]
    out = []
    for start in range(0, len(texts), batch_size):
        batch = tokenize(handle, texts[start:start + batch_size])
        mask = batch["attention_mask"].cpu().numpy().astype(np.uint8)
        hs = forward_hidden(handle, batch)
        layers = [kernels.pool_hidden(h.float().cpu().numpy(), mask, mode) for h in hs]
        out.append(np.stack(layers, axis=1))
    if not out:
        return np.zeros((0, len(handle.layer_indices), handle.hidden_dim), dtype=np.float32)
    return np.concatenate(out).astype(np.float32)


def embed_text(handle, text, pooling):
    vec = embed_texts(handle, [text], pooling)[0]
    return LayerEmbeddings(vec, pooling, text_hash(text.strip()), handle.layer_indices)


def precompute_embeddings(handle, texts, pooling, cache_path, batch_size=16):
    """Embed every text not yet cached; returns the ``EmbeddingCache``.

    ``cache_path`` is a directory (file name derived from model and pooling) or
    an explicit ``.rpec`` path. Texts are keyed by the sha256 of their trimmed form.
    """
    from pathlib import Path

    check_pooling(handle, pooling)
    cache_path = Path(cache_path)
    if cache_path.suffix != ".rpec":
        cache_path = cache_path / cache_filename(handle.model_id, pooling)
    cache = EmbeddingCache.create(cache_path, handle.model_id, pooling,
                                  len(handle.layer_indices), handle.hidden_dim,
                                  layers=handle.layer_indices)
    todo = {}
    for t in texts:
        t = t.strip()
        h = text_hash(t)
        if h not in cache and h not in todo:
            todo[h] = t
    keys = list(todo)
    calls_before = handle.invocations
    written = 0
    try:
        for start in range(0, len(keys), batch_size):
            chunk = keys[start:start + batch_size]
            vecs = embed_texts(handle, [todo[k] for k in chunk], pooling, batch_size)
            cache.append(chunk, vecs)
            written += len(chunk)
    except OSError as exc:
        cache.write_manifest(status="partial", pending=len(keys) - written,
                             layers=handle.layer_indices)
        raise StorageError(f"cache write failed after {written} new records: {exc}") from exc
    cache.write_manifest(
        status="complete",
        layers=handle.layer_indices,
        new_records=written,
        model_invocations=handle.invocations - calls_before,
        truncated_texts=handle.truncation_count,
    )
    return cache

