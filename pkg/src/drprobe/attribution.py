"""Integrated-gradient attribution for feed-forward neurons.

A neuron is one row of a feed-forward weight matrix: a row of the up-projection
("intermediate" sub-layer, length d) or of the down-projection ("output"
sub-layer, length = intermediate width). Scaling that row by alpha only rescales
the pre-bias output feature it produces, so many (neuron, alpha) pairs are
evaluated in one pass by replicating the input along the batch axis and giving
each batch row its own multiplier inside a forward hook.

With ``g = dP/dy`` at the hooked output ``y`` and ``x`` the layer input, the
gradient of P with respect to the (scaled) weight row i is ``sum_t g[t, i] x[t]``.
The weighted reduction dots it with the learned row, which equals
``sum_t g[t, i] * (w_i . x[t])``.
"""

import logging
import re
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .encoder import check_pooling, pool_tensor, tokenize
from .errors import AttributionError

logger = logging.getLogger(__name__)

SUBLAYERS = ("intermediate", "output")
SCALAR_TARGETS = ("frozen_dot", "embedding_norm")
REDUCTIONS = ("weighted", "raw_integral")
SCHEMES = ("right", "trapezoid")

_UP = re.compile(r"(?:^|\.)(\d+)\.(?:intermediate\.dense|mlp\.up_proj|mlp\.fc1|mlp\.c_fc|feed_forward\.w1)$")
_DOWN = re.compile(r"(?:^|\.)(\d+)\.(?:output\.dense|mlp\.down_proj|mlp\.fc2|feed_forward\.w2)$")


@dataclass(frozen=True, order=True)
class NeuronAddress:
    layer: int
    sublayer: str
    index: int

    def __post_init__(self):
        if self.sublayer not in SUBLAYERS:
            raise ValueError(f"unknown sub-layer {self.sublayer!r}")
        if self.layer < 1 or self.index < 0:
            raise ValueError(f"invalid neuron address {self}")


@dataclass
class AttributionConfig:
    pooling: str = "first_token"
    n_steps: int = 20
    scalar_target: str = "frozen_dot"
    reduction: str = "weighted"
    scheme: str = "right"
    rows_per_batch: int = 1024

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.scalar_target not in SCALAR_TARGETS:
            raise ValueError(f"scalar_target must be one of {SCALAR_TARGETS}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


@dataclass
class AttributionRecord:
    example_id: str
    scores: dict  # sublayer -> (L, width) float32
    n_steps: int
    scalar_target: str = "frozen_dot"
    reduction: str = "weighted"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        for name, arr in self.scores.items():
            if not np.isfinite(arr).all():
                raise ValueError(f"{self.example_id}: non-finite scores in {name}")

    @property
    def topology(self):
        return {name: self.scores[name].shape for name in SUBLAYERS}

    def __getitem__(self, address):
        return float(self.scores[address.sublayer][address.layer - 1, address.index])

    def addresses(self):
        for name in SUBLAYERS:
            L, width = self.scores[name].shape
            for layer in range(1, L + 1):
                for i in range(width):
                    yield NeuronAddress(layer, name, i)

    def flat(self):
        return np.concatenate([self.scores[name].ravel() for name in SUBLAYERS]).astype(np.float64)

    def __len__(self):
        return sum(a.size for a in self.scores.values())


@dataclass
class ActivationSummary:
    counts: dict  # sublayer -> (L, width) int64
    threshold: float
    example_count: int
    meta: dict = field(default_factory=dict)

    @property
    def frequencies(self):
        return {k: v / self.example_count for k, v in self.counts.items()}

    def frequency(self, address):
        return self.counts[address.sublayer][address.layer - 1, address.index] / self.example_count

    @property
    def topology(self):
        return {name: self.counts[name].shape for name in SUBLAYERS}

    def rows(self):
        for name in SUBLAYERS:
            freq = self.counts[name] / self.example_count
            L, width = freq.shape
            for layer in range(L):
                for i in range(width):
                    yield layer + 1, name, i, float(freq[layer, i])

    def rollup(self):
        """Per (layer, sub-layer): summed counts, active neurons per example, mean percentage."""
        out = []
        for name in SUBLAYERS:
            c = self.counts[name]
            for layer in range(c.shape[0]):
                total = int(c[layer].sum())
                width = c.shape[1]
                out.append({
                    "layer": layer + 1,
                    "sublayer": name,
                    "n_neurons": width,
                    "active_count": total,
                    "active_per_example": total / self.example_count,
                    "activation_pct": 100.0 * total / (width * self.example_count),
                })
        return out


# -- model plumbing ---------------------------------------------------------

def feed_forward_modules(model):
    """Return ``[(up_linear, down_linear), ...]`` ordered by block index."""
    ups, downs = {}, {}
    for name, module in model.named_modules():
        if not isinstance(module, torch.nn.Linear):
            continue
        m = _UP.search(name)
        if m:
            ups.setdefault(int(m.group(1)), module)
            continue
        m = _DOWN.search(name)
        if m and ".attention." not in name:
            downs.setdefault(int(m.group(1)), module)
    if not ups or sorted(ups) != sorted(downs):
        raise AttributionError("could not locate feed-forward up/down projections in the model")
    return [(ups[i], downs[i]) for i in sorted(ups)]


def model_topology(model):
    blocks = feed_forward_modules(model)
    return {
        "intermediate": (len(blocks), blocks[0][0].out_features),
        "output": (len(blocks), blocks[0][1].out_features),
    }


def _linear_for(blocks, address):
    if not 1 <= address.layer <= len(blocks):
        raise ValueError(f"layer {address.layer} outside [1, {len(blocks)}]")
    linear = blocks[address.layer - 1][0 if address.sublayer == "intermediate" else 1]
    if address.index >= linear.out_features:
        raise ValueError(f"neuron {address.index} outside sub-layer width {linear.out_features}")
    return linear


def riemann_nodes(n_steps, scheme="right"):
    """Path positions and quadrature weights on [0, 1]."""
    m = n_steps
    if scheme == "right":
        return np.arange(1, m + 1) / m, np.full(m, 1.0 / m)
    if scheme == "trapezoid":
        w = np.full(m + 1, 1.0 / m)
        w[0] = w[-1] = 0.5 / m
        return np.arange(0, m + 1) / m, w
    raise ValueError(f"unknown scheme {scheme!r}")


def integrate_gradients(fn, w, n_steps=20, scheme="right", reduction="weighted"):
    """Integrated gradients of a scalar function ``fn`` along ``alpha * w``.

    The reference path for model neurons uses the same nodes and reduction; this
    form works on any differentiable torch callable.
    """
    w = torch.as_tensor(w, dtype=torch.float64)
    alphas, weights = riemann_nodes(n_steps, scheme)
    total = torch.zeros_like(w)
    for a, c in zip(alphas, weights):
        point = (a * w).detach().requires_grad_(True)
        (g,) = torch.autograd.grad(fn(point), point)
        total += c * g
    if reduction == "weighted":
        return float((w * total).sum())
    if reduction == "raw_integral":
        return float(total.sum())
    raise ValueError(f"unknown reduction {reduction!r}")


class _Attributor:
    """Shared state for attributing one text through one model."""

    def __init__(self, handle, text, config):
        check_pooling(handle, config.pooling)
        self.handle = handle
        self.config = config
        self.blocks = feed_forward_modules(handle.model)
        batch = tokenize(handle, [text])
        self.batch = {k: v.to(handle.device) for k, v in batch.items()}
        handle.model.requires_grad_(False)
        with torch.no_grad():
            self.reference = self._embed(self.batch)[0].detach()

    def _embed(self, batch):
        out = self.handle.model(**batch, output_hidden_states=True, return_dict=True)
        hidden = out.hidden_states[self.handle.num_layers]
        return pool_tensor(hidden, batch["attention_mask"], self.config.pooling)

    def scalar(self, emb):
        if self.config.scalar_target == "frozen_dot":
            return emb @ self.reference.to(emb.dtype)
        return (emb * emb).sum(-1)

    def run(self, linear, neurons, alphas, want_vectors=False):
        """Evaluate P and its neuron-row gradient terms for paired ``neurons``/``alphas``.

        Returns ``(P, weighted, raw, vectors)``; ``vectors`` is ``(B, in_features)``
        when requested.
        """
        B = len(neurons)
        dtype = linear.weight.dtype
        idx = torch.as_tensor(neurons, dtype=torch.long, device=self.handle.device)
        mult = torch.ones(B, linear.out_features, dtype=dtype, device=self.handle.device)
        mult[torch.arange(B), idx] = torch.as_tensor(alphas, dtype=dtype, device=self.handle.device)
        mult.requires_grad_(True)
        saved = {}

        def hook(module, inputs, output):
            x = inputs[0]
            pre = torch.nn.functional.linear(x, module.weight)
            y = pre * mult.unsqueeze(1)
            if module.bias is not None:
                y = y + module.bias
            saved.update(x=x.detach(), pre=pre.detach(), y=y)
            return y

        batch = {k: v.expand(B, *v.shape[1:]) for k, v in self.batch.items()}
        handle = linear.register_forward_hook(hook)
        try:
            with torch.enable_grad():
                P = self.scalar(self._embed(batch))
                (g,) = torch.autograd.grad(P.sum(), saved["y"])
        finally:
            handle.remove()
        rows = torch.arange(B, device=g.device)
        gi = g[rows, :, idx]  # (B, T)
        pre_i = saved["pre"][rows, :, idx]
        weighted = (gi * pre_i).sum(1)
        raw = (gi * saved["x"].sum(-1)).sum(1)
        vectors = torch.einsum("bt,btj->bj", gi, saved["x"]) if want_vectors else None
        return P.detach(), weighted.detach(), raw.detach(), vectors

    def integrate(self, linear, neurons):
        """Attribution scores for ``neurons`` of one linear layer (float64 array)."""
        alphas, weights = riemann_nodes(self.config.n_steps, self.config.scheme)
        m = len(alphas)
        neurons = np.asarray(neurons, dtype=np.int64)
        pair_neuron = np.repeat(np.arange(len(neurons)), m)
        pair_alpha = np.tile(alphas, len(neurons))
        pair_weight = np.tile(weights, len(neurons))
        scores = np.zeros(len(neurons), dtype=np.float64)
        rows = max(1, self.config.rows_per_batch)
        start = 0
        while start < len(pair_neuron):
            stop = min(start + rows, len(pair_neuron))
            sel = slice(start, stop)
            try:
                _, weighted, raw, _ = self.run(linear, neurons[pair_neuron[sel]], pair_alpha[sel])
            except (torch.OutOfMemoryError, RuntimeError) as exc:
                if "out of memory" not in str(exc).lower() or rows == 1:
                    raise
                rows //= 2
                logger.warning("out of memory; retrying with %d rows per batch", rows)
                continue
            vals = (weighted if self.config.reduction == "weighted" else raw).double().cpu().numpy()
            np.add.at(scores, pair_neuron[sel], pair_weight[sel] * vals)
            start = stop
        return scores


def _check_finite(value, address):
    if not np.isfinite(value):
        raise AttributionError(f"non-finite attribution at {address}")
    return value


def scalar_output(handle, text, address, alpha, config=None):
    """P_x with the addressed neuron's weight row scaled by ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    config = config or AttributionConfig()
    att = _Attributor(handle, text, config)
    linear = _linear_for(att.blocks, address)
    P, _, _, _ = att.run(linear, [address.index], [alpha])
    return float(P[0])


def neuron_step_gradients(handle, text, address, alphas, config=None):
    """Gradient of P w.r.t. the neuron's weight row, evaluated at each ``alpha * w``."""
    config = config or AttributionConfig()
    att = _Attributor(handle, text, config)
    linear = _linear_for(att.blocks, address)
    _, _, _, vec = att.run(linear, [address.index] * len(alphas), list(alphas), want_vectors=True)
    return vec.detach().cpu().numpy()


def integrated_gradient_attribution(handle, text, address, n_steps=20, config=None):
    config = config or AttributionConfig()
    if n_steps != config.n_steps:
        config = AttributionConfig(**{**config.__dict__, "n_steps": n_steps})
    att = _Attributor(handle, text, config)
    linear = _linear_for(att.blocks, address)
    return _check_finite(float(att.integrate(linear, [address.index])[0]), address)


def attribute_example(handle, text, example_id="", config=None):
    """Attributions for every neuron in every intermediate and output sub-layer."""
    config = config or AttributionConfig()
    att = _Attributor(handle, text, config)
    scores = {name: [] for name in SUBLAYERS}
    for layer, (up, down) in enumerate(att.blocks, start=1):
        for name, linear in zip(SUBLAYERS, (up, down)):
            vals = att.integrate(linear, np.arange(linear.out_features))
            bad = np.flatnonzero(~np.isfinite(vals))
            if bad.size:
                raise AttributionError(
                    f"non-finite attribution at {NeuronAddress(layer, name, int(bad[0]))}")
            scores[name].append(vals.astype(np.float32))
    return AttributionRecord(
        example_id,
        {name: np.stack(rows) for name, rows in scores.items()},
        config.n_steps,
        config.scalar_target,
        config.reduction,
    )


# -- thresholding and aggregation -------------------------------------------

def active_masks(record, tau=0.1):
    """Per-sub-layer boolean masks of neurons at or above ``tau * max`` of the record."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    flat = kernels.active_mask(record.flat(), tau).astype(bool)
    out, start = {}, 0
    for name in SUBLAYERS:
        shape = record.scores[name].shape
        size = shape[0] * shape[1]
        out[name] = flat[start:start + size].reshape(shape)
        start += size
    return out


def normalize_and_threshold(record, tau=0.1):
    """Set of active neuron addresses (raw signed scores, per-record maximum).

    A record whose maximum is not positive has no active neurons.
    """
    if len(record) == 0:
        raise ValueError("empty attribution record")
    active = set()
    for name, mask in active_masks(record, tau).items():
        for layer, i in zip(*np.nonzero(mask)):
            active.add(NeuronAddress(int(layer) + 1, name, int(i)))
    return active


def aggregate_activation_frequency(active_sets, topology, threshold=0.1):
    """Fraction of examples in which each neuron is active.

    ``topology`` maps sub-layer name to ``(L, width)``.
    """
    active_sets = list(active_sets)
    if not active_sets:
        raise ValueError("no examples to aggregate")
    counts = {name: np.zeros(topology[name], dtype=np.int64) for name in SUBLAYERS}
    for s in active_sets:
        for a in s:
            c = counts[a.sublayer]
            if not (1 <= a.layer <= c.shape[0] and a.index < c.shape[1]):
                raise ValueError(f"{a} does not fit the model topology")
            c[a.layer - 1, a.index] += 1
    return ActivationSummary(counts, threshold, len(active_sets))


class ActivationAccumulator:
    """Streaming fold of records into activation counts (no per-example sets)."""

    def __init__(self, topology, tau=0.1):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.topology = {k: tuple(v) for k, v in topology.items()}
        self.tau = tau
        self.sizes = [self.topology[n][0] * self.topology[n][1] for n in SUBLAYERS]
        self.counts = np.zeros(sum(self.sizes), dtype=np.int64)
        self.example_count = 0

    def add(self, record):
        if {k: tuple(v) for k, v in record.topology.items()} != self.topology:
            raise ValueError("record topology does not match the accumulator")
        kernels.accumulate_active(record.flat(), self.tau, self.counts)
        self.example_count += 1

    def summary(self, **meta):
        if self.example_count == 0:
            raise ValueError("no examples to aggregate")
        counts, start = {}, 0
        for name, size in zip(SUBLAYERS, self.sizes):
            counts[name] = self.counts[start:start + size].reshape(self.topology[name]).copy()
            start += size
        return ActivationSummary(counts, self.tau, self.example_count, meta)
