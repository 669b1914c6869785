"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``DRPROBE_PURE_PYTHON=1``.
Signatures and outputs match ``_ckernels`` exactly.
"""

import numpy as np

FIRST_TOKEN = 0
MEAN = 1
LAST_TOKEN = 2


def pool_hidden(hidden, mask, mode):
    """Pool ``hidden`` (B, T, d) float32 under ``mask`` (B, T) into (B, d).

    Rows whose mask is all zero raise ``ValueError``.
    """
    hidden = np.ascontiguousarray(hidden, dtype=np.float32)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    valid = mask.astype(bool)
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"row {int(np.argmin(counts))} has an all-zero attention mask")
    if mode == FIRST_TOKEN:
        return hidden[:, 0, :].copy()
    if mode == MEAN:
        acc = (hidden.astype(np.float64) * valid[:, :, None]).sum(axis=1)
        return (acc / counts[:, None]).astype(np.float32)
    if mode == LAST_TOKEN:
        T = mask.shape[1]
        last = T - 1 - np.argmax(valid[:, ::-1], axis=1)
        return hidden[np.arange(hidden.shape[0]), last, :].copy()
    raise ValueError(f"unknown pooling mode {mode}")


def active_mask(scores, tau):
    scores = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        return np.zeros(0, dtype=np.uint8)
    peak = scores.max()
    if peak <= 0.0:
        return np.zeros(scores.size, dtype=np.uint8)
    return (scores >= tau * peak).astype(np.uint8)


def accumulate_active(scores, tau, counts):
    """Add the active mask of one record into ``counts`` (int64); return #active."""
    m = active_mask(scores, tau)
    counts += m
    return int(m.sum())


def argmax_correct(logits, labels):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    # np.argmax returns the first maximal index
    return (np.argmax(logits, axis=1) == labels).astype(np.uint8)


def paired_moments(a, b):
    """Mean and unbiased variance of ``a - b`` for 0/1 vectors."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    mean = d.mean()
    var = ((d - mean) ** 2).sum() / (n - 1) if n > 1 else 0.0
    return float(mean), float(var), n
