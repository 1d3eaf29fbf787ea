"""Shared numerical helpers: guarded logs, categorical sampling, RNG streams.

Log-space conventions used throughout the package:

* exact zero probabilities are kept as ``-inf`` sentinels (the zero pattern
  of the transition matrices is load-bearing for the reverse-process
  sparsity guarantees),
* logs of positive probabilities are floored at ``LOG_FLOOR`` so that
  downstream ``exp`` never flushes a genuinely positive probability to zero.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

# Smallest normal double has exponent ~-708; -745 covers subnormals too.
LOG_FLOOR = -745.0


def safe_log(p):
    """Elementwise log with exact zeros mapped to -inf and a -745 floor."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(p)
    return np.where(p > 0.0, np.maximum(out, LOG_FLOOR), -np.inf)


def log_softmax(logits, axis=-1, allow_empty=False):
    """Normalize log-scores; -inf entries stay at exactly -inf.

    Vectors with no finite entry raise unless ``allow_empty`` is set, in
    which case they normalize to all--inf (batched callers filter such rows
    out by their zero weights).
    """
    logits = np.asarray(logits, dtype=np.float64)
    peak = np.max(logits, axis=axis, keepdims=True)
    empty = np.isneginf(peak)
    if np.any(empty):
        if not allow_empty:
            raise ValueError("all-(-inf) logit vector cannot be normalized")
        peak = np.where(empty, 0.0, peak)
    shifted = logits - peak  # exp(-inf) underflows to exactly 0 below
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out[np.isneginf(logits)] = -np.inf
    return out


def softmax(logits, axis=-1):
    """Probabilities from log-scores; -inf entries become exact zeros."""
    lp = log_softmax(logits, axis=axis)
    out = np.zeros_like(lp)
    finite = lp > -np.inf
    out[finite] = np.exp(lp[finite])
    return out


def log_sigmoid(x):
    """Numerically stable log of the logistic sigmoid."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, x - np.log1p(np.exp(-np.abs(x))),
                    -np.log1p(np.exp(-np.abs(x))))


def one_hot(indices, num_categories):
    indices = np.asarray(indices)
    out = np.zeros(indices.shape + (num_categories,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def kl_categorical(log_q, log_p, axis=-1):
    """KL(q || p) from log-probability vectors.

    Terms with q == 0 contribute zero regardless of p (0*log 0 convention);
    q > 0 where p == 0 yields +inf rather than a clamped value, so
    sparsity-pattern violations surface instead of hiding.
    """
    log_q = np.asarray(log_q, dtype=np.float64)
    log_p = np.asarray(log_p, dtype=np.float64)
    q = np.exp(log_q)  # exp(-inf) is exactly 0
    with np.errstate(invalid="ignore"):
        diff = log_q - log_p
    # 0 * (-inf - anything) -> 0, not nan.
    diff = np.where(q == 0.0, 0.0, diff)
    return np.sum(q * diff, axis=axis)


def entropy(probs, axis=-1):
    """Shannon entropy in nats with the 0*log0 = 0 convention."""
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -np.sum(terms, axis=axis)


# --- RNG -----------------------------------------------------------------

def rng_from_seed(seed):
    """Counter-based generator (Philox) keyed by a recorded 64-bit seed."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def spawn_rngs(seed, n):
    """n independent child streams derived deterministically from a seed."""
    seq = np.random.SeedSequence(int(seed))
    return [np.random.Generator(np.random.Philox(s)) for s in seq.spawn(n)]


def worker_count():
    """Worker cap from the D3PM_THREADS environment variable (default 1)."""
    raw = os.environ.get("D3PM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"D3PM_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def sample_categorical(rng, probs):
    """Inverse-CDF draws from a batch of categorical distributions.

    probs has shape (..., K); one index is drawn per leading-dim element.
    Zero-probability categories are never selected.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])
    idx = np.sum(u[..., None] >= cdf, axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


# --- artifact plumbing ----------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable configuration mapping."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def write_csv(path, rows, columns, header_meta=None):
    """CSV writer with '#'-prefixed metadata comment lines.

    rows is an iterable of sequences; floats are written at full precision.
    """
    with open(path, "w") as fh:
        for key, value in (header_meta or {}).items():
            fh.write(f"# {key}: {value}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)
