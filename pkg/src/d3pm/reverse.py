"""Reverse process parameterized through a predicted clean-datum distribution.

The denoiser predicts logits of p~(x0~ | x_t); combining them with the
forward kernels gives p(x_{t-1} | x_t) proportional to
sum_{x0~} q(x_{t-1}, x_t | x0~) p~(x0~ | x_t), evaluated by the elementwise
closed form (Q_t column at x_t) * (p~ @ Qbar_{t-1}). The same formula with a
segment kernel performs inference several steps at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import transition as trans
from .exceptions import D3PMError, InvalidSpecError, UnreachableStateError
from .process import Categorical, SequenceBatch, _probs_from_log, sample_stationary
from .util import (log_sigmoid, log_softmax, rng_from_seed, safe_log,
                   sample_categorical, softmax)


def apply_absorbing_mask(logits: np.ndarray, spec) -> np.ndarray:
    """Force zero predicted mass on the absorbing category.

    The clean data never contains the absorbing token, so families with one
    pin its logit to -inf before normalization.
    """
    if spec.family not in (trans.ABSORBING, trans.ABSORBING_UNIFORM):
        return logits
    out = np.array(logits, dtype=np.float64)
    out[..., spec.absorbing_index] = -np.inf
    return out


def predicted_x0_log_probs(denoiser, x: np.ndarray, t: int, spec) -> np.ndarray:
    """Normalized log p~(x0~ | x_t) for a batch, with the absorbing mask applied."""
    logits = np.asarray(denoiser(x, t), dtype=np.float64)
    if np.any(np.isnan(logits)):
        raise D3PMError(f"denoiser produced NaN logits at t={t}")
    return log_softmax(apply_absorbing_mask(logits, spec), axis=-1)


def kstep_log_probs(cols, fact2):
    """Vectorized log p(x_{t-k} | x_t) from the two closed-form factors.

    cols  -- segment kernel column at x_t      (..., K)
    fact2 -- p~(x0~|x_t) @ Qbar_{t-k}          (..., K)
    """
    log_p = safe_log(cols) + safe_log(fact2)
    return log_softmax(log_p, axis=-1, allow_empty=True)


def kstep_dist(x_t: int, x0_logits: np.ndarray, kernel: np.ndarray,
               qbar_lo: np.ndarray) -> Categorical:
    """p(x_{t-k} | x_t) using the k-step kernel and Qbar_{t-k}.

    At k = 1 this is the single-step reverse distribution; at k = t
    (qbar_lo = I) it reduces to the model's clean-datum posterior, i.e. the
    prediction reweighted by q(x_t | x0~).
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    p_tilde = softmax(np.asarray(x0_logits, dtype=np.float64))
    cols = kernel[:, x_t]
    fact2 = p_tilde @ np.asarray(qbar_lo, dtype=np.float64)
    if not np.any((cols > 0) & (fact2 > 0)):
        raise UnreachableStateError(
            f"no predicted origin can reach x_t={x_t}: effective mass is zero")
    return Categorical(_probs_from_log(kstep_log_probs(cols, fact2)))


def reverse_dist(x_t: int, x0_logits: np.ndarray, q_t: np.ndarray,
                 qbar_prev: np.ndarray) -> Categorical:
    """Single-step reverse distribution p(x_{t-1} | x_t)."""
    return kstep_dist(x_t, x0_logits, q_t, qbar_prev)


# --- truncated discretized logistic output head ---------------------------

def logistic_logits(loc, log_scale, num_categories: int) -> np.ndarray:
    """Logits of a discretized truncated logistic over K ordinal bins.

    loc lives on the [-1, 1] scale of K evenly spaced bin centers;
    log_scale is shifted by 2 so a zero prediction gives a reasonable
    spread. Each logit is the log-difference of the logistic CDF at the bin
    edges, with a 1e-6 guard inside log(exp(a) - exp(b)) kept verbatim from
    the reference recipe (it slightly fattens extreme tail bins but makes
    every logit finite).
    """
    K = int(num_categories)
    if K < 2:
        raise InvalidSpecError(f"need at least 2 categories, got {K}")
    loc = np.asarray(loc, dtype=np.float64)[..., None]
    log_scale = np.asarray(log_scale, dtype=np.float64)[..., None]
    inv_scale = np.exp(-(log_scale - 2.0))
    bin_width = 2.0 / (K - 1)
    bin_centers = np.linspace(-1.0, 1.0, K) - loc
    log_cdf_plus = log_sigmoid(inv_scale * (bin_centers + 0.5 * bin_width))
    log_cdf_min = log_sigmoid(inv_scale * (bin_centers - 0.5 * bin_width))
    return _log_minus_exp(log_cdf_plus, log_cdf_min)


def _log_minus_exp(a, b, epsilon=1e-6):
    """log(exp(a) - exp(b)) for b < a, guarded against catastrophic cancellation."""
    return a + np.log1p(-np.exp(b - a) + epsilon)


@dataclass(frozen=True)
class LogisticHead:
    """Location/scale pair parameterizing the discretized logistic output."""

    loc: float
    log_scale: float

    def logits(self, num_categories: int) -> np.ndarray:
        return logistic_logits(self.loc, self.log_scale, num_categories)


# --- ancestral sampling ----------------------------------------------------

def ancestral_sample(denoiser, process, seq_len: int, steps, seed,
                     batch_size: int = 1, final_argmax: bool = False,
                     trace: bool = False):
    """Sample clean sequences by walking the reverse chain along ``steps``.

    steps must be strictly decreasing from T to 0; x_T is drawn from the
    stationary prior. Consecutive pairs (hi, lo) are bridged with the k-step
    distribution; the final hop from t = 1 draws directly from the predicted
    clean-datum distribution (the same kernel the reconstruction loss term
    scores). ``final_argmax`` decodes the last hop deterministically.

    Returns a SequenceBatch, or (SequenceBatch, frames) when ``trace`` is
    set, where frames is a list of (t, data array) snapshots including the
    initial stationary draw.

    Note: composing two single-step hops is not the same distribution as one
    two-step hop; the k-step kernel marginalizes the skipped states under
    the forward process, not under the learned chain.
    """
    steps = [int(s) for s in steps]
    if steps[0] != process.T or steps[-1] != 0:
        raise InvalidSpecError(
            f"steps must run from T={process.T} down to 0, got {steps[0]}..{steps[-1]}")
    if any(a <= b for a, b in zip(steps, steps[1:])):
        raise InvalidSpecError("steps must be strictly decreasing")

    rng = rng_from_seed(seed)
    batch = sample_stationary(process, batch_size, seq_len, rng)
    x = np.array(batch.data)
    frames = [(process.T, x.copy())] if trace else None

    for hi, lo in zip(steps, steps[1:]):
        log_p_tilde = predicted_x0_log_probs(denoiser, x, hi, process.spec)
        if lo == 0 and hi == 1:
            log_probs = log_p_tilde
        else:
            p_tilde = _probs_from_log(log_p_tilde)
            cols = process.kernel_mat(lo, hi).T[x]
            fact2 = p_tilde @ process.qbar_mat(lo)
            log_probs = kstep_log_probs(cols, fact2)
        if lo == 0 and final_argmax:
            x = np.argmax(log_probs, axis=-1)
        else:
            x = sample_categorical(rng, _probs_from_log(log_probs))
        if trace:
            frames.append((lo, x.copy()))

    out = SequenceBatch(x, process.K)
    return (out, frames) if trace else out
