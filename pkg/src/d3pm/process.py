"""Exact forward-process distributions and sampling.

The corruption chain q(x_t | x_{t-1}) acts independently on every position
of a sequence batch. All distribution math runs in log space with exact
zeros kept as -inf sentinels; unreachable (x_t, x_0) pairs raise rather
than falling back to a default distribution.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import transition as trans
from .exceptions import InvalidSpecError, ScheduleError, UnreachableStateError
from .util import (LOG_FLOOR, log_softmax, rng_from_seed, safe_log,
                   sample_categorical, spawn_rngs, worker_count)

# Above this many stored matrix entries the dense backend stops
# precomputing cumulative products eagerly and multiplies on demand.
_EAGER_LIMIT = 1 << 24


@dataclass(frozen=True)
class Categorical:
    """Exact probability vector over K categories."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise InvalidSpecError(f"probs must be a vector, got shape {probs.shape}")
        if np.any(probs < 0):
            raise InvalidSpecError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-10:
            raise InvalidSpecError(f"probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def num_categories(self) -> int:
        return len(self.probs)

    def log_probs(self) -> np.ndarray:
        return safe_log(self.probs)


@dataclass(frozen=True)
class SequenceBatch:
    """B sequences of D category indices in [0, K)."""

    data: np.ndarray
    num_categories: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.int64)
        if data.ndim != 2:
            raise InvalidSpecError(f"batch data must be (B, D), got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= self.num_categories):
            raise InvalidSpecError(
                f"indices must lie in [0, {self.num_categories}), "
                f"got range [{data.min()}, {data.max()}]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def seq_len(self) -> int:
        return self.data.shape[1]


class ForwardProcess:
    """Precomputed one-step kernels Q_t and cumulative products Qbar_t.

    Timesteps are 1-based (t in 1..T) with Qbar_0 = I. Backends:

    * ``dense``   -- explicit K x K matrices (mandatory for K <= 512, and the
      oracle for everything else),
    * ``lowrank`` -- rank-one closed forms (uniform/absorbing families),
    * ``matexp``  -- power-of-two exponent table for exponent-parameterized
      schedules on rate-matrix families.

    ``auto`` picks dense for K <= 512 and a structured backend above.
    All state is immutable after construction; reads are concurrency-safe.
    """

    def __init__(self, spec: trans.TransitionSpec, schedule, backend: str = "auto"):
        self.spec = spec
        self.schedule = schedule
        K, T = spec.num_categories, schedule.num_steps
        if backend == "auto":
            if K <= 512:
                backend = "dense"
            elif spec.family in (trans.UNIFORM, trans.ABSORBING):
                backend = "lowrank"
            else:
                backend = "matexp"
        self.backend = backend
        self._pi = spec.stationary()
        self._lowrank = None
        self._pow2 = None
        self._rate = None
        self._q_cache = {}
        self._qbar_cache = {0: _frozen_eye(K)}

        if backend == "lowrank":
            if spec.family not in (trans.UNIFORM, trans.ABSORBING):
                raise InvalidSpecError(
                    f"lowrank backend supports uniform/absorbing, not {spec.family!r}")
            self._lowrank = trans.lowrank_cumulative(
                spec.family, schedule.betas, K, spec.absorbing_index)
        elif backend == "matexp":
            if schedule.alpha_bars is None or schedule.alpha_star is None:
                raise ScheduleError(
                    "matexp backend needs an exponent-parameterized schedule "
                    "with a common factor alpha_star")
            self._rate = spec.rate_matrix()
            self._pow2 = trans.precompute_pow2_exponents(
                self._rate, schedule.alpha_star, float(schedule.alpha_bars[-1]))
            self._multiples = np.rint(
                schedule.alpha_bars / schedule.alpha_star).astype(np.int64)
        elif backend == "dense":
            if spec.family == trans.EMBEDDING:
                self._rate = spec.rate_matrix()
            self._eager = (T + 1) * K * K <= _EAGER_LIMIT
            if self._eager:
                for t in range(1, T + 1):
                    self._q_cache[t] = self._build_q(t)
                    self._qbar_cache[t] = trans._freeze(
                        self._qbar_cache[t - 1] @ self._q_cache[t])
        else:
            raise InvalidSpecError(f"unknown backend {backend!r}")

    # --- matrix access -----------------------------------------------------

    @property
    def T(self) -> int:
        return self.schedule.num_steps

    @property
    def K(self) -> int:
        return self.spec.num_categories

    def stationary(self) -> np.ndarray:
        return self._pi

    def _build_q(self, t):
        if self._rate is not None and self.schedule.alpha_bars is not None:
            return trans.mat_exp(self._rate, self.schedule.alpha(t))
        if self._rate is not None:
            beta = self.schedule.beta(t)
            if beta >= 1.0:
                raise ScheduleError(
                    "embedding family cannot take a beta = 1 step (infinite exponent)")
            return trans.mat_exp(self._rate, -np.log1p(-beta))
        return trans.build_transition(self.spec, self.schedule.beta(t))

    def q_mat(self, t: int) -> np.ndarray:
        """One-step kernel Q_t, t in 1..T."""
        self._check_t(t, lo=1)
        if t in self._q_cache:
            return self._q_cache[t]
        if self.backend == "matexp":
            prev = self._multiples[t - 2] if t >= 2 else 0
            mat = self._pow2.matrix(int(self._multiples[t - 1] - prev))
        else:
            mat = self._build_q(t)
        # avoid caching an O(T K^2) footprint when K is large
        if self.backend != "dense" or self._eager:
            self._q_cache[t] = mat
        return mat

    def qbar_mat(self, t: int) -> np.ndarray:
        """Cumulative kernel Qbar_t = Q_1 ... Q_t, with Qbar_0 = I."""
        self._check_t(t, lo=0)
        if t in self._qbar_cache:
            return self._qbar_cache[t]
        if self.backend == "lowrank":
            mat = self._lowrank.to_dense(t)
        elif self.backend == "matexp":
            mat = self._pow2.matrix(int(self._multiples[t - 1]))
        else:
            start = max(s for s in self._qbar_cache if s <= t)
            acc = np.array(self._qbar_cache[start])
            for s in range(start + 1, t + 1):
                acc = acc @ self.q_mat(s)
            mat = trans._freeze(acc)
        self._qbar_cache[t] = mat
        return mat

    def qbar_rows(self, t: int, indices) -> np.ndarray:
        """Rows of Qbar_t at the given start indices (shape indices + (K,))."""
        if self.backend == "lowrank":
            self._check_t(t, lo=0)
            return self._lowrank.rows(t, indices)
        return self.qbar_mat(t)[np.asarray(indices)]

    def kernel_mat(self, lo: int, hi: int) -> np.ndarray:
        """Segment kernel Q_{lo+1} ... Q_hi (so kernel(t-1, t) = Q_t)."""
        self._check_t(hi, lo=0)
        self._check_t(lo, lo=0)
        if lo > hi:
            raise InvalidSpecError(f"need lo <= hi, got {lo} > {hi}")
        if lo == hi:
            return _frozen_eye(self.K)
        if lo == 0:
            return self.qbar_mat(hi)
        if hi == lo + 1:
            return self.q_mat(hi)
        if self.backend == "lowrank":
            return self._lowrank.segment(lo, hi).to_dense(1)
        if self.backend == "matexp":
            return self._pow2.matrix(int(self._multiples[hi - 1] - self._multiples[lo - 1]))
        acc = self.q_mat(lo + 1)
        for s in range(lo + 2, hi + 1):
            acc = acc @ self.q_mat(s)
        return trans._freeze(acc)

    def _check_t(self, t, lo):
        if not (lo <= t <= self.T):
            raise InvalidSpecError(f"timestep {t} outside [{lo}, {self.T}]")

    # --- distributions -----------------------------------------------------

    def marginal(self, x0: int, t: int) -> Categorical:
        """q(x_t | x_0) as row x0 of Qbar_t."""
        if not (0 <= x0 < self.K):
            raise InvalidSpecError(f"category index {x0} out of range [0, {self.K})")
        return Categorical(self.qbar_rows(t, x0))

    def posterior(self, x_t: int, x0: int, t: int) -> Categorical:
        """q(x_{t-1} | x_t, x_0), computed in log space."""
        self._check_t(t, lo=1)
        return posterior_dist(x_t, x0, self.q_mat(t), self.qbar_mat(t - 1),
                              self.qbar_mat(t))

    def sample_forward(self, batch: SequenceBatch, t: int, seed,
                       workers: int | None = None) -> SequenceBatch:
        """Corrupt a batch to time t; every position sampled independently.

        Deterministic given (seed, worker count): the batch is split into
        ``workers`` contiguous partitions (capped by D3PM_THREADS) and each
        partition draws from its own child stream of the master seed.
        """
        self._check_t(t, lo=1)
        if batch.num_categories != self.K:
            raise InvalidSpecError("batch/process category-count mismatch")
        probs = self.qbar_rows(t, batch.data)
        workers = worker_count() if workers is None else max(1, workers)
        workers = min(workers, max(1, batch.batch_size))
        bounds = np.linspace(0, batch.batch_size, workers + 1).astype(int)
        rngs = spawn_rngs(seed, workers)

        def draw(w):
            lo, hi = bounds[w], bounds[w + 1]
            return sample_categorical(rngs[w], probs[lo:hi])

        if workers == 1:
            parts = [draw(0)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(draw, range(workers)))
        return SequenceBatch(np.concatenate(parts, axis=0), self.K)


def _frozen_eye(K):
    eye = np.eye(K)
    eye.setflags(write=False)
    return eye


def marginal_dist(x0: int, qbar_t: np.ndarray) -> Categorical:
    """q(x_t | x_0): row x0 of the cumulative kernel."""
    qbar_t = np.asarray(qbar_t)
    if not (0 <= x0 < qbar_t.shape[0]):
        raise InvalidSpecError(f"category index {x0} out of range")
    return Categorical(qbar_t[x0])


def posterior_log_probs(cols, prev_rows, marg):
    """Vectorized log q(x_{t-1} | x_t, x_0).

    cols      -- Q_t[:, x_t]           (..., K)
    prev_rows -- Qbar_{t-1}[x_0, :]    (..., K)
    marg      -- Qbar_t[x_0, x_t]      (...)
    """
    log_num = safe_log(cols) + safe_log(prev_rows)
    with np.errstate(invalid="ignore"):
        out = log_num - safe_log(marg)[..., None]
    out[np.isneginf(log_num)] = -np.inf
    return log_softmax(out, axis=-1, allow_empty=True)


def posterior_dist(x_t: int, x0: int, q_t: np.ndarray, qbar_prev: np.ndarray,
                   qbar_t: np.ndarray) -> Categorical:
    """q(x_{t-1} | x_t, x_0) from Bayes' rule on the forward kernels.

    Raises UnreachableStateError when q(x_t | x_0) = 0: such a pair signals
    an inconsistent schedule/matrix combination at the call site.
    """
    q_t = np.asarray(q_t, dtype=np.float64)
    qbar_prev = np.asarray(qbar_prev, dtype=np.float64)
    qbar_t = np.asarray(qbar_t, dtype=np.float64)
    marg = qbar_t[x0, x_t]
    if marg <= 0.0:
        raise UnreachableStateError(
            f"q(x_t={x_t} | x_0={x0}) = 0: unreachable pair")
    log_p = posterior_log_probs(q_t[:, x_t], qbar_prev[x0, :], np.float64(marg))
    return Categorical(_probs_from_log(log_p))


def _probs_from_log(log_p):
    out = np.zeros_like(log_p)
    finite = log_p > -np.inf
    out[finite] = np.exp(np.maximum(log_p[finite], LOG_FLOOR))
    return out


def sample_forward(batch: SequenceBatch, t: int, process: ForwardProcess,
                   seed, workers: int | None = None) -> SequenceBatch:
    """Module-level alias for :meth:`ForwardProcess.sample_forward`."""
    return process.sample_forward(batch, t, seed, workers=workers)


def sample_stationary(process: ForwardProcess, batch_size: int, seq_len: int,
                      rng) -> SequenceBatch:
    """Draw a batch from the stationary prior pi."""
    rng = rng_from_seed(rng)
    pi = np.broadcast_to(process.stationary(), (batch_size, seq_len, process.K))
    return SequenceBatch(sample_categorical(rng, pi), process.K)
