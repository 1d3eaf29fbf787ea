"""Scikit-learn style front end: fit a denoiser, sample, score likelihood bounds.

``DiscreteDiffusionModel`` composes the transition, schedule, process, and
denoiser modules behind the familiar estimator surface: ``fit(X)`` trains
the micro-denoiser on integer sequences, ``sample(n)`` runs ancestral
generation, and ``score(X)`` returns the mean evidence-lower-bound estimate
of the log-likelihood (higher is better), so the model drops into standard
model-selection tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_probability, check_sequences
from .data import estimate_marginal
from .denoiser import SGD, Adam, DenoiserConfig, MicroDenoiser, train_step
from .exceptions import InvalidSpecError
from .loss import vb_terms
from .process import ForwardProcess, SequenceBatch
from .reverse import ancestral_sample
from .schedule import make_schedule, mi_schedule
from .transition import TransitionSpec
from .util import rng_from_seed


class DiscreteDiffusionModel(DensityMixin, BaseEstimator):
    """Discrete-state diffusion model over integer category sequences.

    Parameters
    ----------
    family : str
        Transition-matrix family: "uniform", "absorbing", "gaussian",
        "embedding", "band_diagonal", or "absorbing_uniform".
    num_categories : int
        Number of categories K. For absorbing families this includes the
        absorbing token, which must never occur in the training data.
    schedule : str
        "linear", "cosine", "jacobi", "linear_exponent", or "mi" (the
        mutual-information schedule, estimated from the training data).
    num_steps : int
        Diffusion chain length T.
    lam : float
        Auxiliary denoising cross-entropy weight of the hybrid objective.
    optimizer : str
        "sgd" (momentum 0.9) or "adam".
    head : str
        Denoiser output head, "logits" or "logistic".
    sample_steps : int or None
        Number of evenly spaced reverse steps used by :meth:`sample`
        (None = all T steps).
    """

    def __init__(self, family="uniform", num_categories=32,
                 absorbing_index=None, band_width=None, neighbor_count=None,
                 mix_alpha=None, mix_beta=None, embeddings=None,
                 schedule="cosine", num_steps=100, beta_min=1e-4,
                 beta_max=0.02, cosine_s=0.008, alpha_step=None,
                 mi_grid_size=256, lam=0.0, hidden=128, depth=2,
                 time_dim=32, head="logits", optimizer="adam",
                 learning_rate=2e-3, momentum=0.9, batch_size=128,
                 n_train_steps=2000, shared_t=False, sample_steps=None,
                 random_state=0):
        self.family = family
        self.num_categories = num_categories
        self.absorbing_index = absorbing_index
        self.band_width = band_width
        self.neighbor_count = neighbor_count
        self.mix_alpha = mix_alpha
        self.mix_beta = mix_beta
        self.embeddings = embeddings
        self.schedule = schedule
        self.num_steps = num_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.cosine_s = cosine_s
        self.alpha_step = alpha_step
        self.mi_grid_size = mi_grid_size
        self.lam = lam
        self.hidden = hidden
        self.depth = depth
        self.time_dim = time_dim
        self.head = head
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.n_train_steps = n_train_steps
        self.shared_t = shared_t
        self.sample_steps = sample_steps
        self.random_state = random_state

    # --- assembly ---------------------------------------------------------

    def _build_spec(self):
        spec = TransitionSpec(
            family=self.family, num_categories=self.num_categories,
            absorbing_index=self.absorbing_index, band_width=self.band_width,
            neighbor_count=self.neighbor_count, mix_alpha=self.mix_alpha,
            mix_beta=self.mix_beta)
        if self.embeddings is not None:
            spec = spec.with_embeddings(self.embeddings)
        return spec

    def _build_schedule(self, spec, batch):
        T = check_positive_int(self.num_steps, "num_steps")
        if self.schedule == "mi":
            p0 = estimate_marginal(batch, spec.num_categories)
            return mi_schedule(spec, p0=p0, num_steps=T,
                               grid_size=self.mi_grid_size)
        return make_schedule(self.schedule, T, beta_min=self.beta_min,
                             beta_max=self.beta_max, cosine_s=self.cosine_s,
                             alpha_step=self.alpha_step)

    def build_process(self, X=None):
        """The ForwardProcess implied by the current parameters.

        MI schedules need data for the empirical marginal, hence the
        optional X. Exposed so the corruption machinery can be used
        without fitting a denoiser.
        """
        spec = self._build_spec()
        batch = None
        if X is not None:
            batch = SequenceBatch(check_sequences(X, spec.num_categories),
                                  spec.num_categories)
        if self.schedule == "mi" and batch is None:
            raise InvalidSpecError("the mi schedule needs training data")
        return ForwardProcess(spec, self._build_schedule(spec, batch))

    # --- estimator API ------------------------------------------------------

    def fit(self, X, y=None):
        """Train the micro-denoiser on integer sequences X of shape (n, D)."""
        check_probability(min(self.lam, 1.0), "lam")  # nonnegative check
        X = check_sequences(X, self.num_categories)
        n, D = X.shape
        self.n_features_in_ = D

        process = self.build_process(X)
        config = DenoiserConfig(num_categories=self.num_categories, seq_len=D,
                                hidden=self.hidden, depth=self.depth,
                                time_dim=self.time_dim, head=self.head)
        seed = 0 if self.random_state is None else int(self.random_state)
        model = MicroDenoiser.create(config, seed=seed)
        if self.optimizer == "adam":
            opt = Adam(self.learning_rate)
        elif self.optimizer == "sgd":
            opt = SGD(self.learning_rate, momentum=self.momentum)
        else:
            raise InvalidSpecError(f"unknown optimizer {self.optimizer!r}")

        rng = rng_from_seed(seed + 1)
        history = []
        bs = min(self.batch_size, n)
        for _ in range(check_positive_int(self.n_train_steps, "n_train_steps")):
            rows = X[rng.integers(0, n, size=bs)]
            report = train_step(model, rows, process, opt, lam=self.lam,
                                rng=rng, shared_t=self.shared_t)
            history.append(report.total_vb)

        self.process_ = process
        self.denoiser_ = model
        self.params_ = model.params
        self.loss_history_ = np.asarray(history)
        return self

    def sample(self, n_samples=1, random_state=None, final_argmax=False):
        """Generate sequences by ancestral sampling along the reverse chain."""
        check_is_fitted(self, "denoiser_")
        seed = self.random_state if random_state is None else random_state
        steps = reverse_step_grid(self.process_.T, self.sample_steps)
        batch = ancestral_sample(self.denoiser_, self.process_,
                                 self.n_features_in_, steps,
                                 seed=0 if seed is None else int(seed),
                                 batch_size=n_samples,
                                 final_argmax=final_argmax)
        return np.array(batch.data)

    def loss_report(self, X, mode=None, seed=0):
        """Full per-term bound breakdown for X (exact when K^D is small)."""
        check_is_fitted(self, "denoiser_")
        X = check_sequences(X, self.num_categories)
        batch = SequenceBatch(X, self.num_categories)
        if mode is None:
            mode = "exact" if self.num_categories ** X.shape[1] <= 4096 \
                else "positionwise"
        rng = None if mode == "exact" else rng_from_seed(seed)
        return vb_terms(batch, self.denoiser_, self.process_, mode=mode,
                        rng=rng, lam=self.lam)

    def score_samples(self, X):
        """Per-sequence lower bound on log-likelihood, in nats (higher better)."""
        check_is_fitted(self, "denoiser_")
        X = check_sequences(X, self.num_categories)
        return np.array([-self.loss_report(X[i:i + 1], seed=i).total_vb
                         for i in range(X.shape[0])])

    def score(self, X, y=None):
        """Mean evidence lower bound on log-likelihood of X, in nats."""
        return -self.loss_report(X).total_vb

    def bits_per_dim(self, X):
        """Bound on the negative log-likelihood in bits per dimension."""
        return self.loss_report(X).bits_per_dim


def reverse_step_grid(T: int, n_steps: int | None = None) -> list[int]:
    """Strictly decreasing step list from T to 0, evenly subsampled.

    n_steps counts the reverse transitions; None or n_steps >= T uses the
    full grid.
    """
    if n_steps is None or n_steps >= T:
        return list(range(T, -1, -1))
    if n_steps < 1:
        raise InvalidSpecError(f"need at least one reverse step, got {n_steps}")
    grid = np.unique(np.round(np.linspace(0, T, n_steps + 1)).astype(int))
    return [int(s) for s in grid[::-1]]
