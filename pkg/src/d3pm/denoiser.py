"""Reference micro-denoiser: a small MLP with hand-derived gradients.

Any callable ``denoiser(x, t) -> logits`` of shape (B, D, K) plugs into the
loss and sampling machinery; this module provides the built-in one used for
desk-scale training, plus optimizers, the training step, and a central
finite-difference gradient check.

The network consumes the one-hot sequence concatenated with a sinusoidal
embedding of the timestep. Two output heads exist: ``logits`` adds the
one-hot input back onto the network output (so a zero-initialized output
layer starts out predicting "the clean datum is the corrupted input"), and
``logistic`` emits a (location, log-scale) pair per position that is
discretized through the truncated logistic bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import D3PMError, InvalidSpecError, TrainingDivergedError
from .loss import LN2, LossReport, prior_term, prior_terms
from .process import posterior_log_probs
from .reverse import apply_absorbing_mask, kstep_log_probs
from .util import (kl_categorical, log_softmax, one_hot, rng_from_seed,
                   sample_categorical)


@dataclass(frozen=True)
class DenoiserConfig:
    num_categories: int
    seq_len: int
    hidden: int = 128
    depth: int = 2
    time_dim: int = 32
    head: str = "logits"

    def __post_init__(self):
        if self.head not in ("logits", "logistic"):
            raise InvalidSpecError(f"unknown head {self.head!r}")
        if not (0 <= self.depth <= 2):
            raise InvalidSpecError(f"depth must be 0, 1, or 2, got {self.depth}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise InvalidSpecError("time_dim must be an even integer >= 2")

    @property
    def in_dim(self) -> int:
        return self.seq_len * self.num_categories + self.time_dim

    @property
    def out_dim(self) -> int:
        if self.head == "logits":
            return self.seq_len * self.num_categories
        return 2 * self.seq_len


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal timestep features, geometric periods up to 1e4."""
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.exp(-math.log(10000.0) * exponents)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class MicroDenoiser:
    """Two-hidden-layer MLP denoiser with explicit backprop."""

    def __init__(self, config: DenoiserConfig, params: dict, init_seed: int):
        self.config = config
        self.params = params
        self.init_seed = int(init_seed)

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0) -> "MicroDenoiser":
        """Fan-in-scaled uniform init; the output layer starts at zero so
        the one-hot skip connection dominates at step 0."""
        rng = rng_from_seed(seed)
        params = {}
        dims = [config.in_dim] + [config.hidden] * config.depth
        for i in range(config.depth):
            bound = 1.0 / math.sqrt(dims[i])
            params[f"w{i}"] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
            params[f"b{i}"] = np.zeros(dims[i + 1])
        params["w_out"] = np.zeros((dims[-1], config.out_dim))
        params["b_out"] = np.zeros(config.out_dim)
        return cls(config, params, seed)

    # --- forward ------------------------------------------------------------

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        logits, _ = self._forward(np.asarray(x), int(t))
        return logits

    def _forward(self, x, t):
        cfg = self.config
        B, D = x.shape
        if D != cfg.seq_len:
            raise InvalidSpecError(f"expected sequences of length {cfg.seq_len}, got {D}")
        xoh = one_hot(x, cfg.num_categories)
        temb = np.broadcast_to(time_embedding(t, cfg.time_dim), (B, cfg.time_dim))
        inp = np.concatenate([xoh.reshape(B, -1), temb], axis=1)

        cache = {"x": x, "inp": inp, "hs": [inp]}
        h = inp
        for i in range(cfg.depth):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if np.any(np.isnan(z)):
                raise D3PMError(f"NaN activations after hidden layer {i}")
            # tanh keeps the forward map smooth, so central finite
            # differences verify the hand-derived gradients tightly
            h = np.tanh(z)
            cache["hs"].append(h)
        out = h @ self.params["w_out"] + self.params["b_out"]
        if np.any(np.isnan(out)):
            raise D3PMError("NaN activations after output layer")
        cache["out"] = out

        if cfg.head == "logits":
            logits = out.reshape(B, D, cfg.num_categories) + xoh
            return logits, cache
        return self._logistic_forward(out, x, cache)

    def _logistic_forward(self, out, x, cache):
        cfg = self.config
        B, D = x.shape
        K = cfg.num_categories
        mu_raw, log_scale = out[:, :D], out[:, D:]
        nu = 2.0 * x / (K - 1) - 1.0
        loc = np.tanh(nu + mu_raw)
        inv_scale = np.exp(-(log_scale - 2.0))[..., None]
        bin_width = 2.0 / (K - 1)
        cb = np.linspace(-1.0, 1.0, K) - loc[..., None]
        za = inv_scale * (cb + 0.5 * bin_width)
        zb = inv_scale * (cb - 0.5 * bin_width)
        log_a = _log_sig(za)
        log_b = _log_sig(zb)
        e = np.exp(log_b - log_a)
        denom = 1.0 - e + 1e-6
        logits = log_a + np.log(denom)
        cache.update(loc=loc, inv_scale=inv_scale, za=za, zb=zb, e=e, denom=denom)
        return logits, cache

    # --- backward -----------------------------------------------------------

    def _backward(self, cache, dlogits):
        """Parameter gradients from d(loss)/d(logits); masked entries must
        already carry zero gradient (they do for the KL/CE formulas)."""
        cfg = self.config
        B = dlogits.shape[0]
        if cfg.head == "logits":
            dout = dlogits.reshape(B, -1)
        else:
            dout = self._logistic_backward(cache, dlogits)

        grads = {}
        h = cache["hs"][-1]
        grads["w_out"] = h.T @ dout
        grads["b_out"] = dout.sum(axis=0)
        dh = dout @ self.params["w_out"].T
        for i in reversed(range(cfg.depth)):
            dz = dh * (1.0 - cache["hs"][i + 1] ** 2)
            grads[f"w{i}"] = cache["hs"][i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"w{i}"].T
        return grads

    def _logistic_backward(self, cache, dlogits):
        loc, inv = cache["loc"], cache["inv_scale"]
        za, zb, e, denom = cache["za"], cache["zb"], cache["e"], cache["denom"]
        dl_da = dlogits * (1.0 + e / denom)
        dl_db = dlogits * (-e / denom)
        gza = dl_da * _sig(-za)
        gzb = dl_db * _sig(-zb)
        dloc = np.sum(gza + gzb, axis=-1) * (-inv[..., 0])
        dmu = dloc * (1.0 - loc ** 2)
        dlogs = -np.sum(gza * za + gzb * zb, axis=-1)
        return np.concatenate([dmu, dlogs], axis=1)


def _sig(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sig(x):
    return np.where(x < 0, x - np.log1p(np.exp(-np.abs(x))),
                    -np.log1p(np.exp(-np.abs(x))))


def predict_logits(model: MicroDenoiser, batch, t: int) -> np.ndarray:
    """Per-position clean-datum logits for a SequenceBatch."""
    return model(batch.data, t)


# --- objective values and gradients ----------------------------------------

def _masked_log_softmax(model, x, t, spec):
    logits, cache = model._forward(x, t)
    masked = apply_absorbing_mask(logits, spec)
    return log_softmax(masked, axis=-1), cache


def _kl_and_grad(process, t, states, x0, log_p_tilde):
    """Per-state KL values and gradients w.r.t. the (masked) logits.

    states, x0: (S, D). grad_k = -p~_k * sum_j Qbar_{t-1}[k, j] *
    (q_j - p_j) / f_j with f = p~ @ Qbar_{t-1}; terms with f_j = 0 have
    q_j = p_j = 0 and drop out.
    """
    q_t = process.q_mat(t)
    M = process.qbar_mat(t - 1)
    qbar_prev_rows = process.qbar_rows(t - 1, x0)
    marg_rows = process.qbar_rows(t, x0)
    cols = q_t.T[states]
    marg = np.take_along_axis(marg_rows, states[..., None], -1)[..., 0]
    log_post = posterior_log_probs(cols, qbar_prev_rows, marg)
    p_tilde = np.where(np.isneginf(log_p_tilde), 0.0, np.exp(log_p_tilde))
    f = p_tilde @ M
    log_rev = kstep_log_probs(cols, f)
    kl = kl_categorical(log_post, log_rev)

    q = np.where(np.isneginf(log_post), 0.0, np.exp(log_post))
    p = np.where(np.isneginf(log_rev), 0.0, np.exp(log_rev))
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(f > 0, (q - p) / f, 0.0)
    grad = -p_tilde * (u @ M.T)
    return kl, grad


def _ce_and_grad(log_p_tilde, x0):
    """Reconstruction cross-entropy (summed over positions) and its gradient."""
    x0 = np.broadcast_to(x0, log_p_tilde.shape[:-1])
    picked = np.take_along_axis(log_p_tilde, x0[..., None], -1)
    ce = -np.sum(picked[..., 0], axis=-1)
    p_tilde = np.where(np.isneginf(log_p_tilde), 0.0, np.exp(log_p_tilde))
    grad = p_tilde - one_hot(x0, log_p_tilde.shape[-1])
    return ce, grad


def exact_loss_and_grads(model, x0_rows, process, lam: float = 0.0,
                         objective: str = "hybrid", max_enum: int = 65536):
    """Deterministic exact-mode objective and its analytic gradients.

    ``hybrid`` is the full bound plus lam times the t-averaged auxiliary
    cross-entropy (identical to the exact-mode LossReport's total_hybrid);
    ``ce`` is the auxiliary cross-entropy alone.
    """
    if objective not in ("hybrid", "ce"):
        raise InvalidSpecError(f"unknown objective {objective!r}")
    x0_rows = np.asarray(x0_rows)
    B, D = x0_rows.shape
    K, T = process.K, process.T
    if K ** D > max_enum:
        raise InvalidSpecError(f"exact objective needs K^D <= {max_enum}")
    grids = np.meshgrid(*([np.arange(K)] * D), indexing="ij")
    states = np.stack([g.reshape(-1) for g in grids], axis=-1)

    value = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for row in x0_rows:
        if objective == "hybrid":
            value += prior_term(process, row) / B
        for t in range(1, T + 1):
            marg_rows = process.qbar_rows(t, row)
            w = np.prod(np.take_along_axis(
                marg_rows[None, :, :], states[:, :, None], -1)[..., 0], axis=-1)
            active = w > 0
            sub, w_sub = states[active], w[active]
            x0 = np.broadcast_to(row, sub.shape)
            log_p_tilde, cache = _masked_log_softmax(model, sub, t, process.spec)
            ce, dce = _ce_and_grad(log_p_tilde, x0)
            dlogits = np.zeros_like(dce)
            if objective == "ce":
                value += float(w_sub @ ce) / (T * B)
                dlogits += (w_sub[:, None, None] * dce) / (T * B)
            else:
                aux_coeff = lam / (T * B)
                recon_coeff = (1.0 / B if t == 1 else 0.0) + aux_coeff
                value += recon_coeff * float(w_sub @ ce)
                dlogits += recon_coeff * w_sub[:, None, None] * dce
                if t >= 2:
                    kl, dkl = _kl_and_grad(process, t, sub, x0, log_p_tilde)
                    value += float(w_sub @ np.sum(kl, axis=-1)) / B
                    dlogits += (w_sub[:, None, None] * dkl) / B
            for name, g in model._backward(cache, dlogits).items():
                grads[name] += g
    return value, grads


def stochastic_loss_and_grads(model, x0_rows, process, lam: float = 0.0,
                              rng=0, shared_t: bool = False):
    """One-draw training objective: mean over examples of term(t) + lam*CE(t).

    Returns (LossReport, grads, objective_value). The report carries the
    T-scaled unbiased estimate of the bound; the gradient is taken on the
    per-term objective (the published per-timestep training estimator), so
    the lam presets keep their usual meaning.
    """
    rng = rng_from_seed(rng)
    x0_rows = np.asarray(x0_rows)
    B, D = x0_rows.shape
    T = process.T
    ts = (np.full(B, int(rng.integers(1, T + 1))) if shared_t
          else rng.integers(1, T + 1, size=B))

    l_T = float(np.mean(prior_terms(process, x0_rows)))
    l_t_terms = np.zeros(max(0, T - 1))
    l_0 = 0.0
    aux = 0.0
    objective = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}

    for t in np.unique(ts):
        t = int(t)
        idx = np.flatnonzero(ts == t)
        rows = x0_rows[idx]
        x_t = sample_categorical(rng, process.qbar_rows(t, rows))
        log_p_tilde, cache = _masked_log_softmax(model, x_t, t, process.spec)
        ce, dce = _ce_and_grad(log_p_tilde, rows)
        aux += float(np.sum(ce)) / B
        if t == 1:
            terms, dterms = ce, dce
            l_0 += T * float(np.sum(ce)) / B
        else:
            kl, dkl = _kl_and_grad(process, t, x_t, rows, log_p_tilde)
            terms, dterms = np.sum(kl, axis=-1), dkl
            l_t_terms[t - 2] += T * float(np.sum(terms)) / B
        objective += float(np.sum(terms + lam * ce)) / B
        dlogits = (dterms + lam * dce) / B
        for name, g in model._backward(cache, dlogits).items():
            grads[name] += g

    total_vb = l_T + float(np.sum(l_t_terms)) + l_0
    report = LossReport(l_T=l_T, l_t_terms=l_t_terms, l_0=l_0, aux_ce=aux,
                        total_vb=total_vb, total_hybrid=total_vb + lam * aux,
                        bits_per_dim=total_vb / (D * LN2), num_dims=D,
                        lam=float(lam), mode="stochastic")
    return report, grads, objective


# --- optimizers -------------------------------------------------------------

class SGD:
    """SGD with momentum (default 0.9). lr = 0 leaves params bit-identical."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params, grads):
        for name, g in grads.items():
            v = self._velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            params[name] -= self.lr * v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m, self._v, self._scratch, self._t = {}, {}, {}, 0

    def step(self, params, grads):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        # bias correction folded into the step size; updates run in place
        # through a scratch buffer to avoid temporaries on large layers
        alpha = self.lr * math.sqrt(1 - b2 ** self._t) / (1 - b1 ** self._t)
        eps_hat = self.eps * math.sqrt(1 - b2 ** self._t)
        for name, g in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
                self._scratch[name] = np.empty_like(g)
            m, v, s = self._m[name], self._v[name], self._scratch[name]
            m *= b1
            m += (1 - b1) * g
            np.square(g, out=s)
            v *= b2
            v += (1 - b2) * s
            np.sqrt(v, out=s)
            s += eps_hat
            np.divide(m, s, out=s)
            s *= alpha
            params[name] -= s


def train_step(model, x0_rows, process, optimizer, lam: float = 0.0, rng=0,
               shared_t: bool = False, max_loss: float = 1e6) -> LossReport:
    """Single stochastic update; returns the pre-update loss report."""
    report, grads, objective = stochastic_loss_and_grads(
        model, x0_rows, process, lam=lam, rng=rng, shared_t=shared_t)
    if not math.isfinite(objective) or objective > max_loss:
        raise TrainingDivergedError(
            f"objective {objective!r} exceeded {max_loss:g} nats "
            f"(l_T={report.l_T:.4g}, aux={report.aux_ce:.4g}, "
            f"grad norms={ {k: float(np.linalg.norm(v)) for k, v in grads.items()} })")
    optimizer.step(model.params, grads)
    return report


def grad_check(model, x0_rows, process, lam: float = 0.01,
               objective: str = "hybrid", epsilon: float = 1e-4,
               fraction: float = 0.01, min_coords: int = 10, rng=0) -> float:
    """Central finite differences vs analytic gradients on a random subset.

    Checks ~``fraction`` of the parameters (at least ``min_coords``) of the
    deterministic exact-mode objective; returns the largest relative error
    |g_fd - g| / (|g_fd| + |g| + 1e-8).
    """
    rng = rng_from_seed(rng)
    _, grads = exact_loss_and_grads(model, x0_rows, process, lam=lam,
                                    objective=objective)

    names = sorted(model.params)
    sizes = [model.params[n].size for n in names]
    total = int(np.sum(sizes))
    n_check = max(min_coords, int(math.ceil(fraction * total)))
    coords = rng.choice(total, size=min(n_check, total), replace=False)

    def value():
        v, _ = exact_loss_and_grads(model, x0_rows, process, lam=lam,
                                    objective=objective)
        return v

    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for c in coords:
        slot = int(np.searchsorted(offsets, c, side="right") - 1)
        name = names[slot]
        flat_idx = int(c - offsets[slot])
        idx = np.unravel_index(flat_idx, model.params[name].shape)
        orig = model.params[name][idx]
        model.params[name][idx] = orig + epsilon
        plus = value()
        model.params[name][idx] = orig - epsilon
        minus = value()
        model.params[name][idx] = orig
        fd = (plus - minus) / (2 * epsilon)
        g = grads[name][idx]
        worst = max(worst, abs(fd - g) / (abs(fd) + abs(g) + 1e-8))
    return worst
