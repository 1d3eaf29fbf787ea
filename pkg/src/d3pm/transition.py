"""Transition-matrix families for categorical corruption processes.

Each family produces a row-stochastic K x K one-step kernel Q_t, with entry
(i, j) the probability of moving from category i to category j. The module
also provides the two scaling devices for large K: rank-one closed forms of
the cumulative products for the uniform and absorbing families, and a
matrix-exponential parameterization Q_t = exp(alpha_t * R) driven by a
transition-rate matrix, with a power-of-two exponent table for fast
exponent composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import InvalidSpecError, UnsupportedFamilyError

UNIFORM = "uniform"
ABSORBING = "absorbing"
GAUSSIAN = "gaussian"
EMBEDDING = "embedding"
BAND_DIAGONAL = "band_diagonal"
ABSORBING_UNIFORM = "absorbing_uniform"

FAMILIES = (UNIFORM, ABSORBING, GAUSSIAN, EMBEDDING, BAND_DIAGONAL,
            ABSORBING_UNIFORM)

# Families whose kernels have columns summing to one as well as rows, and
# therefore a uniform stationary distribution.
DOUBLY_STOCHASTIC_FAMILIES = (UNIFORM, GAUSSIAN, EMBEDDING, BAND_DIAGONAL)

MAX_CATEGORIES = 65536


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TransitionSpec:
    """Family + parameters defining the one-step kernels over K categories.

    ``embeddings`` feeds the token-embedding family's neighbor graph; it is
    not part of the JSON wire format, and when omitted the family falls back
    to the 1-D integer-line embedding (category i at coordinate i).
    """

    family: str
    num_categories: int
    absorbing_index: int | None = None
    band_width: int | None = None
    neighbor_count: int | None = None
    mix_alpha: float | None = None
    mix_beta: float | None = None
    embeddings: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        K = self.num_categories
        if self.family not in FAMILIES:
            raise InvalidSpecError(f"unknown family {self.family!r}")
        if not (2 <= K <= MAX_CATEGORIES):
            raise InvalidSpecError(f"num_categories must be in [2, {MAX_CATEGORIES}], got {K}")
        if self.family in (ABSORBING, ABSORBING_UNIFORM):
            m = self.absorbing_index
            if m is None or not (0 <= m < K):
                raise InvalidSpecError(f"absorbing_index must be in [0, {K}), got {m}")
        if self.family == BAND_DIAGONAL:
            v = self.band_width
            if v is None or not (1 <= v <= K - 1):
                raise InvalidSpecError(f"band_width must be in [1, {K - 1}], got {v}")
        if self.family == EMBEDDING:
            k = self.neighbor_count
            if k is None or not (1 <= k <= K - 1):
                raise InvalidSpecError(f"neighbor_count must be in [1, {K - 1}], got {k}")
            if self.embeddings is None:
                object.__setattr__(self, "embeddings",
                                   np.arange(K, dtype=np.float64)[:, None])
            emb = np.asarray(self.embeddings, dtype=np.float64)
            if emb.ndim != 2 or emb.shape[0] != K:
                raise InvalidSpecError(f"embeddings must have shape (K, dim), got {emb.shape}")
            if not np.all(np.isfinite(emb)):
                raise InvalidSpecError("embeddings must be finite")
            object.__setattr__(self, "embeddings", _freeze(emb))
        if self.family == ABSORBING_UNIFORM:
            a, b = self.mix_alpha, self.mix_beta
            if a is None or b is None or a < 0 or b < 0 or a + b > 1:
                raise InvalidSpecError(
                    f"mix_alpha/mix_beta must be nonnegative with sum <= 1, got {a}, {b}")
            if a + b == 0:
                raise InvalidSpecError("mix_alpha + mix_beta must be positive")

    @property
    def K(self) -> int:
        return self.num_categories

    def stationary(self) -> np.ndarray:
        """Limit distribution of the forward process for this family."""
        K = self.num_categories
        if self.family in DOUBLY_STOCHASTIC_FAMILIES:
            return _freeze(np.full(K, 1.0 / K))
        if self.family == ABSORBING:
            pi = np.zeros(K)
            pi[self.absorbing_index] = 1.0
            return _freeze(pi)
        if self.family == ABSORBING_UNIFORM:
            a, b = self.mix_alpha, self.mix_beta
            pi = np.full(K, b / (K * (a + b)))
            pi[self.absorbing_index] += a / (a + b)
            return _freeze(pi)
        raise UnsupportedFamilyError(self.family)

    def rate_matrix(self) -> np.ndarray:
        """Transition-rate matrix R with Q(alpha) = exp(alpha * R).

        Exact for the uniform and absorbing families; for the embedding
        family the rate matrix is the symmetrized neighbor graph.
        """
        K = self.num_categories
        if self.family == UNIFORM:
            return _freeze(np.full((K, K), 1.0 / K) - np.eye(K))
        if self.family == ABSORBING:
            rate = -np.eye(K)
            rate[:, self.absorbing_index] += 1.0
            rate[self.absorbing_index, :] = 0.0
            return _freeze(rate)
        if self.family == EMBEDDING:
            return build_embedding_rate(self.embeddings, self.neighbor_count)
        raise UnsupportedFamilyError(
            f"no rate-matrix form for family {self.family!r}")

    def to_json_dict(self) -> dict:
        out = {"family": self.family, "K": self.num_categories}
        if self.absorbing_index is not None:
            out["m"] = self.absorbing_index
        if self.band_width is not None:
            out["v"] = self.band_width
        if self.neighbor_count is not None:
            out["k"] = self.neighbor_count
        if self.mix_alpha is not None:
            out["alpha"] = self.mix_alpha
        if self.mix_beta is not None:
            out["beta"] = self.mix_beta
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TransitionSpec":
        return cls(
            family=obj["family"],
            num_categories=int(obj["K"]),
            absorbing_index=obj.get("m"),
            band_width=obj.get("v"),
            neighbor_count=obj.get("k"),
            mix_alpha=obj.get("alpha"),
            mix_beta=obj.get("beta"),
        )

    def with_embeddings(self, embeddings) -> "TransitionSpec":
        return replace(self, embeddings=np.asarray(embeddings, dtype=np.float64))


def build_transition(spec: TransitionSpec, beta: float) -> np.ndarray:
    """One-step kernel Q_t for the given family at noise level beta.

    beta = 0 yields the identity for every family (the discretized-Gaussian
    normalizer is 0/0 there, so that family short-circuits to I explicitly
    to keep Q continuous in beta).
    """
    if not (0.0 <= beta <= 1.0):
        raise InvalidSpecError(f"beta must be in [0, 1], got {beta}")
    K = spec.num_categories
    if beta == 0.0 and spec.family != EMBEDDING:
        return _freeze(np.eye(K))

    if spec.family == UNIFORM:
        mat = np.full((K, K), beta / K)
        np.fill_diagonal(mat, 1.0 - (K - 1) / K * beta)
        return _freeze(mat)

    if spec.family == ABSORBING:
        m = spec.absorbing_index
        mat = (1.0 - beta) * np.eye(K)
        mat[:, m] += beta
        return _freeze(mat)

    if spec.family == GAUSSIAN:
        offsets = np.arange(-(K - 1), K)
        weights = np.exp(-4.0 * offsets**2 / ((K - 1) ** 2 * beta))
        norm = weights.sum()
        idx = np.arange(K)
        dist = np.abs(idx[:, None] - idx[None, :])
        mat = np.exp(-4.0 * dist.astype(np.float64) ** 2 / ((K - 1) ** 2 * beta)) / norm
        np.fill_diagonal(mat, 0.0)
        np.fill_diagonal(mat, 1.0 - mat.sum(axis=1))
        return _freeze(mat)

    if spec.family == BAND_DIAGONAL:
        v = spec.band_width
        idx = np.arange(K)
        dist = np.abs(idx[:, None] - idx[None, :])
        mat = np.where((dist > 0) & (dist <= v), beta / K, 0.0)
        np.fill_diagonal(mat, 1.0 - mat.sum(axis=1))
        return _freeze(mat)

    if spec.family == ABSORBING_UNIFORM:
        a, b = spec.mix_alpha, spec.mix_beta
        mat = beta * b / K * np.ones((K, K))
        mat[:, spec.absorbing_index] += beta * a
        mat += (1.0 - beta * (a + b)) * np.eye(K)
        return _freeze(mat)

    if spec.family == EMBEDDING:
        if beta >= 1.0:
            raise InvalidSpecError(
                "embedding family needs beta < 1 (exponent -log(1-beta) diverges)")
        alpha = -math.log1p(-beta)
        return mat_exp(spec.rate_matrix(), alpha)

    raise UnsupportedFamilyError(spec.family)


def build_embedding_rate(embeddings, neighbor_count: int) -> np.ndarray:
    """Symmetric rate matrix from a k-nearest-neighbor embedding graph.

    G[i, j] = 1 when point i is among the k nearest neighbors of point j
    (Euclidean metric, distance ties broken by lower category index); the
    symmetrized adjacency A = (G + G^T) / (2k) forms the off-diagonal of a
    rate matrix whose rows and columns both sum to zero.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim == 1:
        emb = emb[:, None]
    if not np.all(np.isfinite(emb)):
        raise InvalidSpecError("embeddings must be finite")
    K = emb.shape[0]
    k = int(neighbor_count)
    if not (1 <= k <= K - 1):
        raise InvalidSpecError(f"need 1 <= k <= K-1 distinct neighbors, got k={k}, K={K}")

    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)

    G = np.zeros((K, K))
    for j in range(K):
        # stable sort so equal distances resolve to the lower index
        order = np.argsort(dist[:, j], kind="stable")
        G[order[:k], j] = 1.0

    A = (G + G.T) / (2.0 * k)
    rate = A.copy()
    np.fill_diagonal(rate, 0.0)
    np.fill_diagonal(rate, -rate.sum(axis=1))
    return _freeze(rate)


def mat_exp(rate: np.ndarray, alpha: float) -> np.ndarray:
    """exp(alpha * R) for a rate matrix R, by scaling and squaring.

    The scaled matrix is pushed below 1-norm 0.5 before a truncated Taylor
    series, then squared back up. Tiny negative entries (< 1e-14 in
    magnitude, floating-point drift) are clamped to zero and rows are
    renormalized so the result is always a valid stochastic matrix.
    """
    rate = np.asarray(rate, dtype=np.float64)
    if alpha < 0:
        raise InvalidSpecError(f"alpha must be nonnegative, got {alpha}")
    K = rate.shape[0]
    if rate.shape != (K, K):
        raise InvalidSpecError(f"rate matrix must be square, got {rate.shape}")
    if alpha == 0.0:
        return _freeze(np.eye(K))

    scaled = alpha * rate
    norm1 = np.max(np.sum(np.abs(scaled), axis=0))
    squarings = max(0, int(math.ceil(math.log2(norm1 / 0.5)))) if norm1 > 0.5 else 0
    small = scaled / (2.0 ** squarings)

    result = np.eye(K)
    term = np.eye(K)
    for n in range(1, 60):
        term = term @ small / n
        result = result + term
        if np.max(np.abs(term)) < 1e-18:
            break
    for _ in range(squarings):
        result = result @ result

    result[(result < 0) & (result > -1e-14)] = 0.0
    if np.any(result < 0):
        raise InvalidSpecError(
            "matrix exponential produced negative entries beyond drift tolerance; "
            "rate matrix is not a valid generator")
    result /= result.sum(axis=1, keepdims=True)
    return _freeze(result)


def cumulative_product(matrices) -> list[np.ndarray]:
    """Prefix products [Q_1, Q_1 Q_2, ..., Q_1 ... Q_T] of one-step kernels."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        return []
    K = mats[0].shape[0]
    out = []
    acc = np.eye(K)
    for i, mat in enumerate(mats):
        if mat.shape != (K, K):
            raise InvalidSpecError(f"matrix {i} has shape {mat.shape}, expected {(K, K)}")
        acc = acc @ mat
        out.append(_freeze(acc))
    return out


@dataclass(frozen=True)
class LowRankCumulative:
    """Closed-form cumulative products a_t*I + b_t*A for rank-one families.

    A is ones*ones^T/K (uniform) or ones*e_m^T (absorbing). Coefficient
    arrays are indexed by t = 0..T with (a_0, b_0) = (1, 0); for the
    absorbing family a_t is the survival product prod_{s<=t}(1 - beta_s).
    """

    family: str
    num_categories: int
    a: np.ndarray
    b: np.ndarray
    absorbing_index: int | None = None

    @property
    def num_steps(self) -> int:
        return len(self.a) - 1

    def to_dense(self, t: int) -> np.ndarray:
        K = self.num_categories
        if self.family == UNIFORM:
            A = np.full((K, K), 1.0 / K)
        else:
            A = np.zeros((K, K))
            A[:, self.absorbing_index] = 1.0
        return _freeze(self.a[t] * np.eye(K) + self.b[t] * A)

    def rows(self, t: int, indices) -> np.ndarray:
        """Rows of the implied Qbar_t at the given start indices."""
        indices = np.asarray(indices)
        K = self.num_categories
        out = np.zeros(indices.shape + (K,))
        if self.family == UNIFORM:
            out += self.b[t] / K
        else:
            out[..., self.absorbing_index] += self.b[t]
        np.put_along_axis(out, indices[..., None],
                          np.take_along_axis(out, indices[..., None], -1) + self.a[t], -1)
        return out

    def segment(self, lo: int, hi: int) -> "LowRankCumulative":
        """Coefficients of the product Q_{lo+1} ... Q_hi (a single pair)."""
        # Divide out the prefix: for both families the composition rule is
        # (a1, b1)*(a2, b2) = (a1 a2, a1 b2 + b1 a2 + b1 b2) with a + b = 1,
        # so the segment has a = a_hi / a_lo, b = 1 - a.
        if self.a[lo] == 0.0:
            raise InvalidSpecError(
                f"cannot split a fully absorbed prefix at t={lo}")
        a = self.a[hi] / self.a[lo]
        return LowRankCumulative(self.family, self.num_categories,
                                 np.array([1.0, a]), np.array([0.0, 1.0 - a]),
                                 self.absorbing_index)


def lowrank_cumulative(family: str, betas, num_categories: int,
                       absorbing_index: int | None = None) -> LowRankCumulative:
    """Closed-form cumulative products for the uniform/absorbing families.

    Uses the quotient-ring identity X^2 = X for X = ones*ones^T/K (uniform)
    and the survival-product telescoping for the absorbing family; the
    implied dense matrices match the dense cumulative products entrywise.
    """
    betas = np.asarray(betas, dtype=np.float64)
    T = len(betas)
    a = np.ones(T + 1)
    b = np.zeros(T + 1)
    if family == UNIFORM:
        # (a + bX)(1-beta + beta X) reduced by X^2 = X
        for t in range(1, T + 1):
            beta = betas[t - 1]
            a[t] = a[t - 1] * (1.0 - beta)
            b[t] = a[t - 1] * beta + b[t - 1] * (1.0 - beta) + b[t - 1] * beta
        return LowRankCumulative(UNIFORM, num_categories, _freeze(a), _freeze(b))
    if family == ABSORBING:
        if absorbing_index is None or not (0 <= absorbing_index < num_categories):
            raise InvalidSpecError("absorbing family needs a valid absorbing_index")
        a[1:] = np.cumprod(1.0 - betas)
        b = 1.0 - a
        return LowRankCumulative(ABSORBING, num_categories, _freeze(a), _freeze(b),
                                 absorbing_index)
    raise UnsupportedFamilyError(
        f"low-rank closed form exists only for uniform/absorbing, got {family!r}")


@dataclass(frozen=True)
class Pow2ExponentTable:
    """Precomputed exp(2^k * alpha_star * R) for exponent composition.

    ``matrix(n)`` multiplies the subset of table entries selected by the
    binary expansion of n, reproducing exp(n * alpha_star * R) without a
    fresh exponential per call.
    """

    alpha_star: float
    mats: tuple

    @property
    def max_multiple(self) -> int:
        return (1 << len(self.mats)) - 1

    def matrix(self, n: int) -> np.ndarray:
        if n < 0 or int(n) != n:
            raise InvalidSpecError(f"exponent multiple must be a nonnegative integer, got {n}")
        n = int(n)
        if n > self.max_multiple:
            raise InvalidSpecError(
                f"multiple {n} exceeds table capacity {self.max_multiple}")
        K = self.mats[0].shape[0]
        acc = np.eye(K)
        bit = 0
        while n:
            if n & 1:
                acc = acc @ self.mats[bit]
            n >>= 1
            bit += 1
        return _freeze(acc)


def precompute_pow2_exponents(rate: np.ndarray, alpha_star: float,
                              alpha_max: float) -> Pow2ExponentTable:
    """Exponent table exp(2^k * alpha_star * R), 0 <= k <= log2(alpha_max/alpha_star)."""
    if alpha_star <= 0:
        raise InvalidSpecError(f"alpha_star must be positive, got {alpha_star}")
    if alpha_max < alpha_star:
        raise InvalidSpecError("alpha_max must be at least alpha_star")
    kmax = max(0, int(math.floor(math.log2(alpha_max / alpha_star + 1e-12))))
    base = mat_exp(rate, alpha_star)
    mats = [base]
    for _ in range(kmax):
        sq = mats[-1] @ mats[-1]
        sq = np.maximum(sq, 0.0)
        sq /= sq.sum(axis=1, keepdims=True)
        mats.append(_freeze(sq))
    return Pow2ExponentTable(alpha_star=float(alpha_star), mats=tuple(mats))


def matrix_to_csv(mat: np.ndarray, fh) -> None:
    """Row-major full-precision CSV dump of a matrix (for inspection)."""
    for row in np.asarray(mat):
        fh.write(",".join(repr(float(v)) for v in row) + "\n")
