"""Noise schedules: per-step transition rates beta_t or exponent increments.

Beta-parameterized kinds (linear, cosine, jacobi) carry a per-step
``betas`` array; exponent-parameterized kinds (mi, linear_exponent) carry
nondecreasing cumulative exponents ``alpha_bars`` with per-step kernels
Q_t = exp((abar_t - abar_{t-1}) R). The two views are linked by
beta = 1 - exp(-alpha), which is exact for the uniform and absorbing
families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from . import transition
from .exceptions import MIGridError, ScheduleError
from .util import entropy

KINDS = ("linear", "cosine", "jacobi", "mi", "linear_exponent")


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Schedule:
    """T noise levels plus cumulative quantities, immutable once built."""

    kind: str
    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray | None = None
    alpha_star: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.num_steps
        if T < 1:
            raise ScheduleError(f"num_steps must be >= 1, got {T}")
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (T,):
            raise ScheduleError(f"betas must have shape ({T},), got {betas.shape}")
        if np.any(betas < 0) or np.any(betas > 1):
            raise ScheduleError("betas must lie in [0, 1]")
        object.__setattr__(self, "betas", _freeze(betas))
        if self.alpha_bars is not None:
            abar = np.asarray(self.alpha_bars, dtype=np.float64)
            if abar.shape != (T,):
                raise ScheduleError(f"alpha_bars must have shape ({T},), got {abar.shape}")
            if np.any(np.diff(abar) < 0) or abar[0] < 0:
                raise ScheduleError("alpha_bars must be nonnegative and nondecreasing")
            object.__setattr__(self, "alpha_bars", _freeze(abar))

    @property
    def T(self) -> int:
        return self.num_steps

    def beta(self, t: int) -> float:
        """Per-step noise level, t in 1..T."""
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        """Per-step exponent increment, t in 1..T."""
        if self.alpha_bars is None:
            raise ScheduleError(f"schedule kind {self.kind!r} is not exponent-parameterized")
        prev = self.alpha_bars[t - 2] if t >= 2 else 0.0
        return float(self.alpha_bars[t - 1] - prev)

    def keep_prods(self) -> np.ndarray:
        """Survival products prod_{s<=t}(1 - beta_s), indexed t = 0..T."""
        out = np.empty(self.num_steps + 1)
        out[0] = 1.0
        out[1:] = np.cumprod(1.0 - self.betas)
        return out

    def to_json_dict(self) -> dict:
        out = {"kind": self.kind, "T": self.num_steps,
               "params": dict(self.params), "betas": self.betas.tolist()}
        if self.alpha_bars is not None:
            out["alpha_bars"] = self.alpha_bars.tolist()
        if self.alpha_star is not None:
            out["alpha_star"] = self.alpha_star
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Schedule":
        abar = obj.get("alpha_bars")
        return cls(kind=obj["kind"], num_steps=int(obj["T"]),
                   betas=np.asarray(obj["betas"], dtype=np.float64),
                   alpha_bars=None if abar is None else np.asarray(abar, dtype=np.float64),
                   alpha_star=obj.get("alpha_star"),
                   params=dict(obj.get("params", {})))


def beta_from_alpha(alpha: float) -> float:
    """Transition probability 1 - exp(-alpha) of an exponent increment."""
    if alpha < 0:
        raise ScheduleError(f"alpha must be nonnegative, got {alpha}")
    return -math.expm1(-alpha)


def make_schedule(kind: str, num_steps: int, *, beta_min: float = 1e-4,
                  beta_max: float = 0.02, cosine_s: float = 0.008,
                  alpha_step: float | None = None) -> Schedule:
    """Construct a beta- or linear-exponent schedule.

    * linear: beta_t linearly interpolated from beta_min to beta_max.
    * cosine: beta(t) = 1 - f(t+1)/f(t) with f(t) = cos(((t/T + s)/(1+s)) * pi/2),
      evaluated at t = 0..T-1 (0-based step index).
    * jacobi: beta_t = 1/(T - t + 1), reaching exactly 1 at t = T.
    * linear_exponent: cumulative exponents abar_t = t * alpha_step.

    The mutual-information schedule needs a transition spec and a data
    marginal; use :func:`mi_schedule`.
    """
    T = int(num_steps)
    if T < 1:
        raise ScheduleError(f"num_steps must be >= 1, got {T}")
    if kind == "linear":
        if not (0 <= beta_min <= beta_max <= 1):
            raise ScheduleError(
                f"need 0 <= beta_min <= beta_max <= 1, got {beta_min}, {beta_max}")
        betas = np.linspace(beta_min, beta_max, T)
        return Schedule("linear", T, betas,
                        params={"beta_min": beta_min, "beta_max": beta_max})
    if kind == "cosine":
        if cosine_s <= 0:
            raise ScheduleError(f"cosine offset must be positive, got {cosine_s}")
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + cosine_s) / (1.0 + cosine_s) * math.pi / 2.0)
        betas = 1.0 - f[1:] / f[:-1]
        return Schedule("cosine", T, betas, params={"s": cosine_s})
    if kind == "jacobi":
        betas = 1.0 / np.arange(T, 0, -1, dtype=np.float64)
        return Schedule("jacobi", T, betas, params={})
    if kind == "linear_exponent":
        if alpha_step is None or alpha_step <= 0:
            raise ScheduleError("linear_exponent needs a positive alpha_step")
        abar = alpha_step * np.arange(1, T + 1, dtype=np.float64)
        betas = np.full(T, beta_from_alpha(alpha_step))
        return Schedule("linear_exponent", T, betas, alpha_bars=abar,
                        params={"alpha_step": alpha_step})
    if kind == "mi":
        raise ScheduleError(
            "the mutual-information schedule needs a transition spec and a "
            "data marginal; call mi_schedule(...)")
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def mi_fraction(qbar: np.ndarray, p0: np.ndarray) -> float:
    """Fraction of information about x_0 destroyed by the kernel qbar.

    Computed exactly from the joint p0(i) * qbar[i, j] as
    (H(x0, x_t) - H(x_t)) / H(x0), which equals 1 - I(x_t; x0)/H(x0).
    """
    qbar = np.asarray(qbar, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    h0 = entropy(p0)
    if h0 <= 0:
        raise ScheduleError("data marginal has zero entropy; fraction undefined")
    joint = p0[:, None] * qbar
    h_joint = entropy(joint.reshape(-1))
    h_xt = entropy(joint.sum(axis=0))
    return float((h_joint - h_xt) / h0)


def _qbar_for_exponent(spec, rate, abar):
    """Cumulative kernel at exponent abar, closed form where available."""
    K = spec.num_categories if spec is not None else rate.shape[0]
    if spec is not None and spec.family == transition.UNIFORM:
        keep = math.exp(-abar)
        return keep * np.eye(K) + (1.0 - keep) * np.full((K, K), 1.0 / K)
    if spec is not None and spec.family == transition.ABSORBING:
        keep = math.exp(-abar)
        out = keep * np.eye(K)
        out[:, spec.absorbing_index] += 1.0 - keep
        return out
    return transition.mat_exp(rate, abar)


def mi_schedule(spec=None, *, rate: np.ndarray | None = None, p0,
                num_steps: int, grid_size: int = 256, grid_min: float = 1e-4,
                grid_max: float = 1e5, alpha_star: float | None = None,
                tol: float = 1e-2, validate: bool = True) -> Schedule:
    """Exponents abar_t destroying information linearly: frac(abar_t) = t/T.

    The destroyed-information fraction is evaluated on ``grid_size``
    geometrically spaced exponents, inverted with a monotone piecewise-cubic
    (Fritsch-Carlson) interpolant on (log abar, fraction) pairs, and the
    solved exponents are rounded to the nearest multiple of ``alpha_star``
    (default: smallest grid exponent / 4). Targets beyond the grid maximum
    raise MIGridError unless the grid-max fraction is already within ``tol``
    of the target (the t = T target of exactly 1 is never attainable with a
    finite exponent).
    """
    if (spec is None) == (rate is None):
        raise ScheduleError("provide exactly one of spec or rate")
    if spec is not None and spec.family not in (transition.UNIFORM,
                                                transition.ABSORBING):
        rate = spec.rate_matrix()
        spec = None
    p0 = np.asarray(p0, dtype=np.float64)
    T = int(num_steps)
    if T < 1:
        raise ScheduleError(f"num_steps must be >= 1, got {T}")
    if alpha_star is None:
        alpha_star = grid_min / 4.0
    if alpha_star <= 0:
        raise ScheduleError(f"alpha_star must be positive, got {alpha_star}")

    grid = np.geomspace(grid_min, grid_max, grid_size)
    fracs = np.array([mi_fraction(_qbar_for_exponent(spec, rate, a), p0)
                      for a in grid])
    drops = np.diff(fracs)
    if np.any(drops < -1e-9):
        worst = int(np.argmin(drops))
        raise ScheduleError(
            f"destroyed-information fraction decreased by {-drops[worst]:.3g} "
            f"between grid exponents {grid[worst]:.3g} and {grid[worst + 1]:.3g}")
    fracs = np.maximum.accumulate(fracs)  # flatten float dust

    log_grid = np.log(grid)
    interp = PchipInterpolator(log_grid, fracs)

    abars = np.empty(T)
    for t in range(1, T + 1):
        target = t / T
        if target <= fracs[0]:
            abars[t - 1] = grid[0]
        elif target > fracs[-1]:
            if target - fracs[-1] > tol:
                raise MIGridError(
                    f"target fraction {target:.4f} unreachable: grid maximum "
                    f"{grid_max:g} only destroys {fracs[-1]:.4f} of the information")
            abars[t - 1] = grid[-1]
        else:
            log_a = brentq(lambda x: interp(x) - target, log_grid[0], log_grid[-1])
            abars[t - 1] = math.exp(log_a)

    multiples = np.maximum.accumulate(np.rint(abars / alpha_star).astype(np.int64))
    abars = multiples.astype(np.float64) * alpha_star
    betas = -np.expm1(-np.diff(np.concatenate([[0.0], abars])))

    sched = Schedule("mi", T, betas, alpha_bars=abars, alpha_star=float(alpha_star),
                     params={"grid_size": grid_size, "grid_min": grid_min,
                             "grid_max": grid_max, "tol": tol})
    if validate:
        for t in (1, max(1, T // 2), T):
            frac = mi_fraction(_qbar_for_exponent(spec, rate, abars[t - 1]), p0)
            if abs(frac - t / T) > tol and not (t == T and frac >= 1 - tol):
                raise MIGridError(
                    f"solved exponent at t={t} misses its target: "
                    f"fraction {frac:.4f} vs {t / T:.4f} (tolerance {tol:g})")
    return sched
