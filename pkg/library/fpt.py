"""First-passage machinery for an Ornstein-Uhlenbeck noise process.

The noise at ``v_sf`` is reduced to a stationary OU process ``X`` with standard
deviation ``sigma`` and relaxation rate ``theta = 2 pi f_c``::

    dX = -theta X dt + sigma sqrt(2 theta) dW

Between two timesteps the only information available is the pair of endpoint
values, so a threshold crossing is a property of the OU bridge. The space-time
transform ``Y = X e^{theta t}``, ``tau = sigma^2 (e^{2 theta t} - 1)`` turns the
bridge into a Brownian bridge facing the barrier ``b e^{theta t}``. Replacing
that barrier by its chord gives the closed form::

    p = exp(-(b - x0)(b - x1) / (sigma^2 sinh(theta dt)))

which is exact in the Wiener limit. Longer intervals are split into
``2^k`` sub-intervals whose interior values are integrated out numerically on a
Gauss-Legendre grid; the chord formula is applied on every sub-interval.

Integrating the chord formula against the Gaussian bridge marginal gives the
crossing-time distribution within a sub-interval in closed form as well
(:func:`chord_cross_before`). The event generator uses it together with
:func:`bridge_nodes`, which draws the bridge at the sub-interval boundaries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable

import numpy as np
from scipy import signal, special

from .validators import ensure_non_negative, ensure_positive

logger = logging.getLogger(__name__)

DEFAULT_MAX_SUB_THETA_DT = 0.125
DEFAULT_RESOLUTION = 1.0 / 1024.0
MAX_REFINE_DEPTH = 6

_GRID_NODES = 96
_MARGINAL_NODES = 32
_SEARCH_NODES = 32
_GRID_MARGIN = 8.0
_NEGLIGIBLE = 1e-12
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ZeroCrossingProbabilityError(ValueError):
    """Raised when a crossing time is requested for an interval that cannot cross."""


@dataclass(frozen=True)
class OuParams:
    """Stationary standard deviation and corner frequency of the OU reduction.

    When built from a circuit noise model, ``f_c`` is the dominant pole of the
    closed-loop front end (``1 / (2 pi tau_dominant)``), not
    ``1 / (2 pi max(tau_pd, tau_sf))`` of the open-loop time constants.
    """

    sigma: float
    f_c: float

    def __post_init__(self) -> None:
        ensure_non_negative({"sigma": self.sigma}, "OuParams")
        ensure_positive({"f_c": self.f_c}, "OuParams")

    @property
    def theta(self) -> float:
        return 2.0 * math.pi * self.f_c

    @classmethod
    def from_noise_model(cls, model: Any, gain: float = 1.0) -> "OuParams":
        """OU reduction of a :class:`~library.circuit.NoiseModel`, scaled by ``gain``."""

        return cls(sigma=model.sigma * gain, f_c=model.f_c)

    def scaled(self, gain: float) -> "OuParams":
        return OuParams(sigma=self.sigma * gain, f_c=self.f_c)


@dataclass(frozen=True)
class BridgeQuery:
    x0: float
    x1: float
    dt: float
    barrier: float

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"BridgeQuery dt must be positive, got {self.dt}")


@lru_cache(maxsize=8)
def _legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def _gauss_grid(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = _legendre(n)
    half = 0.5 * (hi - lo)
    return lo + half * (nodes + 1.0), half * weights


def _refine_subintervals(theta_dt: float, max_sub_theta_dt: float, max_depth: int) -> int:
    if theta_dt <= max_sub_theta_dt:
        return 1
    depth = min(int(math.ceil(math.log2(theta_dt / max_sub_theta_dt))), max_depth)
    return 2 ** max(depth, 0)


def _chord_no_cross(u0: np.ndarray, u1: np.ndarray, b: float, s: float) -> np.ndarray:
    """No-crossing probability in sigma units for a bridge of length ``s = theta h``."""

    gap = np.maximum(b - u0, 0.0) * np.maximum(b - u1, 0.0)
    return -np.expm1(-gap / math.sinh(s))


def _transition(x: np.ndarray, y: np.ndarray, s: float) -> np.ndarray:
    a = math.exp(-s)
    var = -math.expm1(-2.0 * s)
    return np.exp(-((y - a * x) ** 2) / (2.0 * var)) / (_SQRT_2PI * math.sqrt(var))


def _no_cross(
    u0: np.ndarray,
    u1: np.ndarray,
    b: float,
    theta_dt: float,
    *,
    max_sub_theta_dt: float,
    max_depth: int = MAX_REFINE_DEPTH,
) -> np.ndarray:
    """Bridge no-crossing probability for endpoints strictly below ``b`` (sigma units)."""

    chord = _chord_no_cross(u0, u1, b, theta_dt)
    n_sub = _refine_subintervals(theta_dt, max_sub_theta_dt, max_depth)
    if n_sub == 1:
        return chord

    refine = (1.0 - chord) > _NEGLIGIBLE
    if not np.any(refine):
        return chord
    r0 = u0[refine]
    r1 = u1[refine]

    s = theta_dt / n_sub
    lo = min(float(r0.min()), float(r1.min()), 0.0) - _GRID_MARGIN
    z, w = _gauss_grid(lo, b, _GRID_NODES)

    kernel = (
        _transition(z[:, None], z[None, :], s)
        * _chord_no_cross(z[:, None], z[None, :], b, s)
        * w[None, :]
    )
    forward = (
        _transition(r0[:, None], z[None, :], s)
        * _chord_no_cross(r0[:, None], z[None, :], b, s)
        * w[None, :]
    )
    for _ in range(n_sub - 2):
        forward = forward @ kernel
    closing = _transition(z[None, :], r1[:, None], s) * _chord_no_cross(
        z[None, :], r1[:, None], b, s
    )
    numerator = np.sum(forward * closing, axis=1)
    density = _transition(r0, r1, theta_dt)

    refined = np.where(density > 1e-300, numerator / np.maximum(density, 1e-300), chord[refine])
    out = chord.copy()
    out[refine] = np.clip(refined, 0.0, 1.0)
    return out


def crossing_probabilities(
    x0: Any,
    x1: Any,
    dt: float,
    barrier: float,
    ou: OuParams,
    *,
    max_sub_theta_dt: float = DEFAULT_MAX_SUB_THETA_DT,
) -> np.ndarray:
    """Vectorised :func:`crossing_probability` over endpoint arrays with a shared ``dt``."""

    ensure_positive({"dt": dt}, "crossing_probabilities")
    start = np.asarray(x0, dtype=float)
    end = np.asarray(x1, dtype=float)
    start, end = np.broadcast_arrays(start, end)
    shape = start.shape
    start = start.ravel()
    end = end.ravel()

    touched = (start >= barrier) | (end >= barrier)
    p = touched.astype(float)
    if ou.sigma == 0 or math.isinf(barrier) or np.all(touched):
        return p.reshape(shape)

    free = ~touched
    b = barrier / ou.sigma
    no_cross = _no_cross(
        start[free] / ou.sigma,
        end[free] / ou.sigma,
        b,
        ou.theta * dt,
        max_sub_theta_dt=max_sub_theta_dt,
    )
    p[free] = 1.0 - no_cross
    return p.reshape(shape)


def crossing_probability(
    q: BridgeQuery,
    ou: OuParams,
    *,
    max_sub_theta_dt: float = DEFAULT_MAX_SUB_THETA_DT,
) -> float:
    """Probability that the OU bridge from ``x0`` to ``x1`` reaches the barrier within ``dt``."""

    return float(
        crossing_probabilities(
            q.x0, q.x1, q.dt, q.barrier, ou, max_sub_theta_dt=max_sub_theta_dt
        )[()]
    )


def chord_crossing_probabilities(
    x0: Any,
    x1: Any,
    dt: Any,
    barrier: Any,
    ou: OuParams,
) -> np.ndarray:
    """Single-chord crossing probability, broadcast over every argument.

    Meant for sub-intervals with ``theta * dt`` up to ``DEFAULT_MAX_SUB_THETA_DT``;
    :func:`crossing_probabilities` refines longer intervals.
    """

    start, end, span, b = np.broadcast_arrays(
        *(np.asarray(value, dtype=float) for value in (x0, x1, dt, barrier))
    )
    if ou.sigma == 0:
        return ((start >= b) | (end >= b)).astype(float)
    gap = np.maximum(b - start, 0.0) * np.maximum(b - end, 0.0) / ou.sigma**2
    return np.exp(-gap / np.sinh(ou.theta * span))


def subinterval_count(
    dt: float,
    ou: OuParams,
    max_sub_theta_dt: float = DEFAULT_MAX_SUB_THETA_DT,
) -> int:
    """Power-of-two number of equal sub-intervals with ``theta * h <= max_sub_theta_dt``.

    A noiseless process needs no subdivision.
    """

    if ou.sigma == 0:
        return 1
    return _refine_subintervals(ou.theta * dt, max_sub_theta_dt, MAX_REFINE_DEPTH)


def _bridge_moments(x0: Any, x1: Any, dt: float, t: Any, theta: float) -> tuple[Any, Any]:
    """Mean and variance (in units of sigma^2) of the OU bridge at time ``t``."""

    t = np.asarray(t, dtype=float)
    one_minus_a1 = -np.expm1(-2.0 * theta * t)
    one_minus_a2 = -np.expm1(-2.0 * theta * (dt - t))
    a1 = np.exp(-theta * t)
    a2 = np.exp(-theta * (dt - t))
    precision = 1.0 / one_minus_a1 + a2 * a2 / one_minus_a2
    mean = (a1 * np.asarray(x0) / one_minus_a1 + a2 * np.asarray(x1) / one_minus_a2) / precision
    return mean, 1.0 / precision


def bridge_sample(
    x0: Any,
    x1: Any,
    dt: float,
    t: float,
    ou: OuParams,
    z: Any,
) -> Any:
    """Value of the OU bridge at ``t`` for standard normal draw(s) ``z``."""

    if t <= 0:
        return x0
    if t >= dt:
        return x1
    mean, var = _bridge_moments(x0, x1, dt, t, ou.theta)
    return mean + ou.sigma * np.sqrt(var) * np.asarray(z)


def bridge_nodes(
    x0: Any,
    x1: Any,
    dt: float,
    times: Any,
    ou: OuParams,
    z: Any,
) -> np.ndarray:
    """Joint draw of the OU bridge from ``x0`` to ``x1`` at the offsets ``times``.

    ``times`` is increasing inside ``(0, dt)``. ``z`` holds standard normal draws
    with one more entry along its last axis than ``times``; leading axes
    broadcast against ``x0`` and ``x1``. A free path is drawn in the
    ``X e^{theta (t - dt)}`` frame, where it has independent increments, and is
    then pinned to ``x1`` by Gaussian conditioning.
    """

    offsets = np.asarray(times, dtype=float)
    theta = ou.theta
    start = np.asarray(x0, dtype=float)[..., None]
    end = np.asarray(x1, dtype=float)[..., None]
    if offsets.size == 0:
        return np.empty(np.broadcast(start, end).shape[:-1] + (0,))

    knots = np.append(offsets, dt)
    scale = np.exp(theta * (knots - dt))
    previous = np.exp(2.0 * theta * (np.concatenate(([0.0], knots[:-1])) - dt))
    increments = ou.sigma * np.sqrt(np.maximum(scale**2 - previous, 0.0)) * np.asarray(z)
    free = (start * math.exp(-theta * dt) + np.cumsum(increments, axis=-1)) / scale

    pin = np.exp(-theta * (dt - offsets)) * -np.expm1(-2.0 * theta * offsets)
    pin = pin / -math.expm1(-2.0 * theta * dt)
    return free[..., :-1] + pin * (end - free[..., -1:])


def _chord_cross_before(
    u0: float, u1: float, b: float, theta: float, dt: float, t: np.ndarray
) -> np.ndarray:
    # sigma units, 0 < t < dt, u0 < b
    mean, var = _bridge_moments(u0, u1, dt, t, theta)
    sd = np.sqrt(var)
    slope = (b - u0) / np.sinh(theta * t)
    z = (b - mean) / sd
    log_tail = slope * (mean - b) + 0.5 * slope**2 * var + special.log_ndtr(z - slope * sd)
    return np.clip(special.ndtr(-z) + np.exp(log_tail), 0.0, 1.0)


def chord_cross_before(
    x0: float,
    x1: float,
    dt: float,
    barrier: float,
    ou: OuParams,
    t: Any,
) -> np.ndarray:
    """Probability that a single-chord bridge has crossed the barrier by ``t``.

    The chord survival of ``[0, t]`` is integrated in closed form against the
    Gaussian bridge marginal at ``t``. At ``t = dt`` this equals
    :func:`chord_crossing_probabilities`.
    """

    times = np.asarray(t, dtype=float)
    if x0 >= barrier:
        return np.where(times > 0, 1.0, 0.0)
    total = float(chord_crossing_probabilities(x0, x1, dt, barrier, ou))
    out = np.where(times >= dt, total, 0.0)
    if ou.sigma == 0:
        return out
    inside = (times > 0) & (times < dt)
    if np.any(inside):
        s = ou.sigma
        out[inside] = np.minimum(
            _chord_cross_before(x0 / s, x1 / s, barrier / s, ou.theta, dt, times[inside]),
            total,
        )
    return out


def _invert_cdf(
    cdf: Callable[[np.ndarray], np.ndarray], dt: float, u: float, resolution: float
) -> float:
    lo, hi = 0.0, dt
    tolerance = dt * resolution
    while hi - lo > tolerance:
        grid = np.linspace(lo, hi, _SEARCH_NODES + 1)[1:]
        values = np.maximum.accumulate(cdf(grid))
        k = min(int(np.searchsorted(values, u)), _SEARCH_NODES - 1)
        lo, hi = (float(grid[k - 1]) if k > 0 else lo), float(grid[k])
    return hi


def sample_chord_crossing_time(
    q: BridgeQuery,
    ou: OuParams,
    u: float,
    *,
    resolution: float = DEFAULT_RESOLUTION,
) -> float:
    """Crossing time within a single-chord interval, given that it crosses.

    Inverse-transform sampling of :func:`chord_cross_before` on nested grids,
    down to ``resolution * dt``.
    """

    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")
    if ou.sigma == 0:
        if q.x0 < q.barrier and q.x1 < q.barrier:
            raise ZeroCrossingProbabilityError("Noiseless interval never crosses the barrier")
        return q.dt
    if q.x0 >= q.barrier:
        return q.dt * resolution
    total = float(chord_crossing_probabilities(q.x0, q.x1, q.dt, q.barrier, ou))
    if total <= 0.0:
        raise ZeroCrossingProbabilityError(
            f"Zero crossing probability for barrier {q.barrier} over dt={q.dt}"
        )
    return _invert_cdf(
        lambda grid: chord_cross_before(q.x0, q.x1, q.dt, q.barrier, ou, grid) / total,
        q.dt,
        u,
        resolution,
    )


def cross_before(
    q: BridgeQuery,
    ou: OuParams,
    t: float,
    *,
    max_sub_theta_dt: float = DEFAULT_MAX_SUB_THETA_DT,
) -> float:
    """Probability that the bridge of ``q`` has crossed the barrier by time ``t``.

    Uses the same refinement depth as :func:`crossing_probability`, so the
    value at ``t = dt`` is the crossing probability itself.
    """

    if t <= 0:
        return 0.0
    if t >= q.dt:
        return crossing_probability(q, ou, max_sub_theta_dt=max_sub_theta_dt)
    if q.x0 >= q.barrier:
        return 1.0
    if ou.sigma == 0:
        return 0.0

    theta = ou.theta
    u0 = q.x0 / ou.sigma
    u1 = q.x1 / ou.sigma
    b = q.barrier / ou.sigma
    if theta * t <= max_sub_theta_dt:
        return float(_chord_cross_before(u0, u1, b, theta, q.dt, np.asarray(t)))

    mean, var = _bridge_moments(u0, u1, q.dt, t, theta)
    sd = math.sqrt(var)
    mean = float(mean)
    lo = mean - _GRID_MARGIN * sd
    hi = min(b, mean + _GRID_MARGIN * sd)
    if hi <= lo:
        return 1.0

    m, w = _gauss_grid(lo, hi, _MARGINAL_NODES)
    density = np.exp(-0.5 * ((m - mean) / sd) ** 2) / (_SQRT_2PI * sd)
    survive = _no_cross(
        np.full_like(m, u0),
        m,
        b,
        theta * t,
        max_sub_theta_dt=max_sub_theta_dt,
    )
    no_cross = float(np.sum(w * density * survive))
    return min(max(1.0 - no_cross, 0.0), 1.0)


def sample_crossing_time(
    q: BridgeQuery,
    ou: OuParams,
    u: float,
    *,
    resolution: float = DEFAULT_RESOLUTION,
    max_sub_theta_dt: float = DEFAULT_MAX_SUB_THETA_DT,
) -> float:
    """Sample the first-passage time within ``(0, dt]`` given that a crossing occurs.

    Inverse-transform sampling of ``F(t) = P(cross by t) / P(cross by dt)`` down
    to ``resolution * dt``. Intervals short enough for a single chord go through
    :func:`sample_chord_crossing_time`; longer ones are bisected.
    """

    if ou.theta * q.dt <= max_sub_theta_dt or ou.sigma == 0 or q.x0 >= q.barrier:
        return sample_chord_crossing_time(q, ou, u, resolution=resolution)
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in (0, 1), got {u}")

    total = crossing_probability(q, ou, max_sub_theta_dt=max_sub_theta_dt)
    if total <= 0.0:
        raise ZeroCrossingProbabilityError(
            f"Zero crossing probability for barrier {q.barrier} over dt={q.dt}"
        )

    lo, hi = 0.0, q.dt
    tolerance = q.dt * resolution
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        if cross_before(q, ou, mid, max_sub_theta_dt=max_sub_theta_dt) / total < u:
            lo = mid
        else:
            hi = mid
    return hi


@dataclass(frozen=True)
class OracleResult:
    fraction: float
    crossing_times: np.ndarray
    n_paths: int
    substeps: int


def oracle_fine_step(
    ou: OuParams,
    x0: float,
    dt: float,
    barrier: float,
    substeps: int,
    n_paths: int,
    seed: int,
    *,
    x1: float | None = None,
    method: str = "euler",
    bridge_correction: bool = False,
    batch_size: int = 2000,
) -> OracleResult:
    """Brute-force crossing statistics from finely stepped OU paths.

    ``method`` is ``"euler"`` (Euler-Maruyama) or ``"exact"`` (AR(1) transition).
    With ``x1`` the paths are pinned to the endpoint by Gaussian conditioning, so
    the result estimates the bridge crossing probability. ``bridge_correction``
    also counts crossings between substeps with a per-substep Bernoulli trial.
    """

    if substeps < 100:
        raise ValueError(f"substeps must be at least 100, got {substeps}")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if method not in {"euler", "exact"}:
        raise ValueError(f"Unknown oracle method: {method!r}")
    ensure_positive({"dt": dt}, "oracle_fine_step")

    theta = ou.theta
    h = dt / substeps
    if method == "euler":
        decay = 1.0 - theta * h
        kick = ou.sigma * math.sqrt(2.0 * theta * h)
    else:
        decay = math.exp(-theta * h)
        kick = ou.sigma * math.sqrt(-math.expm1(-2.0 * theta * h))

    times = h * np.arange(1, substeps + 1)
    if x1 is not None:
        pin = (
            np.exp(-theta * (dt - times))
            * -np.expm1(-2.0 * theta * times)
            / -math.expm1(-2.0 * theta * dt)
        )
    sinh_h = math.sinh(theta * h)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    crossing_times: list[np.ndarray] = []
    n_crossed = 0
    done = 0
    while done < n_paths:
        n = min(batch_size, n_paths - done)
        paths = np.empty((n, substeps + 1))
        paths[:, 0] = x0
        kicks = kick * rng.standard_normal((n, substeps))
        for k in range(substeps):
            paths[:, k + 1] = decay * paths[:, k] + kicks[:, k]
        if x1 is not None:
            paths[:, 1:] += pin[None, :] * (x1 - paths[:, -1])[:, None]

        hits = paths[:, 1:] >= barrier
        if bridge_correction and ou.sigma > 0:
            left = np.maximum(barrier - paths[:, :-1], 0.0)
            right = np.maximum(barrier - paths[:, 1:], 0.0)
            p_between = np.exp(-left * right / (ou.sigma**2 * sinh_h))
            hits |= rng.random((n, substeps)) < p_between

        crossed = hits.any(axis=1)
        first = np.argmax(hits, axis=1)
        n_crossed += int(crossed.sum())
        crossing_times.append(times[first[crossed]])
        done += n

    result = OracleResult(
        fraction=n_crossed / n_paths,
        crossing_times=np.concatenate(crossing_times) if crossing_times else np.empty(0),
        n_paths=n_paths,
        substeps=substeps,
    )
    logger.debug(
        "Fine-step oracle finished",
        extra={"fraction": result.fraction, "n_paths": n_paths, "substeps": substeps},
    )
    return result


def simulate_ou(
    ou: OuParams,
    T_s: float,
    n: int,
    rng: np.random.Generator,
    x0: float | None = None,
) -> np.ndarray:
    """``n`` exact samples of the OU process at spacing ``T_s``.

    The first sample is ``x0``, drawn from the stationary law when omitted.
    """

    ensure_positive({"T_s": T_s}, "simulate_ou")
    if n <= 0:
        return np.empty(0)
    a = math.exp(-ou.theta * T_s)
    start = ou.sigma * rng.standard_normal() if x0 is None else float(x0)
    drive = ou.sigma * math.sqrt(-math.expm1(-2.0 * ou.theta * T_s)) * rng.standard_normal(n)
    drive[0] = start
    return signal.lfilter([1.0], [1.0, -a], drive)


__all__ = [
    "BridgeQuery",
    "DEFAULT_MAX_SUB_THETA_DT",
    "DEFAULT_RESOLUTION",
    "MAX_REFINE_DEPTH",
    "OracleResult",
    "OuParams",
    "ZeroCrossingProbabilityError",
    "bridge_nodes",
    "bridge_sample",
    "chord_cross_before",
    "chord_crossing_probabilities",
    "cross_before",
    "crossing_probabilities",
    "crossing_probability",
    "oracle_fine_step",
    "sample_chord_crossing_time",
    "sample_crossing_time",
    "simulate_ou",
    "subinterval_count",
]
