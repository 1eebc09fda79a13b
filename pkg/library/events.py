"""Change-detection comparator producing ON/OFF events.

``v_diff = a_diff * (v_sf - v_ref - noise_ref)`` is compared with ``+theta_on`` and
``-theta_off``. Two detection modes are available:

* ``naive``: thresholds are checked on the sampled ``v_sf`` at each timestep end.
* ``fpt``: the noise between two timesteps is treated as an OU bridge, drawn at
  the boundaries of short sub-intervals. On each sub-interval the probability
  that the bridge touched either threshold is evaluated in closed form and a
  Bernoulli trial per polarity decides whether an event fired; its time is
  sampled from the conditional first-passage distribution and the remainder of
  the interval is processed again.

After an event the comparison point is the signal plus the noise at the
crossing. ``v_ref`` reports the signal part unless ``reset_includes_noise`` is
set; the noise part is kept in ``noise_ref``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Any, Iterable, List, Sequence

import numpy as np

from .circuit import PixelParams
from .fpt import (
    DEFAULT_MAX_SUB_THETA_DT,
    DEFAULT_RESOLUTION,
    BridgeQuery,
    OuParams,
    bridge_nodes,
    bridge_sample,
    chord_crossing_probabilities,
    sample_chord_crossing_time,
    subinterval_count,
)
from .validators import ensure_non_negative, ensure_positive

logger = logging.getLogger(__name__)

COMPARATOR_MODES = ("naive", "fpt")
DEFAULT_A_DIFF = 20.0
DEFAULT_MAX_DEPTH = 16

_TINY_UNIFORM = 1e-12
_MIN_WINDOW = 16


class Polarity(enum.IntEnum):
    ON = 1
    OFF = -1


@dataclass(frozen=True)
class EventRecord:
    t: float
    polarity: Polarity


@dataclass
class ComparatorState:
    theta_on: float
    theta_off: float
    a_diff: float = DEFAULT_A_DIFF
    refractory: float = 0.0
    mode: str = "naive"
    v_ref: float = 0.0
    theta_offset: float = 0.0
    reset_includes_noise: bool = False
    noise_ref: float = 0.0
    max_depth: int = DEFAULT_MAX_DEPTH
    max_sub_theta_dt: float = DEFAULT_MAX_SUB_THETA_DT
    resolution: float = DEFAULT_RESOLUTION
    last_event_t: float = -math.inf
    saturation_count: int = 0

    def __post_init__(self) -> None:
        ensure_positive(
            {"theta_on": self.theta_on, "theta_off": self.theta_off, "a_diff": self.a_diff},
            "comparator",
        )
        ensure_non_negative({"refractory": self.refractory}, "comparator")
        if self.mode not in COMPARATOR_MODES:
            raise ValueError(f"Unknown comparator mode: {self.mode!r}")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        ensure_positive(
            {"theta_on + offset": self.on_threshold, "theta_off + offset": self.off_threshold},
            "comparator",
        )

    @property
    def on_threshold(self) -> float:
        return self.theta_on + self.theta_offset

    @property
    def off_threshold(self) -> float:
        return self.theta_off + self.theta_offset

    @property
    def reference(self) -> float:
        return self.v_ref + self.noise_ref

    def v_diff(self, v_sf: float) -> float:
        return self.a_diff * (v_sf - self.reference)

    def reset(self, signal: float, noise: float, t: float | None = None) -> None:
        """Move the comparison point to ``signal + noise`` (and mark an event at ``t``)."""

        if self.reset_includes_noise:
            self.v_ref, self.noise_ref = signal + noise, 0.0
        else:
            self.v_ref, self.noise_ref = signal, noise
        if t is not None:
            self.last_event_t = t

    def in_refractory(self, t: float) -> bool:
        return t - self.last_event_t < self.refractory


def contrast_to_volts(
    contrast: float, params: PixelParams, a_diff: float = DEFAULT_A_DIFF
) -> float:
    """Threshold at ``v_diff`` equivalent to a log-intensity change of ``contrast`` e-folds."""

    return a_diff * params.kappa_sf * params.U_T / params.kappa_fb * contrast


def volts_to_contrast(theta: float, params: PixelParams, a_diff: float = DEFAULT_A_DIFF) -> float:
    return theta * params.kappa_fb / (a_diff * params.kappa_sf * params.U_T)


def check_naive(
    state: ComparatorState,
    v_sf_prev: float,
    v_sf_now: float,
    t_prev: float,
    t_now: float,
) -> List[EventRecord]:
    """Endpoint threshold check; ``floor(v_diff / theta)`` events on overshoot.

    With a refractory period at most one event is emitted per step.
    """

    if not t_now > t_prev:
        raise ValueError(f"t_now={t_now} must exceed t_prev={t_prev}")
    if state.in_refractory(t_now):
        return []

    v_diff = state.v_diff(v_sf_now)
    if v_diff >= state.on_threshold:
        polarity, threshold = Polarity.ON, state.on_threshold
    elif v_diff <= -state.off_threshold:
        polarity, threshold = Polarity.OFF, state.off_threshold
    else:
        return []

    count = 1 if state.refractory > 0 else max(int(abs(v_diff) // threshold), 1)
    state.v_ref = v_sf_now
    state.noise_ref = 0.0
    state.last_event_t = t_now
    return [EventRecord(t_now, polarity)] * count


def _barriers(state: ComparatorState, sign: float, means: Any) -> Any:
    threshold = state.on_threshold if sign > 0 else state.off_threshold
    return threshold / state.a_diff - sign * (means - state.reference)


def _piece_probabilities(
    state: ComparatorState,
    times: np.ndarray,
    means: np.ndarray,
    values: np.ndarray,
    noise: OuParams,
) -> tuple[np.ndarray, np.ndarray]:
    """ON and OFF crossing probabilities of every sub-interval between nodes.

    Both barriers move linearly with the signal; the noise endpoints are
    shifted so that the barrier becomes its mean over each sub-interval.
    """

    h = np.diff(times)
    probabilities = []
    for sign in (1.0, -1.0):
        b = _barriers(state, sign, means)
        x = sign * values
        if noise.sigma == 0:
            probabilities.append((x[1:] >= b[1:]).astype(float))
            continue
        tilt = 0.5 * np.diff(b)
        probabilities.append(
            chord_crossing_probabilities(
                x[:-1] + tilt, x[1:] - tilt, h, 0.5 * (b[:-1] + b[1:]), noise
            )
        )
    return probabilities[0], probabilities[1]


def _crossing_time(
    state: ComparatorState,
    polarity: Polarity,
    h: float,
    m0: float,
    m1: float,
    n0: float,
    n1: float,
    noise: OuParams,
    u: float,
) -> tuple[float, float]:
    """Sampled crossing offset within a sub-interval and the noise on the barrier there."""

    sign = 1.0 if polarity is Polarity.ON else -1.0
    b0 = float(_barriers(state, sign, m0))
    b1 = float(_barriers(state, sign, m1))
    tilt = 0.5 * (b1 - b0)
    query = BridgeQuery(sign * n0 + tilt, sign * n1 - tilt, h, 0.5 * (b0 + b1))
    t_star = sample_chord_crossing_time(
        query, noise, max(u, _TINY_UNIFORM), resolution=state.resolution
    )
    return t_star, sign * (b0 + (b1 - b0) * min(t_star / h, 1.0))


def _endpoint_polarity(state: ComparatorState, v_diff: float) -> Polarity | None:
    if v_diff >= state.on_threshold:
        return Polarity.ON
    if v_diff <= -state.off_threshold:
        return Polarity.OFF
    return None


def _endpoint_count(state: ComparatorState, polarity: Polarity, v_diff: float) -> int:
    if state.refractory > 0:
        return 1
    threshold = state.on_threshold if polarity is Polarity.ON else state.off_threshold
    return max(int(abs(v_diff) // threshold), 1)


def check_fpt(
    state: ComparatorState,
    v_sf_mean_prev: float,
    v_sf_mean_now: float,
    noise: OuParams,
    t_prev: float,
    t_now: float,
    rng: np.random.Generator,
    *,
    noise_prev: float = 0.0,
    noise_now: float = 0.0,
    bridge: Sequence[float] | None = None,
    draws: Any = None,
) -> List[EventRecord]:
    """Stochastic threshold check over ``(t_prev, t_now]``.

    ``v_sf_mean_*`` is the noise-free signal and ``noise_*`` the noise sample at
    each end. The interval is cut into :func:`~library.fpt.subinterval_count`
    equal sub-intervals; the noise bridge is drawn at their boundaries and one
    ON and one OFF Bernoulli trial is run per sub-interval. In the first
    sub-interval that fires, the earlier of the sampled crossing times wins, the
    comparator is reset there and the bridge is redrawn from the crossing to
    ``t_now``.

    ``bridge`` optionally supplies the interior node values and ``draws`` the
    ``(u_on, u_off)`` pairs, shape ``(n_sub, 2)`` or a single pair for every
    sub-interval; both apply to the first pass only.

    A crossing that lands on ``t_now`` with the endpoint beyond the threshold is
    handled like :func:`check_naive`: ``floor(v_diff / theta)`` events at
    ``t_now``. With ``sigma = 0`` the output is identical to :func:`check_naive`.
    """

    if not t_now > t_prev:
        raise ValueError(f"t_now={t_now} must exceed t_prev={t_prev}")

    span = t_now - t_prev
    n_sub = subinterval_count(span, noise, state.max_sub_theta_dt)
    grid = t_prev + span * np.arange(1, n_sub) / n_sub
    if bridge is not None and len(bridge) != n_sub - 1:
        raise ValueError(f"bridge must hold {n_sub - 1} interior values, got {len(bridge)}")

    def mean_at(t: Any) -> Any:
        return v_sf_mean_prev + (v_sf_mean_now - v_sf_mean_prev) * (t - t_prev) / span

    def v_diff_now() -> float:
        return state.a_diff * (v_sf_mean_now + noise_now - state.reference)

    events: List[EventRecord] = []
    t_a, n_a = t_prev, noise_prev

    if state.in_refractory(t_a):
        t_ready = state.last_event_t + state.refractory
        if t_ready > t_now:
            return events
        n_a = float(
            bridge_sample(n_a, noise_now, t_now - t_a, t_ready - t_a, noise, rng.standard_normal())
        )
        t_a = t_ready
        bridge = draws = None

    depth = 0
    while True:
        if t_now - t_a <= 0.0:
            v_diff = v_diff_now()
            polarity = _endpoint_polarity(state, v_diff)
            if polarity is None:
                break
            events.append(EventRecord(t_now, polarity))
            state.reset(v_sf_mean_now, noise_now, t_now)
        else:
            interior = grid[grid > t_a]
            if bridge is not None:
                inner = np.asarray(bridge, dtype=float)
            else:
                inner = bridge_nodes(
                    n_a,
                    noise_now,
                    t_now - t_a,
                    interior - t_a,
                    noise,
                    rng.standard_normal(interior.size + 1),
                )
            times = np.concatenate(([t_a], interior, [t_now]))
            values = np.concatenate(([n_a], inner, [noise_now]))
            means = mean_at(times)
            p_on, p_off = _piece_probabilities(state, times, means, values, noise)
            if draws is not None:
                u = np.broadcast_to(np.asarray(draws, dtype=float), (p_on.size, 2))
            else:
                u = rng.random((p_on.size, 2))
            bridge = draws = None

            fire_on = u[:, 0] < p_on
            fire_off = u[:, 1] < p_off
            fired = fire_on | fire_off
            if not fired.any():
                break

            j = int(np.argmax(fired))
            h = float(times[j + 1] - times[j])
            candidates = []
            for polarity, hit in ((Polarity.ON, fire_on[j]), (Polarity.OFF, fire_off[j])):
                if not hit:
                    continue
                t_star, n_star = _crossing_time(
                    state,
                    polarity,
                    h,
                    float(means[j]),
                    float(means[j + 1]),
                    float(values[j]),
                    float(values[j + 1]),
                    noise,
                    rng.random(),
                )
                candidates.append((t_star, n_star, polarity))
            # earlier crossing wins; the other trial is dropped for this sub-interval
            t_star, n_star, polarity = min(candidates, key=lambda item: item[0])

            v_diff = v_diff_now()
            last = j == p_on.size - 1
            if last and t_star >= h and _endpoint_polarity(state, v_diff) is polarity:
                count = _endpoint_count(state, polarity, v_diff)
                events.extend([EventRecord(t_now, polarity)] * count)
                state.reset(v_sf_mean_now, noise_now, t_now)
                t_a, n_a = t_now, noise_now
            else:
                t_event = min(float(times[j]) + t_star, t_now)
                events.append(EventRecord(t_event, polarity))
                state.reset(float(mean_at(t_event)), n_star, t_event)
                t_a, n_a = t_event, n_star

        depth += 1
        if depth >= state.max_depth:
            state.saturation_count += 1
            logger.warning(
                "Event recursion saturated",
                extra={"t": t_now, "depth": depth, "saturations": state.saturation_count},
            )
            break

        if state.refractory > 0:
            t_ready = state.last_event_t + state.refractory
            if t_ready > t_now:
                break
            if t_ready > t_a:
                n_a = float(
                    bridge_sample(
                        n_a, noise_now, t_now - t_a, t_ready - t_a, noise, rng.standard_normal()
                    )
                )
                t_a = t_ready
    return events


def detect_naive_trace(
    state: ComparatorState,
    v_sf: np.ndarray,
    t: np.ndarray,
    *,
    chunk: int = 65536,
) -> List[EventRecord]:
    """Run :func:`check_naive` over consecutive samples of a trace.

    Samples are screened a window at a time; the window restarts small after
    each event and doubles up to ``chunk`` while quiet.
    """

    values = np.asarray(v_sf, dtype=float)
    times = np.asarray(t, dtype=float)
    if values.shape != times.shape:
        raise ValueError("v_sf and t must have the same shape")

    events: List[EventRecord] = []
    i = 1
    n = values.size
    span = min(_MIN_WINDOW, chunk)
    while i < n:
        stop = min(i + span, n)
        v_diff = state.a_diff * (values[i:stop] - state.reference)
        hits = (v_diff >= state.on_threshold) | (v_diff <= -state.off_threshold)
        if state.refractory > 0:
            hits &= times[i:stop] - state.last_event_t >= state.refractory
        if not hits.any():
            i = stop
            span = min(2 * span, chunk)
            continue
        span = min(_MIN_WINDOW, chunk)
        j = i + int(np.argmax(hits))
        events.extend(check_naive(state, values[j - 1], values[j], times[j - 1], times[j]))
        i = j + 1
    return events


def detect_fpt_trace(
    state: ComparatorState,
    v_sf_mean: float,
    noise_trace: np.ndarray,
    t: np.ndarray,
    noise: OuParams,
    rng: np.random.Generator,
    *,
    window: int = 256,
) -> List[EventRecord]:
    """Run :func:`check_fpt` over a uniformly sampled noise trace at constant signal.

    Bridges and Bernoulli trials are drawn a window at a time; the first step
    that fires is handed to :func:`check_fpt` with the same bridge and draws.
    The window restarts small after each event and doubles up to ``window``
    while quiet.
    """

    values = np.asarray(noise_trace, dtype=float)
    times = np.asarray(t, dtype=float)
    if values.shape != times.shape:
        raise ValueError("noise_trace and t must have the same shape")
    if values.size < 2:
        return []
    steps = np.diff(times)
    dt = float(steps[0])
    if not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
        raise ValueError("detect_fpt_trace requires a uniformly sampled trace")

    n_sub = subinterval_count(dt, noise, state.max_sub_theta_dt)
    offsets = dt * np.arange(1, n_sub) / n_sub
    events: List[EventRecord] = []

    def scalar_step(k: int, bridge: Any = None, draws: Any = None) -> None:
        events.extend(
            check_fpt(
                state,
                v_sf_mean,
                v_sf_mean,
                noise,
                times[k - 1],
                times[k],
                rng,
                noise_prev=values[k - 1],
                noise_now=values[k],
                bridge=bridge,
                draws=draws,
            )
        )

    i = 1
    n = values.size
    span = min(_MIN_WINDOW, window)
    while i < n:
        if state.in_refractory(times[i - 1]):
            scalar_step(i)
            i += 1
            continue

        stop = min(i + span, n)
        n0 = values[i - 1 : stop - 1]
        n1 = values[i:stop]
        inner = bridge_nodes(n0, n1, dt, offsets, noise, rng.standard_normal((stop - i, n_sub)))
        nodes = np.concatenate((n0[:, None], inner, n1[:, None]), axis=1)
        on_gap = float(_barriers(state, 1.0, v_sf_mean))
        off_gap = float(_barriers(state, -1.0, v_sf_mean))
        h = dt / n_sub
        if noise.sigma == 0:
            p_on = (nodes[:, 1:] >= on_gap).astype(float)
            p_off = (-nodes[:, 1:] >= off_gap).astype(float)
        else:
            p_on = chord_crossing_probabilities(nodes[:, :-1], nodes[:, 1:], h, on_gap, noise)
            p_off = chord_crossing_probabilities(-nodes[:, :-1], -nodes[:, 1:], h, off_gap, noise)
        draws = rng.random((stop - i, n_sub, 2))
        fired = ((draws[..., 0] < p_on) | (draws[..., 1] < p_off)).any(axis=1)
        if not fired.any():
            i = stop
            span = min(2 * span, window)
            continue
        span = min(_MIN_WINDOW, window)
        k = int(np.argmax(fired))
        scalar_step(i + k, bridge=inner[k], draws=draws[k])
        i = i + k + 1
    return events


def count_polarities(events: Iterable[EventRecord]) -> dict[str, int]:
    counts = {"on": 0, "off": 0}
    for event in events:
        counts["on" if event.polarity is Polarity.ON else "off"] += 1
    return counts


__all__ = [
    "COMPARATOR_MODES",
    "ComparatorState",
    "DEFAULT_A_DIFF",
    "EventRecord",
    "Polarity",
    "check_fpt",
    "check_naive",
    "contrast_to_volts",
    "count_polarities",
    "detect_fpt_trace",
    "detect_naive_trace",
    "volts_to_contrast",
]
