"""Bilinear discretisation of the pixel transfer functions and large-signal stepping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np
from scipy import signal

from .circuit import (
    PHOTOCURRENT_FLOOR,
    BiasPoint,
    OperatingPoint,
    PixelParams,
    TransferFunction,
    compute_operating_point,
    transfer_function,
    transimpedance_dc,
)
from .validators import ensure_positive

if TYPE_CHECKING:  # pragma: no cover
    from .noise import NoiseStreams

logger = logging.getLogger(__name__)

DEFAULT_REFRESH_THRESHOLD = 0.01


class UnstableFilterError(ValueError):
    """Raised when a continuous transfer function has a pole outside the left half-plane."""


class FilterState:
    """Direct-form I difference equation with explicit delay lines.

    Delay lines hold past inputs and outputs, most recent first. Because they
    do not depend on the coefficients, :meth:`retune` can swap coefficients
    without disturbing the output or its first difference.
    """

    __slots__ = ("T_s", "_b", "_a", "_x", "_y")

    def __init__(
        self,
        num: Sequence[float],
        den: Sequence[float],
        T_s: float,
        input_delay: Sequence[float] | None = None,
        output_delay: Sequence[float] | None = None,
    ) -> None:
        self.T_s = T_s
        self._set_coefficients(num, den)
        order = self.order
        self._x = list(input_delay) if input_delay is not None else [0.0] * order
        self._y = list(output_delay) if output_delay is not None else [0.0] * order
        if len(self._x) != order or len(self._y) != order:
            raise ValueError("Delay lines must match the filter order")

    def _set_coefficients(self, num: Sequence[float], den: Sequence[float]) -> None:
        a = [float(value) for value in den]
        b = [float(value) for value in num]
        if not a or a[0] == 0:
            raise ValueError("Leading denominator coefficient must be non-zero")
        if len(b) < len(a):
            b = [0.0] * (len(a) - len(b)) + b
        elif len(b) > len(a):
            raise ValueError("Improper filter: numerator order exceeds denominator order")
        scale = a[0]
        self._a = [value / scale for value in a]
        self._b = [value / scale for value in b]

    @property
    def order(self) -> int:
        return len(self._a) - 1

    @property
    def num_coeffs(self) -> np.ndarray:
        return np.array(self._b)

    @property
    def den_coeffs(self) -> np.ndarray:
        return np.array(self._a)

    @property
    def input_delay(self) -> np.ndarray:
        return np.array(self._x)

    @property
    def output_delay(self) -> np.ndarray:
        return np.array(self._y)

    @property
    def dc_gain(self) -> float:
        return sum(self._b) / sum(self._a)

    @property
    def output(self) -> float:
        return self._y[0] if self._y else 0.0

    def settle(self, x: float) -> None:
        """Fill the delay lines with the steady state for a constant input ``x``."""

        y = self.dc_gain * x
        self._x = [x] * self.order
        self._y = [y] * self.order

    def retune(self, num: Sequence[float], den: Sequence[float]) -> None:
        previous_order = self.order
        self._set_coefficients(num, den)
        if self.order != previous_order:
            raise ValueError("Retuning cannot change the filter order")

    def step(self, x: float) -> float:
        b, a, xs, ys = self._b, self._a, self._x, self._y
        y = b[0] * x
        for k in range(1, len(a)):
            y += b[k] * xs[k - 1] - a[k] * ys[k - 1]
        if xs:
            xs.insert(0, x)
            xs.pop()
            ys.insert(0, y)
            ys.pop()
        return y

    def process(self, x: np.ndarray) -> np.ndarray:
        """Filter a block; equivalent to calling :meth:`step` on every sample."""

        samples = np.asarray(x, dtype=float)
        if samples.size == 0:
            return samples.copy()
        if self.order == 0:
            return self._b[0] * samples
        zi = signal.lfiltic(self._b, self._a, self._y, self._x)
        y, _ = signal.lfilter(self._b, self._a, samples, zi=zi)
        order = self.order
        self._x = (list(samples[::-1][:order]) + self._x)[:order]
        self._y = (list(y[::-1][:order]) + self._y)[:order]
        return y

    def copy(self) -> "FilterState":
        return FilterState(self._b, self._a, self.T_s, self._x, self._y)

    def __repr__(self) -> str:
        return f"FilterState(order={self.order}, b={self._b}, a={self._a}, T_s={self.T_s})"


def ensure_stable(tf: TransferFunction) -> None:
    poles = tf.poles()
    if poles.size and np.any(poles.real >= 0):
        raise UnstableFilterError(f"Transfer function has unstable poles: {poles}")


def bilinear_coefficients(tf: TransferFunction, T_s: float) -> tuple[np.ndarray, np.ndarray]:
    ensure_positive({"T_s": T_s}, "bilinear")
    ensure_stable(tf)
    if len(tf.den) == 1 and len(tf.num) == 1:
        return np.array([tf.num[0] / tf.den[0]]), np.array([1.0])
    b, a = signal.bilinear(tf.num, tf.den, fs=1.0 / T_s)
    b = np.atleast_1d(b)
    a = np.atleast_1d(a)
    return b / a[0], a / a[0]


def bilinear(tf: TransferFunction, T_s: float) -> FilterState:
    """Discretise ``tf`` with ``s <- (2 / T_s) (z - 1) / (z + 1)``."""

    b, a = bilinear_coefficients(tf, T_s)
    return FilterState(b, a, T_s)


@dataclass
class PixelSimState:
    params: PixelParams
    bias: BiasPoint
    T_s: float
    op_point: OperatingPoint
    zm_filter: FilterState
    asf_filter: FilterState
    w: float
    i_pd: float
    i_op: float
    v_pr: float = 0.0
    v_sf: float = 0.0
    t: float = 0.0
    refresh_threshold: float = DEFAULT_REFRESH_THRESHOLD
    floor: float = PHOTOCURRENT_FLOOR
    refreshed: bool = False
    n_refreshes: int = 0
    noise: "NoiseStreams | None" = field(default=None, repr=False)

    @property
    def signal_filters(self) -> tuple[FilterState, FilterState]:
        return (self.zm_filter, self.asf_filter)


def init_pixel_state(
    params: PixelParams,
    bias: BiasPoint,
    T_s: float,
    i_pd: float,
    *,
    t0: float = 0.0,
    refresh_threshold: float = DEFAULT_REFRESH_THRESHOLD,
    floor: float = PHOTOCURRENT_FLOOR,
) -> PixelSimState:
    """Settled state at photocurrent ``i_pd``; node voltages are relative to it."""

    ensure_positive({"T_s": T_s}, "init_pixel_state")
    i0 = max(i_pd, floor)
    op_point = compute_operating_point(params, bias.with_photocurrent(i0))
    zm_filter = bilinear(transfer_function(op_point, "Zm_norm"), T_s)
    asf_filter = bilinear(transfer_function(op_point, "Asf"), T_s)
    zm_filter.settle(0.0)
    asf_filter.settle(0.0)
    return PixelSimState(
        params=params,
        bias=bias,
        T_s=T_s,
        op_point=op_point,
        zm_filter=zm_filter,
        asf_filter=asf_filter,
        w=0.0,
        i_pd=i0,
        i_op=i0,
        t=t0,
        refresh_threshold=refresh_threshold,
        floor=floor,
    )


def relinearize(state: PixelSimState, i_op: float) -> None:
    """Recompute the operating point at ``i_op`` and retune the signal filters."""

    op_point = compute_operating_point(state.params, state.bias.with_photocurrent(i_op))
    zm_b, zm_a = bilinear_coefficients(transfer_function(op_point, "Zm_norm"), state.T_s)
    asf_b, asf_a = bilinear_coefficients(transfer_function(op_point, "Asf"), state.T_s)
    state.zm_filter.retune(zm_b, zm_a)
    state.asf_filter.retune(asf_b, asf_a)
    state.op_point = op_point
    state.i_op = i_op
    state.n_refreshes += 1


def step_signal(
    state: PixelSimState,
    i_pd: float,
    params: PixelParams | None = None,
    bias: BiasPoint | None = None,
) -> PixelSimState:
    """Advance the large-signal state by one timestep.

    The DC target ``w`` accumulates ``Zm_dc(I_L) * dI`` with ``I_L`` the
    logarithmic mean of the previous and current photocurrent, which integrates
    the logarithmic law exactly. Filter coefficients are refreshed at the
    geometric mean when the photocurrent has drifted by more than
    ``refresh_threshold`` from the last operating point.
    """

    if params is not None and params is not state.params:
        state.params = params
    if bias is not None and bias is not state.bias:
        state.bias = bias
    i_now = max(i_pd, state.floor)
    i_prev = state.i_pd

    if i_now != i_prev:
        log_mean = (i_now - i_prev) / math.log(i_now / i_prev)
        state.w += transimpedance_dc(state.params, state.bias, log_mean) * (i_now - i_prev)

    state.refreshed = False
    if abs(i_now - state.i_op) > state.refresh_threshold * state.i_op:
        relinearize(state, math.sqrt(i_prev * i_now))
        state.refreshed = True

    state.i_pd = i_now
    state.v_pr = state.zm_filter.step(state.w)
    state.v_sf = state.asf_filter.step(state.v_pr)
    state.t += state.T_s
    return state


def frequency_response(filt: FilterState, f: Any) -> np.ndarray:
    """``H(e^{j 2 pi f T_s})`` of a discretised filter."""

    freqs = np.atleast_1d(np.asarray(f, dtype=float))
    _, response = signal.freqz(filt.num_coeffs, filt.den_coeffs, worN=freqs, fs=1.0 / filt.T_s)
    return response


__all__ = [
    "DEFAULT_REFRESH_THRESHOLD",
    "FilterState",
    "PixelSimState",
    "UnstableFilterError",
    "bilinear",
    "bilinear_coefficients",
    "ensure_stable",
    "frequency_response",
    "init_pixel_state",
    "relinearize",
    "step_signal",
]
