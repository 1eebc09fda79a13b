"""Shot-noise synthesis through the pixel transfer paths and Welch PSD estimation.

Each shot-noise source ``I_pd``, ``I_pr`` and ``I_sf`` drives white Gaussian
current samples of variance ``2 q I / T_s`` through its own discretised path:

* ``I_pd``: ``Zm`` to ``v_pr``, then ``Asf`` to ``v_sf``
* ``I_pr``: ``Zout`` to ``v_pr``, then ``Asf`` to ``v_sf``
* ``I_sf``: ``ZoutSf`` straight to ``v_sf``

so that the one-sided PSD of the filtered output is ``4 q I |H|^2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy import signal

from .circuit import NOISE_SOURCES, BiasPoint, OperatingPoint, transfer_function
from .discretize import FilterState, bilinear_coefficients
from .validators import ensure_positive

logger = logging.getLogger(__name__)

# Transfer functions applied in sequence; the first stage lands on v_pr unless
# the path has a single stage.
SOURCE_PATHS: Dict[str, tuple[str, ...]] = {
    "I_pd": ("Zm", "Asf"),
    "I_pr": ("Zout", "Asf"),
    "I_sf": ("ZoutSf",),
}

_DRAW_CHUNK = 4096


def white_noise_scale(q_e: float, current: float, T_s: float) -> float:
    """Standard deviation of a white current-noise sample: ``sqrt(2 q I / T_s)``."""

    return math.sqrt(2.0 * q_e * max(current, 0.0) / T_s)


def source_generator(seed: int, pixel: int, source_index: int) -> np.random.Generator:
    """Counter-based stream for one (pixel, source) pair."""

    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), int(pixel), int(source_index)]))
    )


class _BufferedNormals:
    """Standard normals drawn from ``rng`` in chunks.

    Single draws and block draws consume the same sequence, so per-sample and
    block synthesis can be interleaved without changing the realisation.
    """

    __slots__ = ("rng", "_buffer", "_pos")

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self._buffer = np.empty(0)
        self._pos = 0

    def one(self) -> float:
        if self._pos >= self._buffer.size:
            self._buffer = self.rng.standard_normal(_DRAW_CHUNK)
            self._pos = 0
        value = self._buffer[self._pos]
        self._pos += 1
        return float(value)

    def many(self, n: int) -> np.ndarray:
        out = np.empty(n)
        filled = 0
        while filled < n:
            if self._pos >= self._buffer.size:
                self._buffer = self.rng.standard_normal(max(_DRAW_CHUNK, n - filled))
                self._pos = 0
            take = min(n - filled, self._buffer.size - self._pos)
            out[filled : filled + take] = self._buffer[self._pos : self._pos + take]
            self._pos += take
            filled += take
        return out


@dataclass
class NoiseStreamState:
    source: str
    stream_id: tuple[int, int, int]
    filters: List[FilterState]
    scale: float
    normals: _BufferedNormals = field(repr=False)

    @property
    def filter(self) -> FilterState:
        return self.filters[0]

    @property
    def reaches_pr(self) -> bool:
        return len(self.filters) > 1


@dataclass(frozen=True)
class NoiseBlock:
    n_pr: np.ndarray
    n_sf: np.ndarray
    per_source: Dict[str, np.ndarray]


def _path_coefficients(
    op_point: OperatingPoint, source: str, T_s: float
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [
        bilinear_coefficients(transfer_function(op_point, which), T_s)
        for which in SOURCE_PATHS[source]
    ]


def _source_current(bias: BiasPoint, source: str) -> float:
    return float(getattr(bias, source))


class NoiseStreams:
    """Per-pixel set of the three noise streams."""

    def __init__(
        self,
        op_point: OperatingPoint,
        bias: BiasPoint,
        T_s: float,
        *,
        seed: int = 0,
        pixel: int = 0,
    ) -> None:
        ensure_positive({"T_s": T_s}, "noise streams")
        self.T_s = T_s
        self.op_point = op_point
        self.bias = bias
        self.streams: Dict[str, NoiseStreamState] = {}
        for index, source in enumerate(NOISE_SOURCES):
            filters = [
                FilterState(b, a, T_s) for b, a in _path_coefficients(op_point, source, T_s)
            ]
            self.streams[source] = NoiseStreamState(
                source=source,
                stream_id=(seed, pixel, index),
                filters=filters,
                scale=white_noise_scale(op_point.q_e, _source_current(bias, source), T_s),
                normals=_BufferedNormals(source_generator(seed, pixel, index)),
            )

    def retune(self, op_point: OperatingPoint, bias: BiasPoint) -> None:
        """Move every path to a new operating point keeping its delay lines."""

        for source, stream in self.streams.items():
            for filt, (b, a) in zip(stream.filters, _path_coefficients(op_point, source, self.T_s)):
                filt.retune(b, a)
            stream.scale = white_noise_scale(op_point.q_e, _source_current(bias, source), self.T_s)
        self.op_point = op_point
        self.bias = bias

    def sample(self) -> tuple[float, float]:
        n_pr = 0.0
        n_sf = 0.0
        for stream in self.streams.values():
            x = stream.scale * stream.normals.one()
            filters = stream.filters
            y = filters[0].step(x)
            if len(filters) > 1:
                n_pr += y
                y = filters[1].step(y)
            n_sf += y
        return n_pr, n_sf

    def block(self, n: int) -> NoiseBlock:
        if n < 0:
            raise ValueError("Block length must be non-negative")
        n_pr = np.zeros(n)
        n_sf = np.zeros(n)
        per_source: Dict[str, np.ndarray] = {}
        for source, stream in self.streams.items():
            x = stream.scale * stream.normals.many(n)
            y = stream.filters[0].process(x)
            if stream.reaches_pr:
                n_pr += y
                y = stream.filters[1].process(y)
            n_sf += y
            per_source[source] = y
        return NoiseBlock(n_pr=n_pr, n_sf=n_sf, per_source=per_source)


def make_noise_streams(
    op_point: OperatingPoint,
    bias: BiasPoint,
    T_s: float,
    *,
    seed: int = 0,
    pixel: int = 0,
) -> NoiseStreams:
    return NoiseStreams(op_point, bias, T_s, seed=seed, pixel=pixel)


def synth_noise_sample(streams: NoiseStreams, T_s: float | None = None) -> tuple[float, float]:
    """One ``(n_pr, n_sf)`` sample in volt."""

    if T_s is not None and not math.isclose(T_s, streams.T_s):
        raise ValueError(f"Streams were built for T_s={streams.T_s}, got {T_s}")
    return streams.sample()


def synth_noise_block(streams: NoiseStreams, n: int) -> NoiseBlock:
    """``n`` consecutive samples; equivalent to ``n`` calls of :func:`synth_noise_sample`."""

    return streams.block(n)


@dataclass(frozen=True)
class PsdEstimate:
    f: np.ndarray
    psd: np.ndarray
    n_segments: int


def welch_psd(
    samples: np.ndarray,
    T_s: float,
    segment_len: int,
    overlap: float = 0.5,
) -> PsdEstimate:
    """Hann-windowed averaged periodogram, one-sided, in units^2/Hz."""

    x = np.asarray(samples, dtype=float)
    ensure_positive({"T_s": T_s}, "welch_psd")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if segment_len < 2:
        raise ValueError(f"segment_len must be at least 2, got {segment_len}")
    if x.ndim != 1 or x.size < segment_len:
        raise ValueError(
            f"Need at least segment_len={segment_len} samples, got {x.size}"
        )
    noverlap = int(overlap * segment_len)
    f, psd = signal.welch(
        x,
        fs=1.0 / T_s,
        window="hann",
        nperseg=segment_len,
        noverlap=noverlap,
        detrend=False,
        return_onesided=True,
        scaling="density",
    )
    step = segment_len - noverlap
    n_segments = 1 + (x.size - segment_len) // step
    return PsdEstimate(f=f, psd=psd, n_segments=n_segments)


__all__ = [
    "NoiseBlock",
    "NoiseStreamState",
    "NoiseStreams",
    "PsdEstimate",
    "SOURCE_PATHS",
    "make_noise_streams",
    "source_generator",
    "synth_noise_block",
    "synth_noise_sample",
    "welch_psd",
    "white_noise_scale",
]
