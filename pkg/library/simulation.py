"""Per-timestep single-pixel engine and waveform generation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .circuit import BiasPoint, NoiseModel, PixelParams, build_noise_model
from .config import IoConfig, SimConfig, WaveformConfig
from .discretize import PixelSimState, init_pixel_state, step_signal
from .events import ComparatorState, EventRecord, check_fpt, check_naive
from .fpt import OuParams
from .io import read_waveform_csv
from .noise import NoiseStreams, make_noise_streams, source_generator

logger = logging.getLogger(__name__)

COMPARATOR_STREAM = 3
MAX_WARMUP_SAMPLES = 200_000


@dataclass(frozen=True)
class Waveform:
    t: np.ndarray
    i_pd: np.ndarray

    @property
    def T_s(self) -> float:
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])


def time_grid(T_s: float, duration: float) -> np.ndarray:
    if not duration > 0:
        raise ValueError(f"Waveform duration must be positive, got {duration}")
    if not T_s > 0:
        raise ValueError(f"T_s must be positive, got {T_s}")
    n_steps = int(round(duration / T_s))
    if n_steps < 1:
        raise ValueError(f"Duration {duration} is shorter than one timestep {T_s}")
    return T_s * np.arange(n_steps + 1)


def resample_zoh(t_src: np.ndarray, values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Zero-order hold of ``values`` sampled at ``t_src`` onto ``t``."""

    index = np.searchsorted(t_src, t, side="right") - 1
    return values[np.clip(index, 0, len(values) - 1)]


def make_waveform(
    shape: WaveformConfig,
    T_s: float,
    duration: float,
    io_cfg: IoConfig | None = None,
) -> Waveform:
    """Photocurrent waveform sampled every ``T_s``.

    ``sine`` modulates the log intensity: ``I = I_low * exp(depth * sin(2 pi f t))``.
    """

    t = time_grid(T_s, duration)
    if shape.kind == "constant":
        i_pd = np.full_like(t, shape.I_low)
    elif shape.kind == "step":
        i_pd = np.where(t >= shape.t_start, shape.I_high, shape.I_low)
    elif shape.kind == "pulse":
        inside = (t >= shape.t_start) & (t < shape.t_start + shape.width)
        i_pd = np.where(inside, shape.I_high, shape.I_low)
    elif shape.kind == "sine":
        i_pd = shape.I_low * np.exp(shape.depth * np.sin(2.0 * math.pi * shape.frequency * t))
    elif shape.kind == "csv":
        if shape.path is None:
            raise ValueError("csv waveform requires a path")
        t_src, i_src = read_waveform_csv(shape.path, io_cfg)
        i_pd = resample_zoh(t_src - t_src[0], i_src, t)
    else:
        raise ValueError(f"Unknown waveform kind: {shape.kind!r}")
    return Waveform(t=t, i_pd=np.asarray(i_pd, dtype=float))


def make_comparator(config: SimConfig, **overrides: object) -> ComparatorState:
    cmp_cfg = config.comparator
    options = dict(
        theta_on=cmp_cfg.theta_on,
        theta_off=cmp_cfg.theta_off,
        a_diff=cmp_cfg.a_diff,
        refractory=cmp_cfg.refractory,
        mode=cmp_cfg.mode,
        theta_offset=cmp_cfg.theta_offset,
        reset_includes_noise=cmp_cfg.reset_includes_noise,
        max_depth=cmp_cfg.max_depth,
        max_sub_theta_dt=config.fpt.max_sub_theta_dt,
        resolution=config.fpt.resolution,
    )
    options.update(overrides)
    return ComparatorState(**options)


class PixelEngine:
    """Signal path, noise streams and comparator of one pixel.

    Each :meth:`step` advances all three by one timestep and returns the events
    generated in that interval.
    """

    def __init__(
        self,
        params: PixelParams,
        bias: BiasPoint,
        T_s: float,
        i_pd0: float,
        comparator: ComparatorState,
        *,
        noise: bool = True,
        seed: int = 0,
        pixel: int = 0,
        flicker_coeff: float | None = None,
        refresh_threshold: float = 0.01,
        floor: float = 1e-16,
        warmup: bool = True,
    ) -> None:
        self.params = params
        self.comparator = comparator
        self.noise_enabled = noise
        self.flicker_coeff = flicker_coeff
        self.state: PixelSimState = init_pixel_state(
            params, bias, T_s, i_pd0, refresh_threshold=refresh_threshold, floor=floor
        )
        self.rng = source_generator(seed, pixel, COMPARATOR_STREAM)
        self._clamp_warned = False
        self._noise_model: NoiseModel | None = None
        self.ou = self._ou_params()

        self.noise_streams: NoiseStreams | None = None
        self.n_pr = 0.0
        self.n_sf = 0.0
        if noise:
            self.noise_streams = make_noise_streams(
                self.state.op_point, self._bias_at_op(), T_s, seed=seed, pixel=pixel
            )
            self.state.noise = self.noise_streams
            if warmup:
                self._settle_noise()
        # comparator starts reset at the settled output
        comparator.reset(self.state.v_sf, self.n_sf)

    @property
    def T_s(self) -> float:
        return self.state.T_s

    @property
    def t(self) -> float:
        return self.state.t

    @property
    def noise_model(self) -> NoiseModel:
        if self._noise_model is None:
            self._noise_model = build_noise_model(
                self.params, self._bias_at_op(), flicker_coeff=self.flicker_coeff
            )
        return self._noise_model

    def _bias_at_op(self) -> BiasPoint:
        return self.state.bias.with_photocurrent(self.state.i_op)

    def _ou_params(self) -> OuParams:
        if self.comparator.mode == "fpt" and self.noise_enabled:
            return OuParams.from_noise_model(self.noise_model)
        # only the naive check or a noiseless bridge will see these
        f_c = 1.0 / (2.0 * math.pi * self.state.op_point.time_constants[0])
        return OuParams(sigma=0.0, f_c=f_c)

    def _settle_noise(self) -> None:
        assert self.noise_streams is not None
        tau = self.state.op_point.time_constants[0]
        n_warm = min(int(math.ceil(5.0 * tau / self.T_s)), MAX_WARMUP_SAMPLES)
        if n_warm > 0:
            block = self.noise_streams.block(n_warm)
            self.n_pr = float(block.n_pr[-1])
            self.n_sf = float(block.n_sf[-1])

    def _on_refresh(self) -> None:
        self._noise_model = None
        if self.noise_streams is not None:
            self.noise_streams.retune(self.state.op_point, self._bias_at_op())
        self.ou = self._ou_params()

    def step(self, i_pd: float) -> List[EventRecord]:
        state = self.state
        if i_pd < state.floor and not self._clamp_warned:
            logger.warning(
                "Photocurrent below floor; clamping", extra={"I_pd": i_pd, "floor": state.floor}
            )
            self._clamp_warned = True

        t_prev = state.t
        m_prev = state.v_sf
        n_prev = self.n_sf
        step_signal(state, i_pd)
        if state.refreshed:
            self._on_refresh()
        if self.noise_streams is not None:
            self.n_pr, self.n_sf = self.noise_streams.sample()

        if self.comparator.mode == "naive":
            return check_naive(
                self.comparator, m_prev + n_prev, state.v_sf + self.n_sf, t_prev, state.t
            )
        return check_fpt(
            self.comparator,
            m_prev,
            state.v_sf,
            self.ou,
            t_prev,
            state.t,
            self.rng,
            noise_prev=n_prev,
            noise_now=self.n_sf,
        )


@dataclass
class SimulationResult:
    t: np.ndarray
    i_pd: np.ndarray
    v_pr: np.ndarray
    v_sf: np.ndarray
    v_diff: np.ndarray
    n_sf: np.ndarray
    events: List[EventRecord]
    saturation_count: int
    refreshes: int
    sigma: float
    f_c: float
    ou_valid: bool
    pole_ratio: float
    runtime_s: float
    pixel: int = 0
    meta: dict = field(default_factory=dict)


def simulate_waveform(
    config: SimConfig,
    waveform: Waveform,
    *,
    pixel: int = 0,
    record_trace: bool = True,
) -> SimulationResult:
    """Run one pixel over ``waveform``; traces hold the value at every sample."""

    T_s = config.simulation.T_s
    if waveform.t.size < 2:
        raise ValueError("Waveform must contain at least two samples")

    started = time.perf_counter()
    engine = PixelEngine(
        config.pixel,
        config.bias,
        T_s,
        float(waveform.i_pd[0]),
        make_comparator(config),
        noise=config.simulation.noise,
        seed=config.simulation.seed,
        pixel=pixel,
        flicker_coeff=config.noise.flicker_coeff,
        refresh_threshold=config.simulation.refresh_threshold,
        floor=config.simulation.photocurrent_floor,
    )

    n = waveform.t.size
    v_pr = np.zeros(n) if record_trace else np.empty(0)
    v_sf = np.zeros(n) if record_trace else np.empty(0)
    v_diff = np.zeros(n) if record_trace else np.empty(0)
    n_sf = np.zeros(n) if record_trace else np.empty(0)
    if record_trace:
        v_pr[0] = engine.state.v_pr + engine.n_pr
        v_sf[0] = engine.state.v_sf + engine.n_sf
        v_diff[0] = engine.comparator.v_diff(v_sf[0])
        n_sf[0] = engine.n_sf

    events: List[EventRecord] = []
    for k in range(1, n):
        events.extend(engine.step(float(waveform.i_pd[k])))
        if record_trace:
            v_pr[k] = engine.state.v_pr + engine.n_pr
            v_sf[k] = engine.state.v_sf + engine.n_sf
            v_diff[k] = engine.comparator.v_diff(v_sf[k])
            n_sf[k] = engine.n_sf

    model = engine.noise_model
    runtime = time.perf_counter() - started
    if engine.comparator.saturation_count:
        logger.warning(
            "Event recursion saturated during run",
            extra={"pixel": pixel, "count": engine.comparator.saturation_count},
        )
    logger.info(
        "Pixel simulation finished",
        extra={"pixel": pixel, "events": len(events), "runtime_s": runtime},
    )
    return SimulationResult(
        t=waveform.t,
        i_pd=waveform.i_pd,
        v_pr=v_pr,
        v_sf=v_sf,
        v_diff=v_diff,
        n_sf=n_sf,
        events=events,
        saturation_count=engine.comparator.saturation_count,
        refreshes=engine.state.n_refreshes,
        sigma=model.sigma,
        f_c=model.f_c,
        ou_valid=model.ou_valid,
        pole_ratio=model.pole_ratio,
        runtime_s=runtime,
        pixel=pixel,
    )


def _simulate_pixel(args: tuple[SimConfig, Waveform, int, bool]) -> SimulationResult:
    config, waveform, pixel, record_trace = args
    return simulate_waveform(config, waveform, pixel=pixel, record_trace=record_trace)


def simulate_pixel_array(
    config: SimConfig,
    waveform: Waveform,
    n_pixels: int,
    *,
    max_workers: int | None = None,
) -> List[SimulationResult]:
    """Independent pixels on the same waveform, returned in pixel order.

    Only pixel 0 records its trace.
    """

    if n_pixels < 1:
        raise ValueError("n_pixels must be positive")
    jobs = [(config, waveform, pixel, pixel == 0) for pixel in range(n_pixels)]
    if n_pixels == 1 or max_workers == 1:
        return [_simulate_pixel(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(_simulate_pixel, jobs))


__all__ = [
    "PixelEngine",
    "SimulationResult",
    "Waveform",
    "make_comparator",
    "make_waveform",
    "resample_zoh",
    "simulate_pixel_array",
    "simulate_waveform",
    "time_grid",
]
