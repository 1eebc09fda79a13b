"""Runners behind the command-line subcommands.

Every runner takes a :class:`~library.config.SimConfig`, writes its outputs
under ``config.outputs.dir`` and returns what it wrote so that callers and tests
can inspect the results without re-reading files.
"""

from __future__ import annotations

import logging
import math
import platform
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
import yaml

from .circuit import NOISE_SOURCES, NoiseModel, build_noise_model, compute_operating_point
from .config import SimConfig
from .events import EventRecord, count_polarities, detect_fpt_trace, detect_naive_trace
from .fitting import (
    FitError,
    FitResult,
    PsdCondition,
    fit_psd_params,
    model_log_psd,
    synthesize_psd_samples,
)
from .fpt import OuParams, simulate_ou
from .io import (
    events_frame,
    read_psd_csv,
    write_csv,
    write_events_binary,
    write_summary,
)
from .noise import make_noise_streams, source_generator, welch_psd
from .simulation import (
    PixelEngine,
    SimulationResult,
    make_comparator,
    make_waveform,
    simulate_pixel_array,
)

logger = logging.getLogger(__name__)

SWEEP_MODES = ("naive", "fpt", "reference")
BENCH_MODES = ("naive", "fpt")
SYNTHETIC_ILLUMINATION = (1e-14, 1e-13, 1e-12)


def host_description() -> str:
    return (
        f"{platform.system()} {platform.release()} {platform.machine()} "
        f"python {platform.python_version()} numpy {np.__version__}"
    ).strip()


def _noise_model(config: SimConfig) -> NoiseModel:
    return build_noise_model(config.pixel, config.bias, flicker_coeff=config.noise.flicker_coeff)


def _sweep_noise(config: SimConfig) -> OuParams:
    """OU noise at ``v_sf`` for sweeps; manual ``sigma``/``f_c`` take precedence."""

    sweep = config.sweep
    if sweep.sigma is not None and sweep.f_c is not None:
        return OuParams(sigma=sweep.sigma, f_c=sweep.f_c)
    model = _noise_model(config)
    return OuParams(
        sigma=sweep.sigma if sweep.sigma is not None else model.sigma,
        f_c=sweep.f_c if sweep.f_c is not None else model.f_c,
    )


# ---------------------------------------------------------------------------
# simulate


@dataclass(frozen=True)
class SimulateOutputs:
    results: List[SimulationResult]
    summary: Dict[str, object]
    paths: Dict[str, Path]


def _trace_frame(result: SimulationResult, decimation: int) -> pd.DataFrame:
    sl = slice(None, None, decimation)
    return pd.DataFrame(
        {
            "t_s": result.t[sl],
            "v_pr_v": result.v_pr[sl],
            "v_sf_v": result.v_sf[sl],
            "v_diff_v": result.v_diff[sl],
            "i_pd_a": result.i_pd[sl],
            "n_sf_v": result.n_sf[sl],
        }
    )


def _event_file(base: Path, pixel: int, n_pixels: int) -> Path:
    if n_pixels == 1:
        return base
    return base.with_name(f"{base.stem}_{pixel}{base.suffix}")


def run_simulate(
    config: SimConfig,
    *,
    n_pixels: int = 1,
    max_workers: int | None = None,
) -> SimulateOutputs:
    """Simulate the configured waveform and write traces, events and a summary."""

    outputs = config.outputs
    sim = config.simulation
    waveform = make_waveform(config.waveform, sim.T_s, sim.duration, config.io)
    started = time.perf_counter()
    results = simulate_pixel_array(config, waveform, n_pixels, max_workers=max_workers)
    runtime = time.perf_counter() - started

    paths: Dict[str, Path] = {}
    if outputs.write_trace:
        paths["trace"] = write_csv(
            _trace_frame(results[0], outputs.trace_decimation),
            outputs.path("trace_csv"),
            outputs,
            config.io,
        )
    for result in results:
        frame = events_frame(result.events)
        csv_path = _event_file(outputs.path("events_csv"), result.pixel, n_pixels)
        bin_path = _event_file(outputs.path("events_bin"), result.pixel, n_pixels)
        paths[f"events_csv_{result.pixel}"] = write_csv(frame, csv_path, outputs, config.io)
        paths[f"events_bin_{result.pixel}"] = write_events_binary(result.events, bin_path)

    summary = _simulate_summary(config, results, runtime, waveform.duration)
    paths["summary"] = write_summary(summary, outputs.path("summary"), outputs)
    return SimulateOutputs(results=results, summary=summary, paths=paths)


def _simulate_summary(
    config: SimConfig,
    results: Sequence[SimulationResult],
    runtime: float,
    duration: float,
) -> Dict[str, object]:
    counts = {"on": 0, "off": 0}
    for result in results:
        for key, value in count_polarities(result.events).items():
            counts[key] += value
    first = results[0]
    summary: Dict[str, object] = {
        "host": host_description(),
        "mode": config.comparator.mode,
        "n_pixels": len(results),
        "seed": config.simulation.seed,
        "T_s": config.simulation.T_s,
        "duration_s": duration,
        "noise": config.simulation.noise,
        "events_on": counts["on"],
        "events_off": counts["off"],
        "events_total": counts["on"] + counts["off"],
        "rate_on_hz": counts["on"] / (duration * len(results)),
        "rate_off_hz": counts["off"] / (duration * len(results)),
        "saturation_count": sum(result.saturation_count for result in results),
        "refreshes": first.refreshes,
        "sigma_v": first.sigma,
        "f_c_hz": first.f_c,
        "ou_valid": first.ou_valid,
        "pole_ratio": first.pole_ratio,
    }
    if len(results) > 1:
        for result in results:
            summary[f"events_pixel_{result.pixel}"] = len(result.events)
    if config.outputs.summary_runtime:
        summary["runtime_s"] = runtime
    return summary


# ---------------------------------------------------------------------------
# sweeps


def _rate_row(events: List[EventRecord], duration: float) -> Dict[str, float]:
    counts = count_polarities(events)
    return {
        "n_on": counts["on"],
        "n_off": counts["off"],
        "on_rate": counts["on"] / duration,
        "off_rate": counts["off"] / duration,
        "on_rate_se": math.sqrt(counts["on"]) / duration,
        "off_rate_se": math.sqrt(counts["off"]) / duration,
        "rate": (counts["on"] + counts["off"]) / duration,
        "rate_se": math.sqrt(counts["on"] + counts["off"]) / duration,
    }


def _detect(
    config: SimConfig,
    mode: str,
    theta_v: float,
    trace: np.ndarray,
    t: np.ndarray,
    ou: OuParams,
    rng: np.random.Generator,
) -> List[EventRecord]:
    comparator = make_comparator(
        config,
        theta_on=theta_v,
        theta_off=theta_v,
        theta_offset=0.0,
        mode="fpt" if mode == "fpt" else "naive",
    )
    comparator.reset(0.0, float(trace[0]))
    if mode == "fpt":
        return detect_fpt_trace(comparator, 0.0, trace, t, ou, rng)
    return detect_naive_trace(comparator, trace, t)


def _noise_trace(
    config: SimConfig, ou: OuParams, ts_fc: float, stream: int
) -> tuple[np.ndarray, np.ndarray, float]:
    T_s = ts_fc / ou.f_c
    duration = config.sweep.duration_fc / ou.f_c
    n = int(round(duration / T_s)) + 1
    rng = source_generator(config.simulation.seed, stream, 0)
    trace = simulate_ou(ou, T_s, n, rng)
    return trace, T_s * np.arange(n), (n - 1) * T_s


def run_sweep_threshold(
    config: SimConfig,
    theta_grid: Sequence[float] | None = None,
    *,
    modes: Sequence[str] = SWEEP_MODES,
) -> pd.DataFrame:
    """Noise event rate against threshold at constant illumination.

    ``theta_grid`` is in units of the noise standard deviation at ``v_diff``.
    ``naive`` and ``fpt`` run at ``sweep.threshold_ts_fc / f_c``; ``reference`` is
    the naive detector at the fine ``sweep.reference_ts_fc / f_c``.
    """

    grid = tuple(theta_grid) if theta_grid is not None else config.sweep.theta_sigma
    if not grid:
        raise ValueError("Threshold grid must not be empty")
    ou = _sweep_noise(config)
    a_diff = config.comparator.a_diff
    rows = []
    for mode_index, mode in enumerate(modes):
        if mode not in SWEEP_MODES:
            raise ValueError(f"Unknown sweep mode: {mode!r}")
        if mode == "reference":
            ts_fc = config.sweep.reference_ts_fc
        else:
            ts_fc = config.sweep.threshold_ts_fc
        trace, t, duration = _noise_trace(config, ou, ts_fc, 1000 + mode_index)
        rng = source_generator(config.simulation.seed, 2000 + mode_index, 0)
        for theta_sigma in grid:
            theta_v = theta_sigma * ou.sigma * a_diff
            events = _detect(config, mode, theta_v, trace, t, ou, rng)
            rows.append(
                {
                    "theta_sigma": theta_sigma,
                    "theta_v": theta_v,
                    "mode": mode,
                    "T_s": ts_fc / ou.f_c,
                    "ts_fc": ts_fc,
                    "duration_s": duration,
                    **_rate_row(events, duration),
                }
            )
        logger.info("Threshold sweep mode finished", extra={"mode": mode, "points": len(grid)})
    frame = pd.DataFrame(rows)
    write_csv(frame, config.outputs.path("sweep_threshold_csv"), config.outputs, config.io)
    return frame


def run_sweep_timestep(
    config: SimConfig,
    ts_grid: Sequence[float] | None = None,
    *,
    modes: Sequence[str] = ("naive", "fpt"),
) -> pd.DataFrame:
    """Noise event rate against timestep at fixed threshold (``T_s`` in units of ``1/f_c``)."""

    grid = tuple(ts_grid) if ts_grid is not None else config.sweep.ts_fc
    if not grid:
        raise ValueError("Timestep grid must not be empty")
    ou = _sweep_noise(config)
    theta_sigma = config.sweep.timestep_theta_sigma
    theta_v = theta_sigma * ou.sigma * config.comparator.a_diff
    rows = []
    for grid_index, ts_fc in enumerate(grid):
        trace, t, duration = _noise_trace(config, ou, ts_fc, 3000 + grid_index)
        for mode_index, mode in enumerate(modes):
            if mode not in ("naive", "fpt"):
                raise ValueError(f"Unknown sweep mode: {mode!r}")
            rng = source_generator(config.simulation.seed, 4000 + grid_index, mode_index)
            events = _detect(config, mode, theta_v, trace, t, ou, rng)
            rows.append(
                {
                    "ts_fc": ts_fc,
                    "T_s": ts_fc / ou.f_c,
                    "mode": mode,
                    "theta_sigma": theta_sigma,
                    "duration_s": duration,
                    **_rate_row(events, duration),
                }
            )
    frame = pd.DataFrame(rows)
    write_csv(frame, config.outputs.path("sweep_timestep_csv"), config.outputs, config.io)
    return frame


# ---------------------------------------------------------------------------
# bench


def _bench_engine(config: SimConfig, mode: str, T_s: float, theta_v: float) -> PixelEngine:
    comparator = make_comparator(
        config, theta_on=theta_v, theta_off=theta_v, theta_offset=0.0, mode=mode
    )
    return PixelEngine(
        config.pixel,
        config.bias,
        T_s,
        config.bias.I_pd,
        comparator,
        noise=True,
        seed=config.simulation.seed,
        flicker_coeff=config.noise.flicker_coeff,
        refresh_threshold=config.simulation.refresh_threshold,
        floor=config.simulation.photocurrent_floor,
    )


def _time_steps(engine: PixelEngine, i_pd: float, steps: int) -> tuple[float, int]:
    n_events = 0
    started = time.perf_counter()
    for _ in range(steps):
        n_events += len(engine.step(i_pd))
    return time.perf_counter() - started, n_events


def run_bench(
    config: SimConfig,
    ts_grid: Sequence[float] | None = None,
    *,
    modes: Sequence[str] = BENCH_MODES,
) -> pd.DataFrame:
    """Simulated seconds per wall-clock second of the full per-step engine.

    Timesteps are given in units of ``1/f_c``. Every point simulates
    ``bench.duration_fc / f_c`` seconds, so modes and timesteps see the same noise
    history length; a warmup run precedes the grid.
    """

    grid = tuple(ts_grid) if ts_grid is not None else config.bench.ts_fc
    if not grid:
        raise ValueError("Timestep grid must not be empty")
    bench = config.bench
    model = _noise_model(config)
    theta_v = bench.theta_sigma * model.sigma * config.comparator.a_diff
    i_pd = config.bias.I_pd
    host = host_description()
    logger.info("Benchmark host", extra={"host": host})

    if bench.warmup_steps:
        warm = _bench_engine(config, modes[0], grid[0] / model.f_c, theta_v)
        _time_steps(warm, i_pd, bench.warmup_steps)

    rows = []
    for ts_fc in grid:
        T_s = ts_fc / model.f_c
        steps = max(int(round(bench.duration_fc / ts_fc)), 1)
        for mode in modes:
            engine = _bench_engine(config, mode, T_s, theta_v)
            wall, n_events = _time_steps(engine, i_pd, steps)
            simulated = steps * T_s
            rows.append(
                {
                    "ts_fc": ts_fc,
                    "T_s": T_s,
                    "mode": mode,
                    "steps": steps,
                    "simulated_s": simulated,
                    "wall_s": wall,
                    "throughput": simulated / wall if wall > 0 else math.inf,
                    "events": n_events,
                    "host": host,
                }
            )
            logger.info(
                "Benchmark point", extra={"mode": mode, "ts_fc": ts_fc, "wall_s": wall}
            )
    frame = pd.DataFrame(rows)
    write_csv(frame, config.outputs.path("bench_csv"), config.outputs, config.io)
    return frame


# ---------------------------------------------------------------------------
# psd


def run_psd(config: SimConfig) -> pd.DataFrame:
    """Analytic noise PSD at ``v_sf`` alongside a Welch estimate of synthesized noise."""

    if not config.simulation.noise:
        raise ValueError("PSD synthesis requires simulation.noise to be enabled")
    T_s = config.simulation.T_s
    psd_cfg = config.psd
    op_point = compute_operating_point(config.pixel, config.bias)
    streams = make_noise_streams(op_point, config.bias, T_s, seed=config.simulation.seed)

    settle = int(math.ceil(5.0 * op_point.time_constants[0] / T_s))
    streams.block(settle)
    block = streams.block(psd_cfg.n_samples)

    total = welch_psd(block.n_sf, T_s, psd_cfg.segment_len, psd_cfg.overlap)
    keep = total.f > 0
    f = total.f[keep]
    model = _noise_model(config).psd(f)

    columns: Dict[str, np.ndarray] = {
        "f_hz": f,
        "psd_v2_per_hz": total.psd[keep],
        "model_psd_v2_per_hz": model.total,
    }
    for source in NOISE_SOURCES:
        estimate = welch_psd(block.per_source[source], T_s, psd_cfg.segment_len, psd_cfg.overlap)
        columns[f"synth_{source}"] = estimate.psd[keep]
        columns[f"model_{source}"] = model.terms[source]
    frame = pd.DataFrame(columns)
    write_csv(frame, config.outputs.path("psd_csv"), config.outputs, config.io)
    return frame


# ---------------------------------------------------------------------------
# fit-psd


def _synthetic_conditions(config: SimConfig) -> List[PsdCondition]:
    f = np.logspace(0, 6, 80)
    return [
        synthesize_psd_samples(
            config.pixel,
            config.bias.with_photocurrent(level),
            f,
            rel_noise=0.01,
            seed=config.simulation.seed + index,
            flicker_coeff=config.noise.flicker_coeff,
            label=f"synthetic_{level:g}",
        )
        for index, level in enumerate(SYNTHETIC_ILLUMINATION)
    ]


def run_fit_psd(config: SimConfig, *, synthetic: bool = False) -> FitResult:
    """Fit the free pixel parameters and write them with a model/measured overlay."""

    if synthetic:
        conditions = _synthetic_conditions(config)
        initial = replace(
            config.pixel, **{name: getattr(config.pixel, name) * 1.2 for name in config.fit.free}
        )
    else:
        if not config.fit.measurements:
            raise ValueError("fit.measurements is empty; nothing to fit")
        conditions = []
        for measurement in config.fit.measurements:
            f, psd = read_psd_csv(measurement.path, config.io)
            conditions.append(PsdCondition(measurement.bias, f, psd, measurement.label))
        initial = config.pixel

    try:
        result = fit_psd_params(
            conditions,
            initial,
            config.fit.free,
            max_evaluations=config.fit.max_evaluations,
            flicker_coeff=config.noise.flicker_coeff,
        )
    except FitError as error:
        _write_fit(config, error.best, conditions)
        raise
    _write_fit(config, result, conditions)
    return result


def _write_fit(config: SimConfig, result: FitResult, conditions: Sequence[PsdCondition]) -> None:
    outputs = config.outputs
    params_path = outputs.path("fit_params_yaml")
    params_path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "pixel": {key: float(value) for key, value in result.params.to_mapping().items()},
        "fit": {
            "residual_log10": float(result.residual),
            "evaluations": int(result.n_evaluations),
            "success": bool(result.success),
            "free": list(config.fit.free),
        },
    }
    logger.info("Writing fitted parameters", extra={"path": str(params_path)})
    params_path.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")

    frames = []
    for condition in conditions:
        frames.append(
            pd.DataFrame(
                {
                    "label": condition.label,
                    "f_hz": condition.f,
                    "measured_psd_v2_per_hz": condition.psd,
                    "model_psd_v2_per_hz": 10.0
                    ** model_log_psd(result.params, condition, config.noise.flicker_coeff),
                }
            )
        )
    overlay = pd.concat(frames, ignore_index=True)
    write_csv(overlay, outputs.path("fit_overlay_csv"), outputs, config.io)


__all__ = [
    "SimulateOutputs",
    "host_description",
    "run_bench",
    "run_fit_psd",
    "run_psd",
    "run_simulate",
    "run_sweep_threshold",
    "run_sweep_timestep",
]
