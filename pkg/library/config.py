"""Simulator configuration: YAML loading and the typed ``SimConfig`` tree."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Sequence

import yaml

from .circuit import BiasPoint, PixelParams
from .validators import ParameterDomainError

LOGGER = logging.getLogger(__name__)

SEED_ENV_VAR = "DVSSIM_SEED"
WAVEFORM_KINDS = ("constant", "step", "pulse", "sine", "csv")

# keys whose double-quoted values name files: waveform.path, fit.measurements[].path,
# outputs.dir
_PATH_KEYS = {"path", "dir"}
_QUOTED_PATH = re.compile(
    r"(?m)^(?P<lead>[ \t]*(?:-[ \t]+)?)(?P<key>\w+):[ \t]*\"(?P<value>[^\"\n]*\\[^\"\n]*)\""
)
_YAML_ESCAPES = set("abfnrtv0-7xuU\"'\\NLP_ ")


def load_config(path: str | Path = "config.yaml") -> Dict[str, Any]:
    """Read a simulator config file into a plain mapping.

    Waveform, measurement and output paths written with single backslashes in
    double quotes (``"C:\\data\\step.csv"``) are not valid YAML escapes; such a
    file is parsed a second time with the backslashes in path values doubled.
    """

    path_obj = Path(path)
    text = path_obj.read_text(encoding="utf-8")
    try:
        return _parse_yaml(text)
    except yaml.YAMLError as error:
        if not _is_unknown_escape(error):
            raise
        LOGGER.debug(
            "Doubling backslashes in quoted path values",
            extra={"config": str(path_obj)},
            exc_info=error,
        )
        try:
            return _parse_yaml(_double_path_backslashes(text))
        except yaml.YAMLError as retry_error:
            raise ValueError(
                f"Cannot parse simulator config {path_obj}: a quoted value outside "
                f"{sorted(_PATH_KEYS)} holds an invalid escape sequence"
            ) from retry_error


def _parse_yaml(text: str) -> Dict[str, Any]:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise TypeError("Simulator config must be a mapping of sections")
    return data


def _is_unknown_escape(error: yaml.YAMLError) -> bool:
    message = getattr(error, "problem", None) or str(error)
    return "unknown escape character" in message


def _double_path_backslashes(text: str) -> str:
    def repair(match: re.Match[str]) -> str:
        value = match.group("value")
        if match.group("key") not in _PATH_KEYS or not _looks_like_raw_path(value):
            return match.group(0)
        doubled = value.replace("\\", "\\\\")
        return f'{match.group("lead")}{match.group("key")}: "{doubled}"'

    return _QUOTED_PATH.sub(repair, text)


def _looks_like_raw_path(value: str) -> bool:
    if re.match(r"(?i)[A-Z]:\\", value) or value.startswith("\\\\"):
        return True
    return any(marker not in _YAML_ESCAPES for marker in re.findall(r"\\(.)", value))


# ---------------------------------------------------------------------------
# Typed configuration


@dataclass(frozen=True)
class SimulationConfig:
    T_s: float
    duration: float
    seed: int = 0
    noise: bool = True
    refresh_threshold: float = 0.01
    photocurrent_floor: float = 1e-16


@dataclass(frozen=True)
class WaveformConfig:
    kind: str
    I_low: float = 1e-14
    I_high: float = 1e-12
    t_start: float = 0.0
    width: float = 1e-3
    frequency: float = 1.0
    depth: float = 1.0
    path: Path | None = None


@dataclass(frozen=True)
class ComparatorConfig:
    mode: str = "fpt"
    theta_on: float = 0.2
    theta_off: float = 0.2
    a_diff: float = 20.0
    refractory: float = 0.0
    max_depth: int = 16
    reset_includes_noise: bool = False
    theta_offset: float = 0.0


@dataclass(frozen=True)
class NoiseConfig:
    flicker_coeff: float | None = None


@dataclass(frozen=True)
class FptConfig:
    resolution: float = 1.0 / 1024.0
    max_sub_theta_dt: float = 0.125


@dataclass(frozen=True)
class SweepConfig:
    theta_sigma: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 3.0)
    ts_fc: tuple[float, ...] = (0.0005, 0.005, 0.05, 0.5)
    threshold_ts_fc: float = 0.5
    timestep_theta_sigma: float = 1.0
    reference_ts_fc: float = 0.0005
    duration_fc: float = 2000.0
    sigma: float | None = None
    f_c: float | None = None


@dataclass(frozen=True)
class BenchConfig:
    ts_fc: tuple[float, ...] = (0.0005, 0.005, 0.05, 0.5)
    duration_fc: float = 200.0
    warmup_steps: int = 2000
    theta_sigma: float = 2.0


@dataclass(frozen=True)
class PsdConfig:
    n_samples: int = 1_000_000
    segment_len: int = 16384
    overlap: float = 0.5


@dataclass(frozen=True)
class FitMeasurement:
    path: Path
    bias: BiasPoint
    label: str = ""


@dataclass(frozen=True)
class FitConfig:
    measurements: tuple[FitMeasurement, ...] = ()
    free: tuple[str, ...] = ("C_pd", "C_fb", "C_pr", "C_sf")
    max_evaluations: int = 400


@dataclass(frozen=True)
class IoConfig:
    encoding_in: str = "utf8"
    encoding_out: str = "utf8"
    encoding_fallbacks: tuple[str, ...] | None = None
    delimiter: str = ","
    quoting: str = "minimal"


@dataclass(frozen=True)
class OutputsConfig:
    dir: Path = Path("output")
    trace_csv: str = "trace.csv"
    events_csv: str = "events.csv"
    events_bin: str = "events.bin"
    summary: str = "summary.txt"
    psd_csv: str = "psd.csv"
    sweep_threshold_csv: str = "sweep_threshold.csv"
    sweep_timestep_csv: str = "sweep_timestep.csv"
    bench_csv: str = "bench.csv"
    fit_params_yaml: str = "fit_params.yaml"
    fit_overlay_csv: str = "fit_overlay.csv"
    float_format: str = "%.12g"
    line_terminator: str = "\n"
    write_trace: bool = True
    trace_decimation: int = 1
    summary_runtime: bool = True

    def path(self, name: str) -> Path:
        return self.dir / getattr(self, name)


@dataclass(frozen=True)
class SimConfig:
    pixel: PixelParams
    bias: BiasPoint
    simulation: SimulationConfig
    waveform: WaveformConfig
    comparator: ComparatorConfig = field(default_factory=ComparatorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    fpt: FptConfig = field(default_factory=FptConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    psd: PsdConfig = field(default_factory=PsdConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    io: IoConfig = field(default_factory=IoConfig)
    outputs: OutputsConfig = field(default_factory=OutputsConfig)


def _section(raw: Mapping[str, Any], name: str) -> Dict[str, Any]:
    value = raw.get(name) or {}
    if not isinstance(value, Mapping):
        raise ValueError(f"Config section '{name}' must be a mapping")
    return dict(value)


def _take(section: Dict[str, Any], name: str, cls: type) -> Dict[str, Any]:
    unknown = sorted(set(section) - set(cls.__dataclass_fields__))
    if unknown:
        raise ValueError(f"Unknown keys in '{name}': {unknown}")
    return dict(section)


def _number(value: Any, key: str, *, positive: bool = False, non_negative: bool = False) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"'{key}' must be a number, got {value!r}") from exc
    if positive and not number > 0:
        raise ValueError(f"'{key}' must be positive, got {value!r}")
    if non_negative and not number >= 0:
        raise ValueError(f"'{key}' must be non-negative, got {value!r}")
    return number


def _number_tuple(value: Any, key: str) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        value = [value]
    if not isinstance(value, Sequence) or isinstance(value, str):
        raise ValueError(f"'{key}' must be a list of numbers")
    numbers = tuple(_number(item, key, positive=True) for item in value)
    if not numbers:
        raise ValueError(f"'{key}' must not be empty")
    return numbers


def _resolve_path(value: Any, base_dir: Path, key: str) -> Path:
    if not value:
        raise ValueError(f"'{key}' must name a file")
    path = Path(str(value))
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise FileNotFoundError(f"{key}: file not found: {path}")
    return path


def _seed(raw_seed: Any, env: Mapping[str, str]) -> int:
    override = env.get(SEED_ENV_VAR)
    if override is not None and override.strip():
        try:
            seed = int(override)
        except ValueError as exc:
            raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {override!r}") from exc
        LOGGER.info("Seed taken from environment", extra={"seed": seed})
    else:
        try:
            seed = int(raw_seed)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"'simulation.seed' must be an integer, got {raw_seed!r}") from exc
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    return seed


def _build_simulation(section: Dict[str, Any], env: Mapping[str, str]) -> SimulationConfig:
    values = _take(section, "simulation", SimulationConfig)
    if "T_s" not in values or "duration" not in values:
        raise ValueError("'simulation' requires 'T_s' and 'duration'")
    T_s = _number(values["T_s"], "simulation.T_s", positive=True)
    duration = _number(values["duration"], "simulation.duration", positive=True)
    if duration < T_s:
        raise ValueError(
            f"'simulation.duration'={duration} must be at least 'simulation.T_s'={T_s}"
        )
    threshold = _number(
        values.get("refresh_threshold", 0.01), "simulation.refresh_threshold", positive=True
    )
    floor = _number(
        values.get("photocurrent_floor", 1e-16), "simulation.photocurrent_floor", positive=True
    )
    return SimulationConfig(
        T_s=T_s,
        duration=duration,
        seed=_seed(values.get("seed", 0), env),
        noise=bool(values.get("noise", True)),
        refresh_threshold=threshold,
        photocurrent_floor=floor,
    )


def _build_waveform(section: Dict[str, Any], base_dir: Path) -> WaveformConfig:
    values = _take(section, "waveform", WaveformConfig)
    kind = str(values.get("kind", "constant")).lower()
    if kind not in WAVEFORM_KINDS:
        raise ValueError(f"'waveform.kind' must be one of {WAVEFORM_KINDS}, got {kind!r}")
    numeric = {}
    for key in ("I_low", "I_high", "frequency", "width"):
        if key in values:
            numeric[key] = _number(values[key], f"waveform.{key}", positive=True)
    for key in ("t_start", "depth"):
        if key in values:
            numeric[key] = _number(values[key], f"waveform.{key}", non_negative=True)
    path = _resolve_path(values.get("path"), base_dir, "waveform.path") if kind == "csv" else None
    return WaveformConfig(kind=kind, path=path, **numeric)


def _build_comparator(section: Dict[str, Any]) -> ComparatorConfig:
    values = _take(section, "comparator", ComparatorConfig)
    mode = str(values.get("mode", "fpt")).lower()
    if mode not in ("naive", "fpt"):
        raise ValueError(f"'comparator.mode' must be 'naive' or 'fpt', got {mode!r}")
    max_depth = int(values.get("max_depth", 16))
    if max_depth < 1:
        raise ValueError("'comparator.max_depth' must be at least 1")
    return ComparatorConfig(
        mode=mode,
        theta_on=_number(values.get("theta_on", 0.2), "comparator.theta_on", positive=True),
        theta_off=_number(values.get("theta_off", 0.2), "comparator.theta_off", positive=True),
        a_diff=_number(values.get("a_diff", 20.0), "comparator.a_diff", positive=True),
        refractory=_number(
            values.get("refractory", 0.0), "comparator.refractory", non_negative=True
        ),
        max_depth=max_depth,
        reset_includes_noise=bool(values.get("reset_includes_noise", False)),
        theta_offset=_number(values.get("theta_offset", 0.0), "comparator.theta_offset"),
    )


def _build_noise(section: Dict[str, Any]) -> NoiseConfig:
    values = _take(section, "noise", NoiseConfig)
    flicker = values.get("flicker_coeff")
    if flicker is None:
        return NoiseConfig()
    return NoiseConfig(
        flicker_coeff=_number(flicker, "noise.flicker_coeff", non_negative=True)
    )


def _build_fpt(section: Dict[str, Any]) -> FptConfig:
    values = _take(section, "fpt", FptConfig)
    resolution = _number(values.get("resolution", 1.0 / 1024.0), "fpt.resolution", positive=True)
    if resolution >= 1:
        raise ValueError("'fpt.resolution' must be below 1")
    return FptConfig(
        resolution=resolution,
        max_sub_theta_dt=_number(
            values.get("max_sub_theta_dt", 0.125), "fpt.max_sub_theta_dt", positive=True
        ),
    )


def _build_sweep(section: Dict[str, Any]) -> SweepConfig:
    values = _take(section, "sweep", SweepConfig)
    defaults = SweepConfig()
    kwargs: Dict[str, Any] = {}
    for key in ("theta_sigma", "ts_fc"):
        if key in values:
            kwargs[key] = _number_tuple(values[key], f"sweep.{key}")
    for key in ("threshold_ts_fc", "timestep_theta_sigma", "reference_ts_fc", "duration_fc"):
        if key in values:
            kwargs[key] = _number(values[key], f"sweep.{key}", positive=True)
    for key in ("sigma", "f_c"):
        if values.get(key) is not None:
            kwargs[key] = _number(values[key], f"sweep.{key}", positive=True)
    return replace(defaults, **kwargs)


def _build_bench(section: Dict[str, Any]) -> BenchConfig:
    values = _take(section, "bench", BenchConfig)
    ts_fc = _number_tuple(values.get("ts_fc", BenchConfig.ts_fc), "bench.ts_fc")
    duration_fc = _number(
        values.get("duration_fc", BenchConfig.duration_fc), "bench.duration_fc", positive=True
    )
    warmup = int(values.get("warmup_steps", BenchConfig.warmup_steps))
    if warmup < 0:
        raise ValueError("'bench.warmup_steps' must be non-negative")
    return BenchConfig(
        ts_fc=ts_fc,
        duration_fc=duration_fc,
        warmup_steps=warmup,
        theta_sigma=_number(
            values.get("theta_sigma", BenchConfig.theta_sigma), "bench.theta_sigma", positive=True
        ),
    )


def _build_psd(section: Dict[str, Any]) -> PsdConfig:
    values = _take(section, "psd", PsdConfig)
    n_samples = int(values.get("n_samples", PsdConfig.n_samples))
    segment_len = int(values.get("segment_len", PsdConfig.segment_len))
    overlap = _number(values.get("overlap", PsdConfig.overlap), "psd.overlap", non_negative=True)
    if segment_len < 2 or n_samples < segment_len:
        raise ValueError("'psd.n_samples' must be at least 'psd.segment_len' (>= 2)")
    if overlap >= 1:
        raise ValueError("'psd.overlap' must lie in [0, 1)")
    return PsdConfig(n_samples=n_samples, segment_len=segment_len, overlap=overlap)


def _build_fit(section: Dict[str, Any], defaults: BiasPoint, base_dir: Path) -> FitConfig:
    values = _take(section, "fit", FitConfig)
    measurements = []
    for index, entry in enumerate(values.get("measurements") or []):
        if not isinstance(entry, Mapping):
            raise ValueError(f"'fit.measurements[{index}]' must be a mapping")
        key = f"fit.measurements[{index}]"
        bias = BiasPoint(
            I_pd=_number(entry.get("I_pd", defaults.I_pd), f"{key}.I_pd", positive=True),
            I_pr=_number(entry.get("I_pr", defaults.I_pr), f"{key}.I_pr", positive=True),
            I_sf=_number(entry.get("I_sf", defaults.I_sf), f"{key}.I_sf", positive=True),
        )
        measurements.append(
            FitMeasurement(
                path=_resolve_path(entry.get("path"), base_dir, f"{key}.path"),
                bias=bias,
                label=str(entry.get("label", f"condition_{index}")),
            )
        )
    free = values.get("free", FitConfig.free)
    if isinstance(free, str):
        free = [free]
    max_evaluations = int(values.get("max_evaluations", FitConfig.max_evaluations))
    if max_evaluations < 1:
        raise ValueError("'fit.max_evaluations' must be positive")
    return FitConfig(
        measurements=tuple(measurements),
        free=tuple(str(name) for name in free),
        max_evaluations=max_evaluations,
    )


def _build_io(section: Dict[str, Any]) -> IoConfig:
    values = _take(section, "io", IoConfig)
    fallbacks = values.get("encoding_fallbacks")
    if isinstance(fallbacks, str):
        fallbacks = (fallbacks,)
    elif fallbacks is not None:
        fallbacks = tuple(fallbacks)
    return IoConfig(
        encoding_in=str(values.get("encoding_in", "utf8")),
        encoding_out=str(values.get("encoding_out", values.get("encoding_in", "utf8"))),
        encoding_fallbacks=fallbacks,
        delimiter=str(values.get("delimiter", ",")),
        quoting=str(values.get("quoting", "minimal")).lower(),
    )


def _build_outputs(section: Dict[str, Any], base_dir: Path) -> OutputsConfig:
    values = _take(section, "outputs", OutputsConfig)
    out_dir = Path(str(values.pop("dir", "output")))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    decimation = int(values.pop("trace_decimation", 1))
    if decimation < 1:
        raise ValueError("'outputs.trace_decimation' must be at least 1")
    for flag in ("write_trace", "summary_runtime"):
        if flag in values:
            values[flag] = bool(values[flag])
    return OutputsConfig(dir=out_dir, trace_decimation=decimation, **values)


def build_sim_config(
    raw: Mapping[str, Any],
    *,
    base_dir: str | Path | None = None,
    env: Mapping[str, str] | None = None,
) -> SimConfig:
    """Validate a raw configuration mapping and return a :class:`SimConfig`.

    Relative file paths are resolved against ``base_dir`` (the current
    directory when omitted).
    """

    base = Path(base_dir) if base_dir is not None else Path.cwd()
    environment = os.environ if env is None else env
    try:
        pixel = PixelParams.from_mapping(_section(raw, "pixel"))
        bias = BiasPoint.from_mapping(_section(raw, "bias"))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"Incomplete pixel or bias parameters: {exc}") from exc
    if min(bias.I_pd, bias.I_pr, bias.I_sf) <= 0:
        raise ParameterDomainError(f"Bias currents must be positive: {bias}")

    config = SimConfig(
        pixel=pixel,
        bias=bias,
        simulation=_build_simulation(_section(raw, "simulation"), environment),
        waveform=_build_waveform(_section(raw, "waveform"), base),
        comparator=_build_comparator(_section(raw, "comparator")),
        noise=_build_noise(_section(raw, "noise")),
        fpt=_build_fpt(_section(raw, "fpt")),
        sweep=_build_sweep(_section(raw, "sweep")),
        bench=_build_bench(_section(raw, "bench")),
        psd=_build_psd(_section(raw, "psd")),
        fit=_build_fit(_section(raw, "fit"), bias, base),
        io=_build_io(_section(raw, "io")),
        outputs=_build_outputs(_section(raw, "outputs"), base),
    )
    LOGGER.debug("Built simulation config", extra={"seed": config.simulation.seed})
    return config


def load_sim_config(
    path: str | Path = "config.yaml", *, env: Mapping[str, str] | None = None
) -> SimConfig:
    path_obj = Path(path)
    return build_sim_config(load_config(path_obj), base_dir=path_obj.resolve().parent, env=env)


__all__ = [
    "BenchConfig",
    "ComparatorConfig",
    "FitConfig",
    "FitMeasurement",
    "FptConfig",
    "IoConfig",
    "NoiseConfig",
    "OutputsConfig",
    "PsdConfig",
    "SEED_ENV_VAR",
    "SimConfig",
    "SimulationConfig",
    "SweepConfig",
    "WAVEFORM_KINDS",
    "WaveformConfig",
    "build_sim_config",
    "load_config",
    "load_sim_config",
]
