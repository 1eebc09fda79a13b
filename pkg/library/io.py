from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .config import IoConfig, OutputsConfig
from .events import EventRecord, Polarity
from .validators import assert_columns, ensure_not_null, ensure_sorted

logger = logging.getLogger(__name__)


_QUOTING_MAP = {
    "minimal": csv.QUOTE_MINIMAL,
    "all": csv.QUOTE_ALL,
    "none": csv.QUOTE_NONE,
}

WAVEFORM_COLUMNS = ("t_s", "i_pd_a")
PSD_COLUMNS = ("f_hz", "psd_v2_per_hz")
EVENT_COLUMNS = ("t_s", "polarity")
TRACE_COLUMNS = ("t_s", "v_pr_v", "v_sf_v", "v_diff_v", "i_pd_a", "n_sf_v")

EVENT_MAGIC = b"DVSE"
EVENT_FORMAT_VERSION = 1
_HEADER_DTYPE = np.dtype([("magic", "S4"), ("version", "<u4")])
_RECORD_DTYPE = np.dtype([("t_ns", "<u8"), ("polarity", "i1")])


class LoaderError(RuntimeError):
    """Exception raised when an input or output file cannot be used."""


def _encoding_candidates(io_cfg: IoConfig) -> list[str]:
    primary = io_cfg.encoding_in
    if io_cfg.encoding_fallbacks is None:
        candidates = [primary, "cp1252", "latin1"]
    else:
        candidates = [primary, *io_cfg.encoding_fallbacks]
    seen: set[str] = set()
    unique_candidates: list[str] = []
    for encoding in candidates:
        if not encoding or encoding in seen:
            continue
        seen.add(encoding)
        unique_candidates.append(encoding)
    return unique_candidates


def _quoting(io_cfg: IoConfig) -> int:
    if io_cfg.quoting not in _QUOTING_MAP:
        raise LoaderError(f"Unsupported quoting option: {io_cfg.quoting}")
    return _QUOTING_MAP[io_cfg.quoting]


def read_csv(
    path: str | Path,
    io_cfg: IoConfig | None = None,
    *,
    required: Sequence[str] = (),
) -> pd.DataFrame:
    """Read the CSV at *path*, trying the configured encodings in turn."""

    io_cfg = io_cfg or IoConfig()
    csv_path = Path(path)
    logger.info("Loading CSV", extra={"path": str(csv_path)})
    if not csv_path.exists():
        raise LoaderError(f"File not found: {csv_path}")

    last_error: UnicodeDecodeError | None = None
    for encoding in _encoding_candidates(io_cfg):
        try:
            frame = pd.read_csv(
                csv_path,
                encoding=encoding,
                sep=io_cfg.delimiter,
                quoting=_quoting(io_cfg),
                comment="#",
            )
            break
        except UnicodeDecodeError as exc:
            last_error = exc
            logger.warning(
                "Failed to decode CSV", extra={"path": str(csv_path), "encoding": encoding}
            )
    else:
        assert last_error is not None  # for type checkers
        raise last_error

    frame.columns = [str(column).strip() for column in frame.columns]
    try:
        assert_columns(frame, required)
        ensure_not_null(frame, required, str(csv_path))
    except ValueError as exc:
        raise LoaderError(f"{csv_path}: {exc}") from exc
    return frame


def read_waveform_csv(
    path: str | Path, io_cfg: IoConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Photocurrent samples ``(t_s, i_pd_a)`` with strictly increasing time."""

    frame = read_csv(path, io_cfg, required=WAVEFORM_COLUMNS)
    t = frame["t_s"].to_numpy(dtype=float)
    current = frame["i_pd_a"].to_numpy(dtype=float)
    if t.size == 0:
        raise LoaderError(f"{path}: waveform has no samples")
    try:
        ensure_sorted(t, f"{path}: t_s", strict=True)
    except ValueError as exc:
        raise LoaderError(str(exc)) from exc
    if np.any(current < 0):
        raise LoaderError(f"{path}: photocurrent must be non-negative")
    return t, current


def read_psd_csv(path: str | Path, io_cfg: IoConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    frame = read_csv(path, io_cfg, required=PSD_COLUMNS)
    f = frame["f_hz"].to_numpy(dtype=float)
    psd = frame["psd_v2_per_hz"].to_numpy(dtype=float)
    if np.any(f <= 0) or np.any(psd <= 0):
        raise LoaderError(f"{path}: frequencies and PSD values must be positive")
    return f, psd


def write_csv(
    df: pd.DataFrame,
    path: str | Path,
    outputs: OutputsConfig | None = None,
    io_cfg: IoConfig | None = None,
) -> Path:
    """Write *df* to *path* applying configuration controlled options."""

    outputs = outputs or OutputsConfig()
    io_cfg = io_cfg or IoConfig()
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    logger.info("Writing CSV", extra={"path": str(output_path), "rows": len(df)})
    df.to_csv(
        output_path,
        index=False,
        sep=io_cfg.delimiter,
        encoding=io_cfg.encoding_out,
        quoting=_quoting(io_cfg),
        lineterminator=outputs.line_terminator,
        float_format=outputs.float_format,
    )
    return output_path


def events_frame(events: Iterable[EventRecord]) -> pd.DataFrame:
    records = [(event.t, int(event.polarity)) for event in events]
    frame = pd.DataFrame(records, columns=list(EVENT_COLUMNS))
    return frame.astype({"t_s": float, "polarity": int})


def frame_to_events(frame: pd.DataFrame) -> list[EventRecord]:
    assert_columns(frame, EVENT_COLUMNS)
    return [
        EventRecord(float(t), Polarity(int(p)))
        for t, p in zip(frame["t_s"], frame["polarity"])
    ]


def read_events_csv(path: str | Path, io_cfg: IoConfig | None = None) -> list[EventRecord]:
    return frame_to_events(read_csv(path, io_cfg, required=EVENT_COLUMNS))


def write_events_binary(events: Iterable[EventRecord], path: str | Path) -> Path:
    """Write ``DVSE`` magic, a u32 version and ``(u64 ns, i8 polarity)`` records."""

    records = [(int(round(event.t * 1e9)), int(event.polarity)) for event in events]
    if any(t_ns < 0 for t_ns, _ in records):
        raise LoaderError("Event timestamps must be non-negative for the binary format")
    body = np.array(records, dtype=_RECORD_DTYPE)
    header = np.array([(EVENT_MAGIC, EVENT_FORMAT_VERSION)], dtype=_HEADER_DTYPE)

    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    logger.info("Writing events", extra={"path": str(output_path), "events": len(body)})
    output_path.write_bytes(header.tobytes() + body.tobytes())
    return output_path


def read_events_binary(path: str | Path) -> list[EventRecord]:
    input_path = Path(path)
    if not input_path.exists():
        raise LoaderError(f"File not found: {input_path}")
    payload = input_path.read_bytes()
    if len(payload) < _HEADER_DTYPE.itemsize:
        raise LoaderError(f"{input_path}: truncated event file header")
    header = np.frombuffer(payload[: _HEADER_DTYPE.itemsize], dtype=_HEADER_DTYPE)[0]
    if bytes(header["magic"]) != EVENT_MAGIC:
        raise LoaderError(f"{input_path}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != EVENT_FORMAT_VERSION:
        raise LoaderError(f"{input_path}: unsupported version {int(header['version'])}")
    body = payload[_HEADER_DTYPE.itemsize :]
    if len(body) % _RECORD_DTYPE.itemsize:
        raise LoaderError(f"{input_path}: truncated event record")
    records = np.frombuffer(body, dtype=_RECORD_DTYPE)
    return [
        EventRecord(int(t_ns) * 1e-9, Polarity(int(p)))
        for t_ns, p in zip(records["t_ns"], records["polarity"])
    ]


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def write_summary(
    summary: Mapping[str, Any],
    path: str | Path,
    outputs: OutputsConfig | None = None,
) -> Path:
    """Write ``key=value`` lines in insertion order."""

    outputs = outputs or OutputsConfig()
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in summary.items():
        text = _format_value(value)
        if "\n" in text or "=" in key:
            raise LoaderError(f"Summary entry '{key}' cannot be written as key=value")
        lines.append(f"{key}={text}")
    logger.info("Writing summary", extra={"path": str(output_path)})
    with output_path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(outputs.line_terminator.join(lines) + outputs.line_terminator)
    return output_path


def read_summary(path: str | Path) -> dict[str, str]:
    input_path = Path(path)
    if not input_path.exists():
        raise LoaderError(f"File not found: {input_path}")
    summary: dict[str, str] = {}
    for line in input_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise LoaderError(f"{input_path}: malformed summary line {line!r}")
        summary[key] = value
    return summary


__all__ = [
    "EVENT_COLUMNS",
    "EVENT_MAGIC",
    "LoaderError",
    "PSD_COLUMNS",
    "TRACE_COLUMNS",
    "WAVEFORM_COLUMNS",
    "events_frame",
    "frame_to_events",
    "read_csv",
    "read_events_binary",
    "read_events_csv",
    "read_psd_csv",
    "read_summary",
    "read_waveform_csv",
    "write_csv",
    "write_events_binary",
    "write_summary",
]
