from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from library.config import SimConfig, load_sim_config
from library.experiments import (
    run_bench,
    run_fit_psd,
    run_psd,
    run_simulate,
    run_sweep_threshold,
    run_sweep_timestep,
)
from library.fitting import FitError
from library.io import LoaderError
from library.validators import ParameterDomainError

LOGGER = logging.getLogger(__name__)


def _simulate(config: SimConfig, args: argparse.Namespace) -> None:
    outputs = run_simulate(config, n_pixels=args.pixels, max_workers=args.workers)
    LOGGER.info(
        "Simulation completed",
        extra={"events": outputs.summary["events_total"], "dir": str(config.outputs.dir)},
    )


def _sweep_threshold(config: SimConfig, args: argparse.Namespace) -> None:
    frame = run_sweep_threshold(config)
    LOGGER.info("Threshold sweep completed", extra={"rows": len(frame)})


def _sweep_timestep(config: SimConfig, args: argparse.Namespace) -> None:
    frame = run_sweep_timestep(config)
    LOGGER.info("Timestep sweep completed", extra={"rows": len(frame)})


def _bench(config: SimConfig, args: argparse.Namespace) -> None:
    frame = run_bench(config)
    LOGGER.info("Benchmark completed", extra={"rows": len(frame)})


def _psd(config: SimConfig, args: argparse.Namespace) -> None:
    frame = run_psd(config)
    LOGGER.info("PSD export completed", extra={"bins": len(frame)})


def _fit_psd(config: SimConfig, args: argparse.Namespace) -> None:
    result = run_fit_psd(config, synthetic=args.synthetic)
    LOGGER.info("PSD fit completed", extra={"residual": result.residual})


COMMANDS = {
    "simulate": (_simulate, "Simulate one or more pixels over the configured waveform"),
    "sweep-threshold": (_sweep_threshold, "Noise event rate against threshold"),
    "sweep-timestep": (_sweep_timestep, "Noise event rate against timestep"),
    "bench": (_bench, "Per-step engine throughput"),
    "psd": (_psd, "Analytic and synthesized noise PSD"),
    "fit-psd": (_fit_psd, "Fit pixel parameters to measured PSD curves"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Single-pixel DVS simulator")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", default="config.yaml", help="Path to config.yaml")
        sub.add_argument("--verbose", action="store_true", help="Enable debug logging")
        if name == "simulate":
            sub.add_argument("--pixels", type=int, default=1, help="Number of independent pixels")
            sub.add_argument("--workers", type=int, help="Worker processes for pixel arrays")
        if name == "fit-psd":
            sub.add_argument(
                "--synthetic",
                action="store_true",
                help="Fit against model-generated curves instead of fit.measurements",
            )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    handler, _ = COMMANDS[args.command]
    try:
        config = load_sim_config(Path(args.config))
        handler(config, args)
    except (
        FileNotFoundError,
        LoaderError,
        ParameterDomainError,
        FitError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
