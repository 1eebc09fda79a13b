from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pandas as pd
import pytest
import yaml

from library.circuit import BiasPoint
from library.config import FitMeasurement, SimConfig
from library.experiments import (
    run_bench,
    run_fit_psd,
    run_psd,
    run_simulate,
    run_sweep_threshold,
    run_sweep_timestep,
)
from library.io import TRACE_COLUMNS, read_events_binary, read_events_csv, read_summary
from scripts.dvssim import main

RATE_COLUMNS = [
    "n_on",
    "n_off",
    "on_rate",
    "off_rate",
    "on_rate_se",
    "off_rate_se",
    "rate",
    "rate_se",
]


def test_run_simulate_writes_outputs(sim_config: SimConfig) -> None:
    outputs = run_simulate(sim_config)

    trace = pd.read_csv(outputs.paths["trace"])
    assert tuple(trace.columns) == TRACE_COLUMNS
    assert len(trace) == outputs.results[0].t.size

    simulated = outputs.results[0].events
    for path in (outputs.paths["events_csv_0"], outputs.paths["events_bin_0"]):
        restored = read_events_csv(path) if path.suffix == ".csv" else read_events_binary(path)
        assert [event.polarity for event in restored] == [event.polarity for event in simulated]
        assert [event.t for event in restored] == pytest.approx(
            [event.t for event in simulated], rel=1e-9, abs=1e-9
        )

    summary = read_summary(outputs.paths["summary"])
    assert summary["mode"] == "fpt"
    assert int(summary["events_total"]) == len(simulated)
    assert summary["noise"] == "true"
    assert float(summary["sigma_v"]) > 0
    assert "runtime_s" in summary


def test_run_simulate_is_reproducible(sim_config: SimConfig) -> None:
    first = run_simulate(sim_config)
    second = run_simulate(sim_config)

    assert first.results[0].events == second.results[0].events
    assert first.summary["events_total"] == second.summary["events_total"]


def test_run_simulate_pixel_array(sim_config: SimConfig) -> None:
    config = replace(sim_config, outputs=replace(sim_config.outputs, write_trace=False))

    outputs = run_simulate(config, n_pixels=2, max_workers=1)

    assert "trace" not in outputs.paths
    assert outputs.paths["events_csv_1"].name == "events_1.csv"
    assert outputs.paths["events_bin_0"].name == "events_0.bin"
    assert outputs.summary["n_pixels"] == 2
    assert "events_pixel_1" in outputs.summary


def test_sweep_threshold(sim_config: SimConfig) -> None:
    frame = run_sweep_threshold(sim_config)

    assert len(frame) == 6
    assert set(frame["mode"]) == {"naive", "fpt", "reference"}
    assert set(RATE_COLUMNS) <= set(frame.columns)
    for _, rows in frame.groupby("mode"):
        rates = rows.sort_values("theta_sigma")["rate"].to_numpy()
        assert rates[0] >= rates[-1]
    assert frame.loc[frame["mode"] == "reference", "ts_fc"].eq(0.05).all()
    np.testing.assert_allclose(frame["theta_v"], frame["theta_sigma"] * 1e-3 * 20.0)
    assert sim_config.outputs.path("sweep_threshold_csv").exists()


def test_sweep_threshold_far_threshold_is_silent(sim_config: SimConfig) -> None:
    frame = run_sweep_threshold(sim_config, [10.0], modes=("naive", "fpt"))

    assert (frame["rate"] == 0).all()
    assert (frame["rate_se"] == 0).all()


def test_sweep_argument_checks(sim_config: SimConfig) -> None:
    with pytest.raises(ValueError, match="empty"):
        run_sweep_threshold(sim_config, [])
    with pytest.raises(ValueError, match="mode"):
        run_sweep_threshold(sim_config, [1.0], modes=("exact",))
    with pytest.raises(ValueError, match="empty"):
        run_sweep_timestep(sim_config, [])


def test_sweep_timestep(sim_config: SimConfig) -> None:
    frame = run_sweep_timestep(sim_config)

    assert len(frame) == 4
    assert list(frame["ts_fc"]) == [0.05, 0.05, 0.5, 0.5]
    assert list(frame["mode"]) == ["naive", "fpt", "naive", "fpt"]
    np.testing.assert_allclose(frame["T_s"], frame["ts_fc"] / 100.0)
    rates = frame.set_index(["mode", "ts_fc"])["rate"]
    # one noise standard deviation: about a thousand events per simulated second
    assert rates[("fpt", 0.5)] > 500.0
    assert rates[("fpt", 0.5)] == pytest.approx(rates[("fpt", 0.05)], rel=0.15)
    assert rates[("naive", 0.5)] <= 0.5 * rates[("fpt", 0.5)]


def test_bench(sim_config: SimConfig) -> None:
    frame = run_bench(sim_config)

    assert list(frame["mode"]) == ["naive", "fpt"]
    assert (frame["steps"] == 40).all()
    assert (frame["wall_s"] > 0).all()
    assert (frame["throughput"] > 0).all()
    np.testing.assert_allclose(frame["simulated_s"], 40 * frame["T_s"])
    assert frame["host"].str.contains("numpy").all()


def test_bench_points_cover_the_same_simulated_time(sim_config: SimConfig) -> None:
    frame = run_bench(sim_config, [0.05, 0.5], modes=("fpt",))

    assert list(frame["steps"]) == [400, 40]
    np.testing.assert_allclose(frame["simulated_s"], frame["simulated_s"].iloc[0])


def test_coarse_fpt_outpaces_fine_naive(sim_config: SimConfig) -> None:
    fine = run_bench(sim_config, [0.0005], modes=("naive",))
    coarse = run_bench(sim_config, [0.5], modes=("fpt",))

    speedup = float(coarse["throughput"].iloc[0] / fine["throughput"].iloc[0])
    assert speedup >= 50.0
    assert int(coarse["events"].iloc[0]) > 0


def test_psd_export(sim_config: SimConfig) -> None:
    frame = run_psd(sim_config)

    assert len(frame) == 512
    assert (frame["f_hz"] > 0).all()
    for source in ("I_pd", "I_pr", "I_sf"):
        assert f"synth_{source}" in frame.columns
        assert f"model_{source}" in frame.columns
    band = frame[(frame["f_hz"] > 200) & (frame["f_hz"] < 5000)]
    ratio = band["psd_v2_per_hz"] / band["model_psd_v2_per_hz"]
    assert 0.5 < float(np.median(ratio)) < 2.0


def test_psd_requires_noise(sim_config: SimConfig) -> None:
    config = replace(sim_config, simulation=replace(sim_config.simulation, noise=False))
    with pytest.raises(ValueError, match="noise"):
        run_psd(config)


def test_fit_synthetic(sim_config: SimConfig) -> None:
    result = run_fit_psd(sim_config, synthetic=True)

    assert result.params.C_pd == pytest.approx(sim_config.pixel.C_pd, rel=0.05)
    assert result.params.C_sf == pytest.approx(sim_config.pixel.C_sf, rel=0.05)

    params_text = sim_config.outputs.path("fit_params_yaml").read_text(encoding="utf-8")
    document = yaml.safe_load(params_text)
    assert document["fit"]["free"] == ["C_pd", "C_sf"]
    assert document["pixel"]["C_pd"] == pytest.approx(result.params.C_pd)
    overlay = pd.read_csv(sim_config.outputs.path("fit_overlay_csv"))
    assert overlay["label"].nunique() == 3


def test_fit_measured(
    sim_config: SimConfig, measured_psd_path: Path, bias_point: BiasPoint
) -> None:
    measurement = FitMeasurement(path=measured_psd_path, bias=bias_point, label="dark")
    config = replace(
        sim_config,
        fit=replace(sim_config.fit, measurements=(measurement,), free=("C_pd",)),
    )

    result = run_fit_psd(config)

    assert result.residual < 0.02
    overlay = pd.read_csv(config.outputs.path("fit_overlay_csv"))
    assert set(overlay["label"]) == {"dark"}
    assert len(overlay) == 40


def test_fit_without_measurements(sim_config: SimConfig) -> None:
    with pytest.raises(ValueError, match="measurements"):
        run_fit_psd(sim_config)


@pytest.fixture()
def config_file(test_config: Dict[str, Any], tmp_path: Path) -> Path:
    test_config["outputs"]["dir"] = "out"
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(test_config), encoding="utf-8")
    return path


def test_cli_simulate(config_file: Path) -> None:
    assert main(["simulate", "--config", str(config_file)]) == 0

    out_dir = config_file.parent / "out"
    assert (out_dir / "events.csv").exists()
    assert (out_dir / "events.bin").exists()
    assert read_summary(out_dir / "summary.txt")["mode"] == "fpt"


def test_cli_reports_errors(config_file: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["fit-psd", "--config", str(config_file)]) == 1
    assert "error:" in capsys.readouterr().err

    assert main(["simulate", "--config", str(config_file.parent / "absent.yaml")]) == 1
