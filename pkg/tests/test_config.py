from __future__ import annotations

from pathlib import Path
from textwrap import dedent
from typing import Any, Dict

import pytest
import yaml

from library.config import SEED_ENV_VAR, build_sim_config, load_config, load_sim_config
from library.validators import ParameterDomainError


def test_load_config_handles_windows_paths(tmp_path: Path) -> None:
    config_text = dedent(
        r"""
        waveform:
          path: "C:\projects\dvs\data\waveform.csv"
        outputs:
          line_terminator: "\n"
        """
    )
    config_file = tmp_path / "config.yaml"
    config_file.write_text(config_text, encoding="utf-8")

    config = load_config(config_file)

    assert config["waveform"]["path"] == r"C:\projects\dvs\data\waveform.csv"
    assert config["outputs"]["line_terminator"] == "\n"


def test_load_config_repairs_unescaped_backslashes(tmp_path: Path) -> None:
    config_text = dedent(
        r"""
        fit:
          measurements:
            - path: "data\psd\dark.csv"
        """
    )
    config_file = tmp_path / "config.yaml"
    config_file.write_text(config_text, encoding="utf-8")

    config = load_config(config_file)

    assert config["fit"]["measurements"][0]["path"] == r"data\psd\dark.csv"


def test_load_config_leaves_other_escapes_alone(tmp_path: Path) -> None:
    config_text = dedent(
        r"""
        waveform:
          path: "C:\data\step.csv"
        outputs:
          label: "dark\q"
        """
    )
    config_file = tmp_path / "config.yaml"
    config_file.write_text(config_text, encoding="utf-8")

    with pytest.raises(ValueError, match="simulator config") as excinfo:
        load_config(config_file)

    assert isinstance(excinfo.value.__cause__, yaml.YAMLError)


def test_load_config_raises_original_error(tmp_path: Path) -> None:
    config_file = tmp_path / "config.yaml"
    config_file.write_text("pixel: [", encoding="utf-8")

    with pytest.raises(yaml.YAMLError):
        load_config(config_file)


def test_build_sim_config_applies_defaults(test_config: Dict[str, Any], tmp_path: Path) -> None:
    config = build_sim_config(test_config, base_dir=tmp_path, env={})

    assert config.simulation.T_s == pytest.approx(1e-5)
    assert config.simulation.seed == 7
    assert config.simulation.refresh_threshold == pytest.approx(0.01)
    assert config.comparator.mode == "fpt"
    assert config.comparator.refractory == 0.0
    assert config.comparator.max_depth == 16
    assert config.noise.flicker_coeff is None
    assert config.fpt.resolution == pytest.approx(1.0 / 1024.0)
    assert config.sweep.theta_sigma == (1.0, 3.0)
    assert config.fit.free == ("C_pd", "C_sf")
    assert config.outputs.path("summary") == tmp_path / "output" / "summary.txt"


def test_seed_environment_override(test_config: Dict[str, Any], tmp_path: Path) -> None:
    config = build_sim_config(test_config, base_dir=tmp_path, env={SEED_ENV_VAR: "123"})
    assert config.simulation.seed == 123

    with pytest.raises(ValueError, match=SEED_ENV_VAR):
        build_sim_config(test_config, base_dir=tmp_path, env={SEED_ENV_VAR: "abc"})


def test_unknown_key_rejected(test_config: Dict[str, Any], tmp_path: Path) -> None:
    test_config["comparator"]["theta"] = 0.3
    with pytest.raises(ValueError, match="comparator"):
        build_sim_config(test_config, base_dir=tmp_path, env={})


def test_invalid_values_rejected(test_config: Dict[str, Any], tmp_path: Path) -> None:
    bad_duration = {**test_config, "simulation": {"T_s": 1e-3, "duration": 1e-4}}
    with pytest.raises(ValueError, match="duration"):
        build_sim_config(bad_duration, base_dir=tmp_path, env={})

    bad_mode = {**test_config, "comparator": {"mode": "exact"}}
    with pytest.raises(ValueError):
        build_sim_config(bad_mode, base_dir=tmp_path, env={})

    bad_bias = {**test_config, "bias": {"I_pd": 0.0, "I_pr": 1e-9, "I_sf": 1e-9}}
    with pytest.raises(ParameterDomainError):
        build_sim_config(bad_bias, base_dir=tmp_path, env={})

    bad_kappa = {**test_config, "pixel": {**test_config["pixel"], "kappa_fb": 1.5}}
    with pytest.raises(ParameterDomainError):
        build_sim_config(bad_kappa, base_dir=tmp_path, env={})

    bad_bench = {**test_config, "bench": {"duration_fc": 0.0}}
    with pytest.raises(ValueError, match="bench.duration_fc"):
        build_sim_config(bad_bench, base_dir=tmp_path, env={})

    bad_warmup = {**test_config, "bench": {"warmup_steps": -1}}
    with pytest.raises(ValueError, match="warmup_steps"):
        build_sim_config(bad_warmup, base_dir=tmp_path, env={})


def test_missing_pixel_parameter(test_config: Dict[str, Any], tmp_path: Path) -> None:
    del test_config["pixel"]["C_pd"]
    with pytest.raises(ValueError, match="Incomplete"):
        build_sim_config(test_config, base_dir=tmp_path, env={})


def test_referenced_files_must_exist(test_config: Dict[str, Any], tmp_path: Path) -> None:
    test_config["waveform"] = {"kind": "csv", "path": "missing.csv"}
    with pytest.raises(FileNotFoundError, match="missing.csv"):
        build_sim_config(test_config, base_dir=tmp_path, env={})


def test_load_sim_config_resolves_relative_paths(
    test_config: Dict[str, Any], tmp_path: Path
) -> None:
    (tmp_path / "wave.csv").write_text("t_s,i_pd_a\n0,1e-13\n", encoding="utf-8")
    test_config["waveform"] = {"kind": "csv", "path": "wave.csv"}
    config_file = tmp_path / "config.yaml"
    config_file.write_text(yaml.safe_dump(test_config), encoding="utf-8")

    config = load_sim_config(config_file, env={})

    assert config.waveform.path == tmp_path / "wave.csv"
    assert config.outputs.dir == tmp_path / "output"


def test_repository_config_is_valid(monkeypatch: pytest.MonkeyPatch) -> None:
    root = Path(__file__).resolve().parents[1]
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    config = load_sim_config(root / "config.yaml")

    assert config.pixel.kappa_fb == pytest.approx(0.7)
    assert config.comparator.reset_includes_noise is False
    assert config.outputs.line_terminator == "\n"
