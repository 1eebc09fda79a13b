from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pandas as pd
import pytest
import yaml

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from library.circuit import BiasPoint, OperatingPoint, PixelParams, compute_operating_point
from library.config import SimConfig, build_sim_config
from library.fitting import synthesize_psd_samples

DATA_DIR = ROOT / "tests" / "data"


@pytest.fixture()
def test_config() -> Dict[str, Any]:
    config_path = DATA_DIR / "test_config.yaml"
    with config_path.open("r", encoding="utf-8") as handle:
        return yaml.safe_load(handle)


@pytest.fixture()
def sim_config(test_config: Dict[str, Any], tmp_path: Path) -> SimConfig:
    test_config["outputs"]["dir"] = str(tmp_path / "output")
    return build_sim_config(test_config, base_dir=DATA_DIR, env={})


@pytest.fixture()
def pixel_params(test_config: Dict[str, Any]) -> PixelParams:
    return PixelParams.from_mapping(test_config["pixel"])


@pytest.fixture()
def bias_point(test_config: Dict[str, Any]) -> BiasPoint:
    return BiasPoint.from_mapping(test_config["bias"])


@pytest.fixture()
def operating_point(pixel_params: PixelParams, bias_point: BiasPoint) -> OperatingPoint:
    return compute_operating_point(pixel_params, bias_point)


@pytest.fixture()
def measured_psd_path(tmp_path: Path, pixel_params: PixelParams, bias_point: BiasPoint) -> Path:
    """Model-generated PSD curve with 1% log-normal scatter in the measured-fixture format."""

    condition = synthesize_psd_samples(
        pixel_params, bias_point, np.logspace(0, 4, 40), rel_noise=0.01, seed=3
    )
    path = tmp_path / "psd_measured.csv"
    pd.DataFrame({"f_hz": condition.f, "psd_v2_per_hz": condition.psd}).to_csv(path, index=False)
    return path
