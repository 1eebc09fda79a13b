from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from library.circuit import (
    BiasPoint,
    OperatingPoint,
    PixelParams,
    build_noise_model,
    compute_operating_point,
    eval_noise_psd,
    eval_tf,
    reduce_to_ou,
    transfer_function,
)
from library.validators import ParameterDomainError


def test_weak_inversion_conductances(pixel_params: PixelParams) -> None:
    bias = BiasPoint(I_pd=1e-9, I_pr=1e-9, I_sf=1e-9)
    op = compute_operating_point(pixel_params, bias)

    assert op.gm_amp_n == pytest.approx(27.08e-9, rel=1e-3)
    assert op.gm_fb == pytest.approx(27.08e-9, rel=1e-3)
    assert op.gs_fb == pytest.approx(1e-9 / 0.02585)
    assert op.R_out == pytest.approx(1.0e10)


def test_loop_gain_definition(operating_point: OperatingPoint) -> None:
    op = operating_point
    assert op.A_loop == pytest.approx(op.gm_amp_n * op.R_out * op.gm_fb / op.gs_fb, rel=1e-14)
    assert op.Zm_dc == pytest.approx(op.A_loop / (op.gm_fb * (op.A_loop + 1.0)))
    assert op.zeta > 0 and op.w0 > 0


def test_transimpedance_tends_to_inverse_gm(
    pixel_params: PixelParams,
    bias_point: BiasPoint,
) -> None:
    stiff = replace(pixel_params, V_A_amp_n=1e6, V_A_amp_p=1e6)
    op = compute_operating_point(stiff, bias_point)

    assert op.A_loop > 1e5
    assert op.Zm_dc == pytest.approx(1.0 / op.gm_fb, rel=1e-4)


def test_dc_gains(operating_point: OperatingPoint, pixel_params: PixelParams) -> None:
    op = operating_point
    assert eval_tf(op, "Zm", 0.0) == pytest.approx(op.Zm_dc)
    assert eval_tf(op, "Zout", 0.0) == pytest.approx(op.Zout_dc)
    assert eval_tf(op, "Asf", 0.0) == pytest.approx(pixel_params.kappa_sf)
    assert eval_tf(op, "ZoutSf", 0.0) == pytest.approx(1.0 / op.gs_sf)


def test_source_follower_corner(operating_point: OperatingPoint, pixel_params: PixelParams) -> None:
    corner = operating_point.gs_sf / (2.0 * math.pi * pixel_params.C_sf)
    gain = abs(eval_tf(operating_point, "Asf", corner))
    assert gain == pytest.approx(pixel_params.kappa_sf / math.sqrt(2.0), rel=1e-9)


def test_eval_tf_rejects_negative_frequency(operating_point: OperatingPoint) -> None:
    with pytest.raises(ValueError):
        eval_tf(operating_point, "Zm", -1.0)
    with pytest.raises(ValueError, match="Unknown"):
        transfer_function(operating_point, "Zx")


def test_transfer_functions_are_stable(operating_point: OperatingPoint) -> None:
    for which in ("Zm", "Zout", "Asf", "ZoutSf"):
        poles = transfer_function(operating_point, which).poles()
        assert np.all(poles.real < 0)


def test_photodiode_pole_dominates_when_dark(pixel_params: PixelParams) -> None:
    op = compute_operating_point(pixel_params, BiasPoint(I_pd=1e-12, I_pr=1e-9, I_sf=1e-9))
    assert op.tau_pd / op.tau_pr > 10


def test_operating_point_rejects_zero_current(pixel_params: PixelParams) -> None:
    with pytest.raises(ParameterDomainError):
        compute_operating_point(pixel_params, BiasPoint(I_pd=0.0, I_pr=1e-9, I_sf=1e-9))


def test_pixel_params_validation(test_config: dict) -> None:
    with pytest.raises(ParameterDomainError, match="C_fb"):
        PixelParams.from_mapping({**test_config["pixel"], "C_fb": 0.0})
    with pytest.raises(ValueError, match="Unknown"):
        PixelParams.from_mapping({**test_config["pixel"], "C_xx": 1.0})


def test_bias_helpers(bias_point: BiasPoint) -> None:
    assert bias_point.with_photocurrent(1e-12).I_pd == 1e-12
    assert bias_point.with_photocurrent(1e-20).clamped(1e-16).I_pd == 1e-16
    assert bias_point.scaled(0.0) == BiasPoint(0.0, 0.0, 0.0)


def test_noise_psd_at_dc(
    operating_point: OperatingPoint,
    bias_point: BiasPoint,
    pixel_params: PixelParams,
) -> None:
    op = operating_point
    q = pixel_params.q_e
    kappa_sf = pixel_params.kappa_sf
    expected = (
        4 * q * bias_point.I_pd * op.Zm_dc**2 * kappa_sf**2
        + 4 * q * bias_point.I_pr * op.Zout_dc**2 * kappa_sf**2
        + 4 * q * bias_point.I_sf / op.gs_sf**2
    )
    psd = eval_noise_psd(op, bias_point, 0.0)
    assert psd.total[0] == pytest.approx(expected, rel=1e-12)


def test_noise_psd_vanishes_without_current(
    operating_point: OperatingPoint,
    bias_point: BiasPoint,
) -> None:
    psd = eval_noise_psd(operating_point, bias_point.scaled(0.0), np.logspace(0, 5, 20))
    assert np.all(psd.total == 0.0)


def test_noise_psd_scales_with_current(
    operating_point: OperatingPoint,
    bias_point: BiasPoint,
) -> None:
    f = np.logspace(0, 5, 20)
    base = eval_noise_psd(operating_point, bias_point, f).terms["I_pd"]
    doubled = eval_noise_psd(
        operating_point, bias_point.with_photocurrent(2 * bias_point.I_pd), f
    ).terms["I_pd"]
    np.testing.assert_allclose(doubled, 2.0 * base, rtol=1e-12)


def test_noise_psd_decreases_above_highest_pole(
    operating_point: OperatingPoint,
    bias_point: BiasPoint,
) -> None:
    f_top = 1.0 / (2.0 * math.pi * operating_point.time_constants[-1])
    f = np.logspace(math.log10(2 * f_top), math.log10(1e3 * f_top), 50)
    psd = eval_noise_psd(operating_point, bias_point, f).total

    assert np.all(psd >= 0)
    assert np.all(np.diff(psd) < 0)


def test_flicker_term_is_optional(operating_point: OperatingPoint, bias_point: BiasPoint) -> None:
    f = np.array([1.0, 10.0])
    plain = eval_noise_psd(operating_point, bias_point, f)
    flicker = eval_noise_psd(operating_point, bias_point, f, flicker_coeff=1e-10)

    assert plain.flicker is None
    np.testing.assert_allclose(flicker.total - plain.total, [1e-10, 1e-11])


def test_ou_reduction_of_lorentzian(operating_point: OperatingPoint) -> None:
    f0 = 1.0 / (2.0 * math.pi * operating_point.time_constants[0])
    s0 = 1e-9

    reduction = reduce_to_ou(lambda f: s0 / (1.0 + (f / f0) ** 2), operating_point)

    assert reduction.sigma**2 == pytest.approx(s0 * math.pi * f0 / 2.0, rel=1e-2)
    assert reduction.f_c == pytest.approx(f0)


def test_ou_reduction_of_zero_psd(operating_point: OperatingPoint) -> None:
    reduction = reduce_to_ou(lambda f: np.zeros_like(f), operating_point)
    assert reduction.sigma == 0.0


def test_ou_sigma_is_grid_independent(
    operating_point: OperatingPoint,
    bias_point: BiasPoint,
) -> None:
    def psd(f: np.ndarray) -> np.ndarray:
        return eval_noise_psd(operating_point, bias_point, f).total

    coarse = reduce_to_ou(psd, operating_point)
    fine = reduce_to_ou(psd, operating_point, points_per_decade=256)
    assert coarse.sigma == pytest.approx(fine.sigma, rel=1e-2)


def test_noise_model_flags_dominant_pole(pixel_params: PixelParams, bias_point: BiasPoint) -> None:
    model = build_noise_model(pixel_params, bias_point)

    assert model.ou_valid
    assert model.pole_ratio >= 3.0
    assert model.sigma > 0
    assert model.f_c == pytest.approx(1.0 / (2.0 * math.pi * model.op_point.time_constants[0]))


def test_noise_model_warns_without_dominant_pole(
    pixel_params: PixelParams, bias_point: BiasPoint, caplog: pytest.LogCaptureFixture
) -> None:
    # a slow source follower lands next to the photoreceptor pole
    sluggish = replace(pixel_params, C_sf=1e-12)
    bias = replace(bias_point, I_sf=5e-11)
    op = compute_operating_point(sluggish, bias)
    taus = op.time_constants

    with caplog.at_level("WARNING"):
        model = build_noise_model(sluggish, bias)

    assert model.pole_ratio == pytest.approx(taus[0] / taus[1])
    assert model.pole_ratio < 3.0
    assert not model.ou_valid
    assert "No dominant noise pole" in caplog.text
