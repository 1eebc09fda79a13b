from __future__ import annotations

import math

import numpy as np
import pytest

from library.circuit import (
    PHOTOCURRENT_FLOOR,
    BiasPoint,
    OperatingPoint,
    PixelParams,
    TransferFunction,
    eval_tf,
    transfer_function,
)
from library.discretize import (
    FilterState,
    UnstableFilterError,
    bilinear,
    frequency_response,
    init_pixel_state,
    step_signal,
)

T_S = 1e-5


@pytest.mark.parametrize("which", ["Zm", "Zout", "Asf", "ZoutSf"])
def test_bilinear_preserves_dc_gain(operating_point: OperatingPoint, which: str) -> None:
    tf = transfer_function(operating_point, which)
    filt = bilinear(tf, T_S)

    assert filt.dc_gain == pytest.approx(tf.dc_gain, rel=1e-9)
    assert filt.order == len(tf.den) - 1


def test_discrete_response_matches_continuous_well_below_nyquist(
    operating_point: OperatingPoint,
) -> None:
    filt = bilinear(transfer_function(operating_point, "Zm"), T_S)
    f = np.array([1.0, 10.0, 100.0])

    discrete = frequency_response(filt, f)
    continuous = eval_tf(operating_point, "Zm", f)

    np.testing.assert_allclose(np.abs(discrete), np.abs(continuous), rtol=1e-3)


def test_step_and_process_agree(operating_point: OperatingPoint) -> None:
    samples = np.random.default_rng(5).standard_normal(300)
    stepped = bilinear(transfer_function(operating_point, "Zm_norm"), T_S)
    blocked = stepped.copy()

    expected = np.array([stepped.step(x) for x in samples])
    actual = np.concatenate([blocked.process(samples[:117]), blocked.process(samples[117:])])

    np.testing.assert_allclose(actual, expected, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(blocked.output_delay, stepped.output_delay, rtol=1e-9)


def test_retune_keeps_delay_lines(operating_point: OperatingPoint) -> None:
    filt = bilinear(transfer_function(operating_point, "Asf"), T_S)
    filt.settle(0.3)
    before_x, before_y = filt.input_delay, filt.output_delay

    other = bilinear(TransferFunction((0.5,), (2e-6, 1.0)), T_S)
    filt.retune(other.num_coeffs, other.den_coeffs)

    np.testing.assert_array_equal(filt.input_delay, before_x)
    np.testing.assert_array_equal(filt.output_delay, before_y)
    np.testing.assert_allclose(filt.den_coeffs, other.den_coeffs)

    with pytest.raises(ValueError, match="order"):
        filt.retune([1.0, 0.0, 0.0], [1.0, 0.1, 0.01])


def test_settle_gives_steady_output(operating_point: OperatingPoint) -> None:
    filt = bilinear(transfer_function(operating_point, "Zm_norm"), T_S)
    filt.settle(0.25)

    outputs = [filt.step(0.25) for _ in range(10)]

    assert outputs == pytest.approx([0.25] * 10, rel=1e-9)


def test_unstable_transfer_function_rejected() -> None:
    with pytest.raises(UnstableFilterError):
        bilinear(TransferFunction((1.0,), (1.0, -1.0)), T_S)


def test_filter_state_validation() -> None:
    with pytest.raises(ValueError, match="Leading"):
        FilterState([1.0], [0.0, 1.0], T_S)
    with pytest.raises(ValueError, match="Improper"):
        FilterState([1.0, 1.0, 1.0], [1.0, 0.5], T_S)
    with pytest.raises(ValueError, match="Delay"):
        FilterState([1.0, 1.0], [1.0, 0.5], T_S, input_delay=[0.0, 0.0])


@pytest.mark.parametrize("ratio", [2.0, 100.0, 1e4])
def test_step_follows_logarithmic_law(
    pixel_params: PixelParams,
    bias_point: BiasPoint,
    ratio: float,
) -> None:
    i0 = 1e-14
    state = init_pixel_state(pixel_params, bias_point, T_S, i0)

    step_signal(state, i0 * ratio)
    for _ in range(2000):
        step_signal(state, i0 * ratio)

    a_loop = state.op_point.A_loop
    exact = pixel_params.U_T / pixel_params.kappa_fb * a_loop / (a_loop + 1.0) * math.log(ratio)
    ideal = pixel_params.U_T / pixel_params.kappa_fb * math.log(ratio)
    assert state.w == pytest.approx(exact, rel=1e-9)
    assert state.w == pytest.approx(ideal, rel=0.02)
    assert state.v_pr == pytest.approx(state.w, rel=1e-3)
    assert state.v_sf == pytest.approx(pixel_params.kappa_sf * state.w, rel=1e-3)


def test_decade_step_gives_about_170_millivolts(
    pixel_params: PixelParams,
    bias_point: BiasPoint,
) -> None:
    state = init_pixel_state(pixel_params, bias_point, T_S, 1e-14)
    step_signal(state, 1e-12)

    assert state.w == pytest.approx(0.170, abs=0.003)


def test_target_is_path_independent(pixel_params: PixelParams, bias_point: BiasPoint) -> None:
    ramp = init_pixel_state(pixel_params, bias_point, T_S, 1e-13)
    jump = init_pixel_state(pixel_params, bias_point, T_S, 1e-13)

    for level in np.geomspace(1e-13, 1e-11, 50)[1:]:
        step_signal(ramp, float(level))
    step_signal(jump, 1e-11)

    assert ramp.w == pytest.approx(jump.w, rel=1e-9)


def test_refresh_cadence(pixel_params: PixelParams, bias_point: BiasPoint) -> None:
    state = init_pixel_state(pixel_params, bias_point, T_S, 1e-13)

    step_signal(state, 1e-13)
    assert not state.refreshed
    step_signal(state, 1.005e-13)
    assert not state.refreshed
    assert state.n_refreshes == 0

    step_signal(state, 1.02e-13)
    assert state.refreshed
    assert state.n_refreshes == 1
    assert state.i_op == pytest.approx(math.sqrt(1.005e-13 * 1.02e-13))


def test_photocurrent_is_clamped(pixel_params: PixelParams, bias_point: BiasPoint) -> None:
    state = init_pixel_state(pixel_params, bias_point, T_S, 0.0)
    assert state.i_pd == PHOTOCURRENT_FLOOR

    step_signal(state, -1e-12)
    assert state.i_pd == PHOTOCURRENT_FLOOR
    assert state.w == 0.0


def _settle_steps(trace: np.ndarray, start: float, end: float) -> int:
    progress = (trace - start) / (end - start)
    first = int(np.argmax(progress >= 0.1))
    last = int(np.argmax(progress >= 0.9))
    assert progress[last] >= 0.9
    return max(last - first, 1)


def test_falling_edge_settles_slower_than_rising_edge(
    pixel_params: PixelParams,
    bias_point: BiasPoint,
) -> None:
    state = init_pixel_state(pixel_params, bias_point, T_S, 1e-14)

    rise = np.array([step_signal(state, 1e-12).v_pr for _ in range(2000)])
    high = state.w
    fall = np.array([step_signal(state, 1e-14).v_pr for _ in range(10000)])

    assert high == pytest.approx(
        pixel_params.U_T / pixel_params.kappa_fb * math.log(100.0), rel=0.02
    )
    assert state.w == pytest.approx(0.0, abs=1e-12)
    assert fall[-1] == pytest.approx(0.0, abs=0.01 * high)
    rise_steps = _settle_steps(rise, 0.0, high)
    fall_steps = _settle_steps(fall, high, 0.0)
    assert fall_steps > 5 * rise_steps


def test_halving_timestep_converges(pixel_params: PixelParams, bias_point: BiasPoint) -> None:
    duration = 0.04

    def run(T_s: float) -> np.ndarray:
        state = init_pixel_state(pixel_params, bias_point, T_s, 1e-13)
        t = T_s * np.arange(1, int(round(duration / T_s)) + 1)
        drive = 1e-13 * np.exp(np.sin(2.0 * math.pi * 50.0 * t))
        return np.array([step_signal(state, float(i)).v_pr for i in drive])

    coarse = run(T_S)
    fine = run(T_S / 2.0)

    swing = float(np.ptp(coarse))
    assert swing > 0.05
    assert float(np.max(np.abs(fine[1::2] - coarse))) < 0.01 * swing


def test_relinearization_keeps_output_smooth(
    pixel_params: PixelParams,
    bias_point: BiasPoint,
) -> None:
    state = init_pixel_state(pixel_params, bias_point, T_S, 1e-13)
    outputs = []
    refreshed = []
    for k in range(3000):
        step_signal(state, 1e-13 * 1.0002 ** (k + 1))
        outputs.append(state.v_pr)
        refreshed.append(state.refreshed)
    v_pr = np.array(outputs)

    checked = 0
    for k in np.flatnonzero(refreshed):
        if k <= 200:
            continue
        d1 = v_pr[k - 1] - v_pr[k - 2]
        d2 = v_pr[k] - v_pr[k - 1] - d1
        assert abs(d2) <= 0.05 * abs(d1)
        checked += 1
    assert checked >= 5
