"""Small-signal photoreceptor and source-follower model of a DVS pixel.

All transistors are assumed to operate in weak inversion, so that
``gm = kappa * I / U_T`` and ``gs = I / U_T``. The photoreceptor transfer
functions ``Zm = Vpr / Ipd`` and ``Zout = Vpr / Ipr`` are second order, the
source-follower ``Asf = Vsf / Vpr`` and ``ZoutSf = Vsf / Isf`` first order.
Transfer functions are expressed as ``(num, den)`` polynomials in descending
powers of ``s`` so that they plug directly into :mod:`scipy.signal`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Callable, Dict, Mapping

import numpy as np
from scipy import integrate, signal

from .validators import ParameterDomainError, ensure_positive, ensure_unit_interval

logger = logging.getLogger(__name__)

ELECTRON_CHARGE = 1.602176634e-19
THERMAL_VOLTAGE_300K = 0.02585
PHOTOCURRENT_FLOOR = 1e-16
OU_POLE_RATIO = 3.0

TF_KINDS = ("Zm", "Zout", "Asf", "ZoutSf")
NOISE_SOURCES = ("I_pd", "I_pr", "I_sf")


@dataclass(frozen=True)
class PixelParams:
    C_pd: float
    C_fb: float
    C_pr: float
    C_sf: float
    kappa_fb: float
    kappa_amp_n: float
    kappa_sf: float
    V_A_amp_n: float
    V_A_amp_p: float
    U_T: float = THERMAL_VOLTAGE_300K
    q_e: float = ELECTRON_CHARGE

    def __post_init__(self) -> None:
        ensure_positive(
            {
                "C_pd": self.C_pd,
                "C_fb": self.C_fb,
                "C_pr": self.C_pr,
                "C_sf": self.C_sf,
                "V_A_amp_n": self.V_A_amp_n,
                "V_A_amp_p": self.V_A_amp_p,
                "U_T": self.U_T,
                "q_e": self.q_e,
            },
            "PixelParams",
        )
        ensure_unit_interval(
            {
                "kappa_fb": self.kappa_fb,
                "kappa_amp_n": self.kappa_amp_n,
                "kappa_sf": self.kappa_sf,
            },
            "PixelParams",
        )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "PixelParams":
        known = {field.name for field in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"Unknown pixel parameters: {unknown}")
        return cls(**{key: float(value) for key, value in mapping.items()})

    def to_mapping(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class BiasPoint:
    """Photocurrent and bias currents in ampere.

    Zero currents are representable so that noise terms can be switched off;
    :func:`compute_operating_point` rejects them.
    """

    I_pd: float
    I_pr: float
    I_sf: float

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "BiasPoint":
        return cls(
            I_pd=float(mapping["I_pd"]),
            I_pr=float(mapping["I_pr"]),
            I_sf=float(mapping["I_sf"]),
        )

    def with_photocurrent(self, i_pd: float) -> "BiasPoint":
        return replace(self, I_pd=i_pd)

    def clamped(self, floor: float = PHOTOCURRENT_FLOOR) -> "BiasPoint":
        if self.I_pd >= floor:
            return self
        logger.debug("Clamping photocurrent", extra={"I_pd": self.I_pd, "floor": floor})
        return replace(self, I_pd=floor)

    def scaled(self, factor: float) -> "BiasPoint":
        return BiasPoint(self.I_pd * factor, self.I_pr * factor, self.I_sf * factor)


@dataclass(frozen=True)
class OperatingPoint:
    gm_fb: float
    gs_fb: float
    gm_amp_n: float
    gs_sf: float
    R_out: float
    A_loop: float
    Zm_dc: float
    Zout_dc: float
    w_z_Zm: float
    w_z_Zout: float
    w0: float
    zeta: float
    den_a2: float
    den_a1: float
    tau_pd: float
    tau_pr: float
    tau_sf: float
    tau_pr_dominant: float
    tau_pr_secondary: float
    kappa_sf: float
    q_e: float

    @property
    def time_constants(self) -> tuple[float, ...]:
        """Closed-loop photoreceptor and source-follower time constants, largest first."""

        return tuple(
            sorted(
                (self.tau_pr_dominant, self.tau_pr_secondary, self.tau_sf),
                reverse=True,
            )
        )


@dataclass(frozen=True)
class TransferFunction:
    num: tuple[float, ...]
    den: tuple[float, ...]

    @property
    def dc_gain(self) -> float:
        return self.num[-1] / self.den[-1]

    def poles(self) -> np.ndarray:
        if len(self.den) < 2:
            return np.empty(0, dtype=complex)
        return np.roots(self.den)


def loop_gain(params: PixelParams, bias: BiasPoint) -> float:
    """``A_loop`` does not depend on the photocurrent in weak inversion."""

    gm_amp_n = params.kappa_amp_n * bias.I_pr / params.U_T
    r_out = _output_resistance(params, bias.I_pr)
    return gm_amp_n * r_out * params.kappa_fb


def transimpedance_dc(params: PixelParams, bias: BiasPoint, i_pd: float) -> float:
    """DC value of ``Zm`` at photocurrent ``i_pd``."""

    a_loop = loop_gain(params, bias)
    gm_fb = params.kappa_fb * i_pd / params.U_T
    return a_loop / (gm_fb * (a_loop + 1.0))


def _output_resistance(params: PixelParams, i_pr: float) -> float:
    v_n = params.V_A_amp_n
    v_p = params.V_A_amp_p
    return v_n * v_p / (i_pr * (v_n + v_p))


def compute_operating_point(params: PixelParams, bias: BiasPoint) -> OperatingPoint:
    ensure_positive(
        {"I_pd": bias.I_pd, "I_pr": bias.I_pr, "I_sf": bias.I_sf}, "BiasPoint"
    )
    u_t = params.U_T

    gm_fb = params.kappa_fb * bias.I_pd / u_t
    gs_fb = bias.I_pd / u_t
    gm_amp_n = params.kappa_amp_n * bias.I_pr / u_t
    gs_sf = bias.I_sf / u_t
    r_out = _output_resistance(params, bias.I_pr)
    a_loop = gm_amp_n * r_out * gm_fb / gs_fb

    c_pd, c_fb, c_pr = params.C_pd, params.C_fb, params.C_pr
    tau_pd = (c_pd + (1.0 + gm_amp_n * r_out) * c_fb) / gs_fb
    # G_m_fb in the published expression is read as gm_fb.
    tau_pr = r_out * (c_pr + (1.0 - gm_fb / gs_fb) * c_fb)
    den_a2 = (c_pd * c_fb + c_pr * c_fb + c_pr * c_pd) * r_out / gs_fb / (a_loop + 1.0)
    den_a1 = (tau_pd + tau_pr) / (a_loop + 1.0)
    w0 = 1.0 / math.sqrt(den_a2)

    poles = np.roots([den_a2, den_a1, 1.0])
    pole_taus = sorted((1.0 / abs(pole.real) for pole in poles), reverse=True)

    op_point = OperatingPoint(
        gm_fb=gm_fb,
        gs_fb=gs_fb,
        gm_amp_n=gm_amp_n,
        gs_sf=gs_sf,
        R_out=r_out,
        A_loop=a_loop,
        Zm_dc=(1.0 / gm_fb) * a_loop / (a_loop + 1.0),
        Zout_dc=r_out / (a_loop + 1.0),
        w_z_Zm=-gm_amp_n / c_fb,
        w_z_Zout=-gs_fb / (c_pd + c_fb),
        w0=w0,
        zeta=den_a1 * w0 / 2.0,
        den_a2=den_a2,
        den_a1=den_a1,
        tau_pd=tau_pd,
        tau_pr=tau_pr,
        tau_sf=params.C_sf / gs_sf,
        tau_pr_dominant=pole_taus[0],
        tau_pr_secondary=pole_taus[1],
        kappa_sf=params.kappa_sf,
        q_e=params.q_e,
    )
    if not (op_point.A_loop > 0 and op_point.zeta > 0 and op_point.tau_pr > 0):
        raise ParameterDomainError(f"Degenerate operating point: {op_point}")
    return op_point


def transfer_function(op_point: OperatingPoint, which: str) -> TransferFunction:
    """Continuous transfer function ``which`` at ``op_point``.

    ``Zm_norm`` is ``Zm / Zm_dc`` (unit DC gain), used by the large-signal path.
    """

    biquad = (op_point.den_a2, op_point.den_a1, 1.0)
    if which == "Zm":
        dc = op_point.Zm_dc
        return TransferFunction((dc / op_point.w_z_Zm, dc), biquad)
    if which == "Zm_norm":
        return TransferFunction((1.0 / op_point.w_z_Zm, 1.0), biquad)
    if which == "Zout":
        dc = op_point.Zout_dc
        return TransferFunction((dc / op_point.w_z_Zout, dc), biquad)
    if which == "Asf":
        return TransferFunction((op_point.kappa_sf,), (op_point.tau_sf, 1.0))
    if which == "ZoutSf":
        return TransferFunction((1.0 / op_point.gs_sf,), (op_point.tau_sf, 1.0))
    raise ValueError(f"Unknown transfer function: {which!r}")


def eval_tf(op_point: OperatingPoint, which: str, f: Any) -> Any:
    """Evaluate ``H(j 2 pi f)``; scalar in, scalar out."""

    freqs = np.asarray(f, dtype=float)
    if np.any(freqs < 0):
        raise ValueError("Frequencies must be non-negative")
    tf = transfer_function(op_point, which)
    _, response = signal.freqs(tf.num, tf.den, worN=np.atleast_1d(2.0 * np.pi * freqs))
    if freqs.ndim == 0:
        return complex(response[0])
    return response.reshape(freqs.shape)


@dataclass(frozen=True)
class NoisePsd:
    f: np.ndarray
    terms: Dict[str, np.ndarray]
    flicker: np.ndarray | None = None

    @property
    def total(self) -> np.ndarray:
        total = sum(self.terms.values())
        if self.flicker is not None:
            total = total + self.flicker
        return np.asarray(total)


def eval_noise_psd(
    op_point: OperatingPoint,
    bias: BiasPoint,
    f: Any,
    *,
    flicker_coeff: float | None = None,
) -> NoisePsd:
    """One-sided shot-noise PSD at ``Vsf`` in V^2/Hz with its per-source terms."""

    freqs = np.atleast_1d(np.asarray(f, dtype=float))
    four_q = 4.0 * op_point.q_e
    asf2 = np.abs(eval_tf(op_point, "Asf", freqs)) ** 2
    terms = {
        "I_pd": four_q * bias.I_pd * np.abs(eval_tf(op_point, "Zm", freqs)) ** 2 * asf2,
        "I_pr": four_q * bias.I_pr * np.abs(eval_tf(op_point, "Zout", freqs)) ** 2 * asf2,
        "I_sf": four_q * bias.I_sf * np.abs(eval_tf(op_point, "ZoutSf", freqs)) ** 2,
    }
    flicker = None
    if flicker_coeff:
        flicker = np.divide(
            flicker_coeff, freqs, out=np.zeros_like(freqs), where=freqs > 0
        )
    return NoisePsd(f=freqs, terms=terms, flicker=flicker)


@dataclass(frozen=True)
class OuReduction:
    sigma: float
    f_c: float
    ou_valid: bool
    pole_ratio: float


def reduce_to_ou(
    psd: Callable[[np.ndarray], Any],
    op_point: OperatingPoint,
    *,
    f_min: float = 1e-2,
    points_per_decade: int = 64,
    pole_ratio_threshold: float = OU_POLE_RATIO,
) -> OuReduction:
    """Reduce a noise PSD to an Ornstein-Uhlenbeck process.

    ``sigma`` is the square root of the integrated PSD, computed with a
    log-spaced trapezoid over ``[f_min, 1e3 * f_highest_pole]``; the band below
    ``f_min`` is added as a flat strip. ``f_c`` is the corner of the slowest
    closed-loop pole of ``op_point``, not the larger of the open-loop
    ``tau_pd`` and ``tau_sf``.
    """

    taus = op_point.time_constants
    pole_ratio = taus[0] / taus[1]
    ou_valid = pole_ratio >= pole_ratio_threshold
    if not ou_valid:
        logger.warning(
            "No dominant noise pole; OU reduction is approximate",
            extra={"pole_ratio": pole_ratio},
        )

    f_high = 1e3 / (2.0 * math.pi * taus[-1])
    decades = math.log10(f_high / f_min)
    n_points = max(int(math.ceil(decades * points_per_decade)) + 1, 2)
    grid = np.logspace(math.log10(f_min), math.log10(f_high), n_points)
    values = psd(grid)
    density = np.asarray(getattr(values, "total", values), dtype=float)

    variance = integrate.trapezoid(density * grid, np.log(grid)) + density[0] * f_min
    return OuReduction(
        sigma=math.sqrt(max(variance, 0.0)),
        f_c=1.0 / (2.0 * math.pi * taus[0]),
        ou_valid=ou_valid,
        pole_ratio=pole_ratio,
    )


@dataclass(frozen=True)
class NoiseModel:
    op_point: OperatingPoint
    bias: BiasPoint
    sigma: float
    f_c: float
    ou_valid: bool
    pole_ratio: float
    flicker_coeff: float | None = None

    def psd(self, f: Any) -> NoisePsd:
        return eval_noise_psd(self.op_point, self.bias, f, flicker_coeff=self.flicker_coeff)


def build_noise_model(
    params: PixelParams,
    bias: BiasPoint,
    *,
    flicker_coeff: float | None = None,
) -> NoiseModel:
    op_point = compute_operating_point(params, bias)
    reduction = reduce_to_ou(
        lambda f: eval_noise_psd(op_point, bias, f, flicker_coeff=flicker_coeff).total,
        op_point,
    )
    logger.debug(
        "Built noise model",
        extra={"sigma": reduction.sigma, "f_c": reduction.f_c, "I_pd": bias.I_pd},
    )
    return NoiseModel(
        op_point=op_point,
        bias=bias,
        sigma=reduction.sigma,
        f_c=reduction.f_c,
        ou_valid=reduction.ou_valid,
        pole_ratio=reduction.pole_ratio,
        flicker_coeff=flicker_coeff,
    )


__all__ = [
    "BiasPoint",
    "ELECTRON_CHARGE",
    "NOISE_SOURCES",
    "NoiseModel",
    "NoisePsd",
    "OperatingPoint",
    "OuReduction",
    "PHOTOCURRENT_FLOOR",
    "PixelParams",
    "TF_KINDS",
    "TransferFunction",
    "build_noise_model",
    "compute_operating_point",
    "eval_noise_psd",
    "eval_tf",
    "loop_gain",
    "reduce_to_ou",
    "transfer_function",
    "transimpedance_dc",
]
