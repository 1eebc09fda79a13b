"""Least-squares fitting of pixel parameters to measured noise PSD curves."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Sequence

import numpy as np
from scipy import optimize

from .circuit import BiasPoint, PixelParams, compute_operating_point, eval_noise_psd
from .validators import ParameterDomainError

logger = logging.getLogger(__name__)

# Box constraints on physically plausible ranges.
PARAM_BOUNDS: Dict[str, tuple[float, float]] = {
    "C_pd": (1e-16, 1e-12),
    "C_fb": (1e-17, 1e-13),
    "C_pr": (1e-16, 1e-12),
    "C_sf": (1e-16, 1e-12),
    "kappa_fb": (0.3, 1.0),
    "kappa_amp_n": (0.3, 1.0),
    "kappa_sf": (0.3, 1.0),
    "V_A_amp_n": (0.5, 500.0),
    "V_A_amp_p": (0.5, 500.0),
    "U_T": (0.02, 0.035),
}

MIN_SAMPLES = 10
MIN_DECADES = 2.0


@dataclass(frozen=True)
class PsdCondition:
    """Measured PSD samples for one (illuminance, bias) condition."""

    bias: BiasPoint
    f: np.ndarray
    psd: np.ndarray
    label: str = ""


@dataclass(frozen=True)
class FitResult:
    """Best parameters found; ``history`` is the RMS log residual of every model evaluation."""

    params: PixelParams
    residual: float
    history: tuple[float, ...]
    n_evaluations: int
    success: bool
    message: str = ""


class FitError(RuntimeError):
    """Raised when the fit does not converge; ``best`` holds the best-so-far result."""

    def __init__(self, message: str, best: FitResult) -> None:
        super().__init__(message)
        self.best = best


def _check_condition(condition: PsdCondition) -> None:
    f = np.asarray(condition.f, dtype=float)
    psd = np.asarray(condition.psd, dtype=float)
    if f.shape != psd.shape:
        raise ValueError(f"Condition '{condition.label}': f and psd differ in shape")
    if f.size < MIN_SAMPLES:
        raise ValueError(
            f"Condition '{condition.label}' has {f.size} samples, need {MIN_SAMPLES}"
        )
    if np.any(f <= 0) or np.any(psd <= 0):
        raise ValueError(f"Condition '{condition.label}' has non-positive samples")
    span = math.log10(f.max() / f.min())
    if span < MIN_DECADES:
        raise ValueError(
            f"Condition '{condition.label}' spans {span:.2f} decades, need {MIN_DECADES}"
        )


def model_log_psd(
    params: PixelParams,
    condition: PsdCondition,
    flicker_coeff: float | None = None,
) -> np.ndarray:
    op_point = compute_operating_point(params, condition.bias)
    model = eval_noise_psd(op_point, condition.bias, condition.f, flicker_coeff=flicker_coeff)
    return np.log10(model.total)


def log_residuals(
    params: PixelParams,
    measured: Sequence[PsdCondition],
    flicker_coeff: float | None = None,
) -> np.ndarray:
    parts = [
        model_log_psd(params, condition, flicker_coeff) - np.log10(condition.psd)
        for condition in measured
    ]
    return np.concatenate(parts)


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values**2)))


def fit_psd_params(
    measured: Sequence[PsdCondition],
    initial: PixelParams,
    free: Iterable[str],
    *,
    max_evaluations: int = 400,
    flicker_coeff: float | None = None,
    bounds: Dict[str, tuple[float, float]] | None = None,
) -> FitResult:
    """Fit the ``free`` parameters of ``initial`` to ``measured`` PSD curves.

    The residual is ``log10(model) - log10(measured)`` over every sample of
    every condition. Parameters are optimised in log space with box
    constraints by a trust-region reflective least-squares solver.
    """

    if not measured:
        raise ValueError("At least one measured condition is required")
    for condition in measured:
        _check_condition(condition)

    free_names = list(dict.fromkeys(free))
    box = {**PARAM_BOUNDS, **(bounds or {})}
    unknown = [name for name in free_names if name not in box]
    if unknown:
        raise ValueError(f"Parameters cannot be fitted: {unknown}")

    if not free_names:
        residual = _rms(log_residuals(initial, measured, flicker_coeff))
        return FitResult(initial, residual, (residual,), 1, True, "no free parameters")

    initial_values = initial.to_mapping()
    for name in free_names:
        low, high = box[name]
        if not low <= initial_values[name] <= high:
            raise ParameterDomainError(
                f"Initial '{name}'={initial_values[name]!r} outside [{low}, {high}]"
            )

    lower = np.log([box[name][0] for name in free_names])
    upper = np.log([box[name][1] for name in free_names])
    x0 = np.log([initial_values[name] for name in free_names])

    history: list[float] = []
    best: dict[str, object] = {"cost": math.inf, "x": x0}

    def unpack(x: np.ndarray) -> PixelParams:
        values = dict(zip(free_names, np.exp(x)))
        # kappa bounds touch 1.0; keep rounding from leaving the unit interval
        for name in ("kappa_fb", "kappa_amp_n", "kappa_sf"):
            if name in values:
                values[name] = min(values[name], 1.0)
        return replace(initial, **values)

    def residuals(x: np.ndarray) -> np.ndarray:
        values = log_residuals(unpack(x), measured, flicker_coeff)
        cost = _rms(values)
        # every call, finite-difference Jacobian evaluations included
        history.append(cost)
        if cost < best["cost"]:
            best["cost"] = cost
            best["x"] = np.array(x)
        return values

    solution = optimize.least_squares(
        residuals,
        x0,
        bounds=(lower, upper),
        method="trf",
        x_scale="jac",
        max_nfev=max_evaluations,
    )

    best_params = unpack(np.asarray(best["x"]))
    result = FitResult(
        params=best_params,
        residual=float(best["cost"]),
        history=tuple(history),
        n_evaluations=int(solution.nfev),
        success=bool(solution.success) and solution.status > 0,
        message=str(solution.message),
    )
    logger.info(
        "PSD fit finished",
        extra={"residual": result.residual, "nfev": result.n_evaluations, "free": free_names},
    )
    if solution.status == 0:
        raise FitError(
            f"PSD fit did not converge within {max_evaluations} evaluations", result
        )
    return result


def synthesize_psd_samples(
    params: PixelParams,
    bias: BiasPoint,
    f: np.ndarray,
    *,
    rel_noise: float = 0.0,
    seed: int = 0,
    flicker_coeff: float | None = None,
    label: str = "",
) -> PsdCondition:
    """Model PSD at ``f`` with multiplicative log-normal scatter of ``rel_noise``."""

    op_point = compute_operating_point(params, bias)
    psd = eval_noise_psd(op_point, bias, f, flicker_coeff=flicker_coeff).total
    if rel_noise:
        rng = np.random.default_rng(seed)
        psd = psd * np.exp(rel_noise * rng.standard_normal(psd.shape))
    return PsdCondition(bias=bias, f=np.asarray(f, dtype=float), psd=psd, label=label)


__all__ = [
    "FitError",
    "FitResult",
    "PARAM_BOUNDS",
    "PsdCondition",
    "fit_psd_params",
    "log_residuals",
    "model_log_psd",
    "synthesize_psd_samples",
]
