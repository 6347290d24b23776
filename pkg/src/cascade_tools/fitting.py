"""Lifetime and fine-structure-splitting fits."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit
from scipy.special import erfc, erfcx

from cascade_tools.errors import FitError, InsufficientDataError, ValidationError
from cascade_tools.histogram import CoincidenceHistogram
from cascade_tools.observability import get_logger, traced
from cascade_tools.report import Estimate

MIN_DECAY_BINS = 20
MAX_EVALUATIONS = 5000
MIN_FSS_SAMPLES = 8


def emg_density(t: np.ndarray, tau: float, sigma: float, t0: float) -> np.ndarray:
    """Unit-area exponential decay starting at t0, convolved with a Gaussian.

    Uses the scaled complementary error function where the plain closed form
    would overflow.
    """
    u = np.asarray(t, dtype=float) - t0
    if sigma <= 0:
        return np.where(u >= 0, np.exp(-np.clip(u, 0, None) / tau) / tau, 0.0)
    z = (sigma / tau - u / sigma) / math.sqrt(2)
    out = np.empty_like(u)
    upper = z >= 0
    out[upper] = erfcx(z[upper]) * np.exp(-u[upper] ** 2 / (2 * sigma**2))
    lower = ~upper
    out[lower] = np.exp(sigma**2 / (2 * tau**2) - u[lower] / tau) * erfc(z[lower])
    return out / (2 * tau)


def cascade_density(t: np.ndarray, tau: float, rise_tau: float, sigma: float, t0: float) -> np.ndarray:
    """Unit-area decay fed by a preceding decay with time constant rise_tau."""
    if abs(tau - rise_tau) < 1e-6 * tau:
        rise_tau = tau * (1 - 1e-4)
    return (tau * emg_density(t, tau, sigma, t0) - rise_tau * emg_density(t, rise_tau, sigma, t0)) / (
        tau - rise_tau
    )


@dataclass(frozen=True)
class LifetimeFit:
    tau: Estimate
    t0: float
    amplitude: float
    background: float
    reduced_chi2: float


@dataclass(frozen=True)
class FssFit:
    fss: Estimate
    offset: float
    phase: float
    residual_rms: float


def _initial_guess(centers: np.ndarray, counts: np.ndarray, bin_width: float) -> tuple[float, ...]:
    peak = int(np.argmax(counts))
    background = float(np.percentile(counts, 5))
    height = counts[peak] - background
    below = np.nonzero(counts[peak:] - background < height / math.e)[0]
    tau = below[0] * bin_width if len(below) and below[0] > 0 else (centers[-1] - centers[peak]) / 5
    amplitude = max(float(counts.sum() - background * len(counts)), 1.0)
    return (amplitude, max(tau, bin_width), float(centers[peak]), background)


@traced("fit_lifetime")
def fit_lifetime(
    hist: CoincidenceHistogram,
    irf_sigma: float,
    rise_tau: float | None = None,
    max_evaluations: int = MAX_EVALUATIONS,
) -> LifetimeFit:
    """Fit A*[decay conv Gaussian](t; tau, irf_sigma, t0) + B to a delay histogram.

    Free parameters are A, tau, t0 and B; the IRF width is fixed. When rise_tau
    is given the decay is fed by a preceding one (X fed by XX). A first pass
    weights bins by the observed counts, a second by the fitted model.

    Args:
        hist: Delay histogram against the laser trigger
        irf_sigma: Gaussian instrument response width in ps
        rise_tau: Lifetime of the feeding decay in ps, if any
        max_evaluations: Function evaluation limit per fit pass

    Returns:
        LifetimeFit with tau and its covariance-derived sigma

    Raises:
        InsufficientDataError: If fewer than MIN_DECAY_BINS bins past the peak hold counts
        FitError: If the fit does not converge or its covariance is undefined
    """
    if irf_sigma < 0:
        raise ValidationError("irf_sigma", f"must be >= 0, got {irf_sigma}")
    centers = hist.centers
    counts = hist.counts.astype(float)
    peak = int(np.argmax(counts))
    populated = int(np.count_nonzero(counts[peak + 1 :]))
    if hist.total == 0 or populated < MIN_DECAY_BINS:
        raise InsufficientDataError(
            f"Need at least {MIN_DECAY_BINS} populated bins past the peak, found {populated}"
        )

    bw = hist.bin_width

    def model(t: np.ndarray, amplitude: float, tau: float, t0: float, background: float) -> np.ndarray:
        if rise_tau is None:
            density = emg_density(t, tau, irf_sigma, t0)
        else:
            density = cascade_density(t, tau, rise_tau, irf_sigma, t0)
        return amplitude * bw * density + background

    p0 = _initial_guess(centers, counts, bw)
    lo, hi = hist.delay_range
    bounds = ([0.0, bw / 10, lo, 0.0], [np.inf, (hi - lo) * 10, hi, np.inf])
    sigma = np.sqrt(np.maximum(counts, 1.0))
    options = {"absolute_sigma": True, "bounds": bounds, "max_nfev": max_evaluations}
    try:
        popt, _ = curve_fit(model, centers, counts, p0=p0, sigma=sigma, **options)
        sigma = np.sqrt(np.maximum(model(centers, *popt), 1.0))
        popt, pcov = curve_fit(model, centers, counts, p0=popt, sigma=sigma, **options)
    except (RuntimeError, ValueError) as e:
        raise FitError(
            "Lifetime fit did not converge",
            {"p0_tau": round(p0[1], 3), "max_evaluations": max_evaluations, "reason": str(e)},
        ) from e

    tau_sigma = float(np.sqrt(pcov[1, 1])) if np.isfinite(pcov[1, 1]) else math.nan
    if not math.isfinite(tau_sigma):
        raise FitError("Lifetime fit covariance is undefined", {"tau": round(float(popt[1]), 3)})

    residuals = (counts - model(centers, *popt)) / sigma
    dof = max(len(counts) - 4, 1)
    chi2 = float(residuals @ residuals) / dof
    get_logger().info("Fitted lifetime", tau=float(popt[1]), tau_sigma=tau_sigma, reduced_chi2=chi2)
    return LifetimeFit(
        tau=Estimate(float(popt[1]), tau_sigma),
        t0=float(popt[2]),
        amplitude=float(popt[0]),
        background=float(popt[3]),
        reduced_chi2=chi2,
    )


@traced("fit_fss")
def fit_fss(angles_deg: np.ndarray, delta_e: np.ndarray) -> FssFit:
    """Extract the fine-structure splitting from a polarization scan.

    Fits dE(theta) = E0 + a*sin(2 theta) + b*cos(2 theta) by linear least
    squares; the splitting is the peak-to-peak swing 2*sqrt(a^2 + b^2).
    """
    angles = np.asarray(angles_deg, dtype=float)
    energies = np.asarray(delta_e, dtype=float)
    if angles.shape != energies.shape or angles.ndim != 1:
        raise ValidationError("delta_e", "angles and energies must be 1-D arrays of equal length")
    if len(angles) < MIN_FSS_SAMPLES:
        raise ValidationError("angles", f"need at least {MIN_FSS_SAMPLES} samples, got {len(angles)}")
    if np.ptp(angles) < 180.0 - 1e-9:
        raise ValidationError("angles", f"samples must span at least 180 degrees, got {np.ptp(angles)}")

    theta = np.deg2rad(2 * angles)
    design = np.column_stack([np.ones_like(theta), np.sin(theta), np.cos(theta)])
    coef, _, rank, _ = np.linalg.lstsq(design, energies, rcond=None)
    if rank < 3:
        raise FitError("Sine fit design matrix is rank deficient", {"rank": int(rank), "samples": len(angles)})

    e0, a, b = coef
    residuals = energies - design @ coef
    dof = len(angles) - 3
    variance = float(residuals @ residuals) / dof if dof > 0 else 0.0
    cov = variance * np.linalg.inv(design.T @ design)

    amplitude = math.hypot(a, b)
    fss = 2 * amplitude
    if amplitude > 0:
        grad = np.array([a, b]) / amplitude
        fss_sigma = 2 * math.sqrt(max(float(grad @ cov[1:, 1:] @ grad), 0.0))
    else:
        fss_sigma = 2 * math.sqrt(max(float(cov[1, 1] + cov[2, 2]) / 2, 0.0))
    return FssFit(
        fss=Estimate(fss, fss_sigma),
        offset=float(e0),
        phase=math.atan2(b, a),
        residual_rms=math.sqrt(float(residuals @ residuals) / len(angles)),
    )


def synthetic_fss_scan(
    fss: float,
    noise: float = 0.1,
    angles_deg: np.ndarray | None = None,
    offset: float = 0.0,
    phase: float = 0.3,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Polarization scan of the XX-X energy difference with Gaussian noise (ueV)."""
    if fss < 0:
        raise ValidationError("fss", f"must be >= 0, got {fss}")
    if noise < 0:
        raise ValidationError("noise", f"must be >= 0, got {noise}")
    angles = np.arange(0.0, 361.0, 10.0) if angles_deg is None else np.asarray(angles_deg, dtype=float)
    rng = np.random.default_rng(seed)
    energies = offset + fss / 2 * np.sin(np.deg2rad(2 * angles) + phase)
    if noise > 0:
        energies = energies + rng.normal(0.0, noise, len(angles))
    return angles, energies
