"""Coincidence histograms, peak integration and zero-delay estimators.

Pulsed correlation measurements produce a comb of peaks at integer multiples
of the laser period. Every estimator here normalizes the zero-delay peak by the
mean of the side peaks, which makes it independent of count rates and of
uniform rescaling of the histogram. Uncertainties are first-order Poisson
propagation.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from cascade_tools.errors import InsufficientDataError, UndefinedEstimateError, ValidationError
from cascade_tools.observability import get_logger, traced_operation
from cascade_tools.report import Estimate

# Start records per sweep chunk (bounds temporary pair arrays)
CHUNK_RECORDS = 1 << 18


@dataclass(frozen=True)
class CoincidenceHistogram:
    """Histogram of delays t_b - t_a over [delay_range[0], delay_range[1])."""

    bin_width: float
    delay_range: tuple[float, float]
    counts: np.ndarray = field(repr=False)
    channels: tuple[int, int] = (1, 2)
    rep_period: float | None = None

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        lo, hi = self.delay_range
        if not self.bin_width > 0:
            raise ValidationError("bin_width", f"must be > 0, got {self.bin_width}")
        n_bins = (hi - lo) / self.bin_width
        if n_bins < 1 or abs(n_bins - round(n_bins)) > 1e-9:
            raise ValidationError(
                "delay_range", f"span {hi - lo} ps is not a multiple of bin width {self.bin_width} ps"
            )
        if len(counts) != round(n_bins):
            raise ValidationError("counts", f"expected {round(n_bins)} bins, got {len(counts)}")
        if np.any(counts < 0):
            raise ValidationError("counts", "counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def edges(self) -> np.ndarray:
        lo, _ = self.delay_range
        return lo + self.bin_width * np.arange(len(self.counts) + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.edges[:-1] + self.bin_width / 2

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class PeakAreas:
    """Integrated peak areas at multiples of the repetition period."""

    orders: np.ndarray
    centers: np.ndarray
    window: float
    areas: np.ndarray
    rep_period: float

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.areas)

    @property
    def central(self) -> float:
        return float(self.areas[self.orders == 0][0])

    def side(self, min_order: int = 1) -> np.ndarray:
        return self.areas[np.abs(self.orders) >= min_order]

    def side_mean(self, min_order: int = 1) -> Estimate:
        """Mean side-peak area with its Poisson uncertainty."""
        side = self.side(min_order)
        if len(side) == 0:
            raise InsufficientDataError(f"No side peaks with |order| >= {min_order}")
        mean = float(side.mean())
        return Estimate(mean, math.sqrt(float(side.sum())) / len(side))


def _check_sorted(name: str, times: np.ndarray) -> None:
    if len(times) > 1 and np.any(np.diff(times) < 0):
        raise ValidationError(name, "timestamps are not sorted")


def build_histogram(
    times_a: np.ndarray,
    times_b: np.ndarray,
    bin_width: float,
    delay_range: tuple[float, float],
    rep_period: float | None = None,
    channels: tuple[int, int] = (1, 2),
) -> CoincidenceHistogram:
    """Histogram every pair (t_a, t_b) with t_b - t_a inside delay_range.

    Both inputs must be sorted. For each start record the matching stop window
    is located by binary search, so the work is linear in the number of
    records plus the number of pairs in range.

    Args:
        times_a: Sorted start timestamps in ps
        times_b: Sorted stop timestamps in ps
        bin_width: Bin width in ps
        delay_range: Half-open delay range [lo, hi) in ps, a whole number of bins
        rep_period: Laser period carried on the histogram for peak integration
        channels: Channel ids of the start and stop streams

    Returns:
        CoincidenceHistogram of t_b - t_a

    Raises:
        ValidationError: If either input is unsorted or the range is not a multiple of bin_width
    """
    a = np.asarray(times_a, dtype=np.int64)
    b = np.asarray(times_b, dtype=np.int64)
    _check_sorted("stream_a", a)
    _check_sorted("stream_b", b)

    lo, hi = delay_range
    empty = CoincidenceHistogram(
        bin_width, (lo, hi), np.zeros(round((hi - lo) / bin_width), np.int64), channels, rep_period
    )
    n_bins = len(empty.counts)

    with traced_operation(
        "build_histogram",
        {"records_a": len(a), "records_b": len(b), "bins": n_bins, "bin_width": bin_width},
    ) as span:
        counts = np.zeros(n_bins, dtype=np.int64)
        for start in range(0, len(a), CHUNK_RECORDS):
            chunk = a[start : start + CHUNK_RECORDS]
            left = np.searchsorted(b, chunk + lo, side="left")
            right = np.searchsorted(b, chunk + hi, side="left")
            per_start = right - left
            total = int(per_start.sum())
            if total == 0:
                continue
            first = np.cumsum(per_start) - per_start
            index = np.repeat(left - first, per_start) + np.arange(total)
            delta = b[index] - np.repeat(chunk, per_start)
            bins = np.floor((delta - lo) / bin_width).astype(np.int64)
            np.clip(bins, 0, n_bins - 1, out=bins)
            counts += np.bincount(bins, minlength=n_bins)

        span.set_attribute("pairs", int(counts.sum()))
        return CoincidenceHistogram(bin_width, (lo, hi), counts, channels, rep_period)


def comb_range(rep_period: float, side_peaks: int, bin_width: float) -> tuple[float, float]:
    """Symmetric delay range holding the central peak and `side_peaks` on each side."""
    half = math.ceil((side_peaks + 0.5) * rep_period / bin_width) * bin_width
    return (-half, half)


def integrate_peaks(
    hist: CoincidenceHistogram,
    rep_period: float | None = None,
    window: float | None = None,
    min_side_peaks: int = 3,
) -> PeakAreas:
    """Sum counts within +-window/2 of every multiple of the repetition period.

    Only peaks whose whole window lies inside the histogram range are kept.
    The window defaults to half the period.
    """
    period = rep_period or hist.rep_period
    if period is None or not period > 0:
        raise ValidationError("rep_period", "a positive repetition period is required")
    window = period / 2 if window is None else window
    if not 0 < window <= period:
        raise ValidationError("window", f"must be in (0, {period}], got {window}")

    lo, hi = hist.delay_range
    orders = np.arange(math.ceil((lo + window / 2) / period), math.floor((hi - window / 2) / period) + 1)
    centers = orders * period
    bin_centers = hist.centers
    areas = np.array(
        [
            hist.counts[(bin_centers >= c - window / 2) & (bin_centers < c + window / 2)].sum()
            for c in centers
        ],
        dtype=float,
    )

    if 0 not in orders:
        raise InsufficientDataError("Histogram range does not contain the zero-delay peak")
    n_side = int(np.count_nonzero(orders != 0))
    if n_side < min_side_peaks:
        raise InsufficientDataError(
            f"Need at least {min_side_peaks} side peaks, histogram range holds {n_side}"
        )
    get_logger().debug("Integrated peaks", peaks=len(orders), window=window)
    return PeakAreas(orders, centers, window, areas, period)


def normalized_central(peaks: PeakAreas, min_order: int = 1) -> Estimate:
    """Central peak area divided by the mean side-peak area."""
    mean = peaks.side_mean(min_order)
    if mean.value <= 0:
        raise UndefinedEstimateError("Mean side-peak area is zero")
    a0 = peaks.central
    sigma_a0 = math.sqrt(a0) if a0 > 0 else 1.0
    value = a0 / mean.value
    sigma = math.sqrt((sigma_a0 / mean.value) ** 2 + (a0 * mean.sigma / mean.value**2) ** 2)
    return Estimate(value, sigma)


def g2_zero(peaks: PeakAreas, min_order: int = 1) -> Estimate:
    """Second-order correlation at zero delay from pulsed HBT peak areas."""
    if len(peaks.side(min_order)) < 2:
        raise InsufficientDataError("g2(0) needs at least two side peaks")
    return normalized_central(peaks, min_order)


def correlation_from_areas(
    area_co: PeakAreas,
    area_cross: PeakAreas,
    min_order: int = 1,
) -> Estimate:
    """Degree of polarization correlation from co- and cross-polarized histograms."""
    g_co = normalized_central(area_co, min_order)
    g_cross = normalized_central(area_cross, min_order)
    total = g_co.value + g_cross.value
    if total <= 0:
        raise UndefinedEstimateError("Both normalized central areas are zero")
    value = (g_co.value - g_cross.value) / total
    sigma = 2 * math.hypot(g_cross.value * g_co.sigma, g_co.value * g_cross.sigma) / total**2
    return Estimate(value, sigma)


def hom_visibility(
    central_co: float,
    central_cross: float,
    norm_co: Estimate,
    norm_cross: Estimate,
) -> Estimate:
    """Two-photon interference visibility V = 1 - A_co/A_cross of normalized central areas."""
    if central_cross <= 0:
        raise UndefinedEstimateError("Cross-polarized central peak is empty")
    if norm_co.value <= 0 or norm_cross.value <= 0:
        raise UndefinedEstimateError("Normalization must be positive")
    scale = norm_cross.value / (norm_co.value * central_cross)
    ratio = central_co * scale
    sigma_co = math.sqrt(central_co) if central_co > 0 else 1.0
    sigma = math.sqrt(
        (sigma_co * scale) ** 2
        + ratio**2
        * (
            1 / central_cross
            + (norm_co.sigma / norm_co.value) ** 2
            + (norm_cross.sigma / norm_cross.value) ** 2
        )
    )
    return Estimate(1 - ratio, sigma)


def hom_visibility_from_peaks(
    peaks_co: PeakAreas,
    peaks_cross: PeakAreas,
    min_order: int = 2,
) -> Estimate:
    """HOM visibility normalizing each central peak by its side peaks at |n| >= min_order."""
    return hom_visibility(
        peaks_co.central,
        peaks_cross.central,
        peaks_co.side_mean(min_order),
        peaks_cross.side_mean(min_order),
    )
