"""From tag streams to figures of merit.

Streams are grouped by experiment kind. Cross-correlation needs a co- and a
cross-polarized stream per basis, HOM a co/cross pair per transition; an
unmatched stream is logged and skipped.
"""

import math
from collections.abc import Sequence

import numpy as np

from cascade_tools.cascade import DETECTOR_A, DETECTOR_B, TRIGGER_CHANNEL, RelativePolarization, TimeTagStream
from cascade_tools.config import AnalysisOptions
from cascade_tools.errors import InsufficientDataError, ValidationError
from cascade_tools.fitting import fit_fss, fit_lifetime
from cascade_tools.histogram import (
    PeakAreas,
    build_histogram,
    comb_range,
    correlation_from_areas,
    g2_zero,
    hom_visibility_from_peaks,
    integrate_peaks,
)
from cascade_tools.observability import get_logger, traced_operation
from cascade_tools.physics import PolarizationBasis, collection_efficiency_from_rate
from cascade_tools.report import Estimate, FomReport, compile_report

_CORRELATION_KEYS = {
    PolarizationBasis.LINEAR: "c_lin",
    PolarizationBasis.DIAGONAL: "c_diag",
    PolarizationBasis.CIRCULAR: "c_circ",
}


def comb_peaks(stream: TimeTagStream, options: AnalysisOptions, window: float | None = None) -> PeakAreas:
    """Detector A -> detector B histogram integrated around every laser period."""
    period = stream.params.rep_period
    hist = build_histogram(
        stream.times(DETECTOR_A),
        stream.times(DETECTOR_B),
        options.bin_width,
        comb_range(period, options.side_peaks, options.bin_width),
        rep_period=period,
        channels=(DETECTOR_A, DETECTOR_B),
    )
    return integrate_peaks(hist, period, window or options.window)


def detected_efficiency(stream: TimeTagStream, options: AnalysisOptions) -> Estimate:
    """Collection efficiency from the dark-corrected detected photon rate."""
    channels = stream.config.detector_channels
    counts = sum(int(np.count_nonzero(stream.channel == ch)) for ch in channels)
    duration_s = stream.duration * 1e-12
    signal = counts - stream.config.dark_rate * duration_s * len(channels)
    if signal <= 0:
        raise InsufficientDataError("No photon counts above the dark level")
    rate_mhz = signal / duration_s * 1e-6
    eta = collection_efficiency_from_rate(
        rate_mhz, stream.params.rep_rate, stream.params.xi, options.apd_correction, stream.params.eta_xx
    )
    return Estimate(eta, eta / math.sqrt(signal))


def lifetime(stream: TimeTagStream, options: AnalysisOptions, rise_tau: float | None = None) -> Estimate:
    hist = build_histogram(
        stream.times(TRIGGER_CHANNEL),
        stream.times(DETECTOR_A),
        options.lifetime_bin_width,
        (options.lifetime_start, options.lifetime_stop),
        rep_period=stream.params.rep_period,
        channels=(TRIGGER_CHANNEL, DETECTOR_A),
    )
    return fit_lifetime(hist, stream.config.irf_sigma, rise_tau=rise_tau).tau


def _pairs(streams: Sequence[TimeTagStream], key) -> dict:
    """Group streams into {key: {co|cross: stream}}, keeping the first of duplicates."""
    groups: dict = {}
    for stream in streams:
        slot = groups.setdefault(key(stream), {})
        slot.setdefault(stream.config.effective_relative_pol, stream)
    return groups


def analyze_streams(
    streams: Sequence[TimeTagStream],
    options: AnalysisOptions | None = None,
    fss_scan: tuple[np.ndarray, np.ndarray] | None = None,
) -> FomReport:
    """Estimate every figure of merit the given measurements support."""
    options = options or AnalysisOptions()
    if not streams and fss_scan is None:
        raise ValidationError("tagfiles", "at least one tag file or an FSS scan is required")
    logger = get_logger()
    by_family: dict[str, list[TimeTagStream]] = {}
    for stream in streams:
        by_family.setdefault(stream.config.kind.family, []).append(stream)

    estimates: dict[str, Estimate] = {}
    with traced_operation("analyze", {"streams": len(streams)}):
        for stream in by_family.get("hbt", []):
            name = f"g2_{stream.config.kind.transition}"
            estimates.setdefault(name, g2_zero(comb_peaks(stream, options)))
            if "eta" not in estimates or stream.config.kind.transition == "x":
                estimates["eta"] = detected_efficiency(stream, options)

        groups = _pairs(by_family.get("cross_correlation", []), lambda s: s.config.effective_basis)
        for basis, pair in groups.items():
            if len(pair) < 2:
                logger.warning("Unpaired cross-correlation stream skipped", basis=basis.value)
                continue
            estimates[_CORRELATION_KEYS[basis]] = correlation_from_areas(
                comb_peaks(pair[RelativePolarization.CO], options),
                comb_peaks(pair[RelativePolarization.CROSS], options),
            )

        groups = _pairs(by_family.get("hom", []), lambda s: s.config.kind.transition)
        for transition, pair in groups.items():
            if len(pair) < 2:
                logger.warning("Unpaired HOM stream skipped", transition=transition)
                continue
            co, cross = pair[RelativePolarization.CO], pair[RelativePolarization.CROSS]
            window = options.hom_window or co.config.double_pulse_sep
            estimates[f"v_hom_{transition}"] = hom_visibility_from_peaks(
                comb_peaks(co, options, window), comb_peaks(cross, options, window)
            )

        lifetimes = sorted(by_family.get("lifetime", []), key=lambda s: s.config.kind.transition != "xx")
        for stream in lifetimes:
            if stream.config.kind.transition == "xx":
                estimates["tau_xx"] = lifetime(stream, options)
            else:
                rise = estimates["tau_xx"].value if "tau_xx" in estimates else stream.params.tau_xx
                estimates["tau_x"] = lifetime(stream, options, rise_tau=rise)

        if fss_scan is not None:
            estimates["fss"] = fit_fss(*fss_scan).fss

        params = streams[0].params if streams else None
        return compile_report(estimates, params, options.thresholds)
