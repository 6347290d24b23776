"""Tests for lifetime and FSS fitting."""

import numpy as np
import pytest
from scipy.integrate import trapezoid

from cascade_tools.errors import FitError, InsufficientDataError, ValidationError
from cascade_tools.fitting import (
    cascade_density,
    emg_density,
    fit_fss,
    fit_lifetime,
    synthetic_fss_scan,
)
from cascade_tools.histogram import CoincidenceHistogram

BIN_WIDTH = 4.0
DELAY_RANGE = (-500.0, 3500.0)


def decay_histogram(density, counts: float, background: float = 0.0, seed: int | None = None) -> CoincidenceHistogram:
    """Histogram with the expected counts of a unit-area density, optionally Poisson sampled."""
    lo, hi = DELAY_RANGE
    centers = np.arange(lo, hi, BIN_WIDTH) + BIN_WIDTH / 2
    expected = counts * BIN_WIDTH * density(centers) + background
    if seed is None:
        values = np.rint(expected)
    else:
        values = np.random.default_rng(seed).poisson(expected)
    return CoincidenceHistogram(BIN_WIDTH, DELAY_RANGE, values.astype(np.int64))


class TestDensities:
    """Tests for the model densities."""

    @pytest.mark.parametrize("tau,sigma", [(60.0, 0.0), (60.0, 50.0), (210.0, 50.0), (5.0, 200.0)])
    def test_unit_area(self, tau, sigma):
        """Each density integrates to one."""
        t = np.linspace(-2000, 6000, 400_001)
        assert trapezoid(emg_density(t, tau, sigma, 0.0), t) == pytest.approx(1.0, abs=1e-3)

    def test_large_sigma_stays_finite(self):
        """Broad IRF with a short lifetime does not overflow."""
        values = emg_density(np.linspace(-3000, 3000, 1001), 1.0, 400.0, 0.0)
        assert np.all(np.isfinite(values))
        assert np.all(values >= 0)

    def test_pure_exponential_without_irf(self):
        """Zero IRF width gives a one-sided exponential."""
        values = emg_density(np.array([-10.0, 0.0, 60.0]), 60.0, 0.0, 0.0)
        assert values[0] == 0
        assert values[1] == pytest.approx(1 / 60)
        assert values[2] == pytest.approx(np.exp(-1) / 60)

    def test_cascade_unit_area(self):
        """Fed decay integrates to one and rises from zero."""
        t = np.linspace(-1000, 6000, 400_001)
        values = cascade_density(t, 60.0, 50.0, 0.0, 0.0)
        assert trapezoid(values, t) == pytest.approx(1.0, abs=1e-3)
        assert cascade_density(np.array([0.0]), 60.0, 50.0, 0.0, 0.0)[0] == pytest.approx(0.0, abs=1e-9)

    def test_cascade_equal_constants(self):
        """Equal time constants do not divide by zero."""
        values = cascade_density(np.array([60.0]), 60.0, 60.0, 0.0, 0.0)
        assert values[0] == pytest.approx(60.0 / 60.0**2 * np.exp(-1), rel=1e-3)


class TestFitLifetime:
    """Tests for fit_lifetime."""

    def test_noiseless_exponential(self):
        """A noiseless decay without jitter recovers tau."""
        hist = decay_histogram(lambda t: emg_density(t, 60.0, 0.0, 0.0), 1e6)
        fit = fit_lifetime(hist, irf_sigma=0.0)
        assert fit.tau.value == pytest.approx(60.0, abs=0.5)

    def test_poisson_decay_with_irf(self):
        """A million counts under a 50 ps IRF recover a 210 ps lifetime."""
        hist = decay_histogram(lambda t: emg_density(t, 210.0, 50.0, 0.0), 1e6, background=2.0, seed=3)
        fit = fit_lifetime(hist, irf_sigma=50.0)
        assert fit.tau.value == pytest.approx(210.0, abs=2.0)
        assert 0 < fit.tau.sigma < 2.0
        assert fit.t0 == pytest.approx(0.0, abs=5.0)
        assert fit.background == pytest.approx(2.0, abs=0.5)
        assert fit.reduced_chi2 < 1.5

    @pytest.mark.parametrize("tau", [60.0, 210.0])
    def test_recovers_within_two_percent(self, tau):
        """A million counts under a 50 ps IRF recover tau within 2 %."""
        hist = decay_histogram(lambda t: emg_density(t, tau, 50.0, 0.0), 1e6, background=1.0, seed=11)
        fit = fit_lifetime(hist, irf_sigma=50.0)
        assert fit.tau.value == pytest.approx(tau, rel=0.02)

    def test_unbiased_over_realizations(self):
        """Mean of 100 noisy fits sits on the true lifetime; the scatter matches the reported sigma."""
        taus, sigmas = [], []
        for seed in range(100):
            hist = decay_histogram(lambda t: emg_density(t, 210.0, 50.0, 0.0), 1e5, background=1.0, seed=seed)
            fit = fit_lifetime(hist, irf_sigma=50.0)
            taus.append(fit.tau.value)
            sigmas.append(fit.tau.sigma)
        spread = np.std(taus, ddof=1)
        assert abs(np.mean(taus) - 210.0) < 3 * spread / np.sqrt(len(taus))
        assert 1 / 1.5 < spread / np.mean(sigmas) < 1.5

    def test_fed_decay(self):
        """Fitting with the feeding lifetime fixed recovers the exciton lifetime."""
        hist = decay_histogram(lambda t: cascade_density(t, 60.0, 50.0, 50.0, 0.0), 5e5, seed=9)
        fit = fit_lifetime(hist, irf_sigma=50.0, rise_tau=50.0)
        assert fit.tau.value == pytest.approx(60.0, abs=3.0)

    def test_insufficient_bins(self):
        """A handful of counts cannot be fitted."""
        counts = np.zeros(1000, dtype=np.int64)
        counts[130:135] = [5, 4, 3, 2, 1]
        hist = CoincidenceHistogram(BIN_WIDTH, DELAY_RANGE, counts)
        with pytest.raises(InsufficientDataError):
            fit_lifetime(hist, irf_sigma=50.0)

    def test_empty_histogram(self):
        """No counts is insufficient data."""
        hist = CoincidenceHistogram(BIN_WIDTH, DELAY_RANGE, np.zeros(1000, dtype=np.int64))
        with pytest.raises(InsufficientDataError):
            fit_lifetime(hist, irf_sigma=50.0)

    def test_rejects_negative_irf(self):
        """IRF width must be non-negative."""
        hist = decay_histogram(lambda t: emg_density(t, 60.0, 0.0, 0.0), 1e5)
        with pytest.raises(ValidationError):
            fit_lifetime(hist, irf_sigma=-1.0)


class TestFitFss:
    """Tests for fit_fss."""

    @pytest.mark.parametrize("fss", [3.4, 4.8, 11.6])
    def test_recovers_splitting(self, fss):
        """A noisy scan recovers the splitting within 0.2 ueV."""
        angles, energies = synthetic_fss_scan(fss, noise=0.1, seed=1)
        fit = fit_fss(angles, energies)
        assert fit.fss.value == pytest.approx(fss, abs=0.2)
        assert 0 < fit.fss.sigma < 0.2

    def test_unbiased_over_realizations(self):
        """Mean of 100 noisy scans sits on the true splitting; the scatter matches the reported sigma."""
        fits = [fit_fss(*synthetic_fss_scan(4.8, noise=0.1, seed=seed)).fss for seed in range(100)]
        values = np.array([f.value for f in fits])
        spread = values.std(ddof=1)
        assert abs(values.mean() - 4.8) < 3 * spread / np.sqrt(len(values))
        assert 1 / 1.5 < spread / np.mean([f.sigma for f in fits]) < 1.5

    def test_noiseless(self):
        """Without noise the fit is exact."""
        angles, energies = synthetic_fss_scan(4.8, noise=0.0, offset=12.0, phase=0.7)
        fit = fit_fss(angles, energies)
        assert fit.fss.value == pytest.approx(4.8, abs=1e-9)
        assert fit.offset == pytest.approx(12.0)
        assert fit.residual_rms == pytest.approx(0.0, abs=1e-9)

    def test_constant_series(self):
        """A flat scan has zero splitting."""
        angles = np.arange(0.0, 361.0, 10.0)
        fit = fit_fss(angles, np.full(len(angles), 3.0))
        assert fit.fss.value == pytest.approx(0.0, abs=1e-9)

    def test_rank_deficient(self):
        """Angles on the nodes of sin(2 theta) cannot resolve both quadratures."""
        angles = np.array([0.0, 90.0, 180.0, 270.0, 360.0, 90.0, 180.0, 0.0])
        with pytest.raises(FitError):
            fit_fss(angles, np.arange(8.0))

    def test_too_few_samples(self):
        """At least eight samples are required."""
        with pytest.raises(ValidationError) as exc:
            fit_fss(np.linspace(0, 180, 5), np.zeros(5))
        assert exc.value.field == "angles"

    def test_too_narrow_span(self):
        """Samples must cover half a turn."""
        with pytest.raises(ValidationError) as exc:
            fit_fss(np.linspace(0, 90, 10), np.zeros(10))
        assert exc.value.field == "angles"

    def test_shape_mismatch(self):
        """Angle and energy arrays must match."""
        with pytest.raises(ValidationError):
            fit_fss(np.linspace(0, 360, 10), np.zeros(9))


class TestSyntheticScan:
    """Tests for synthetic_fss_scan."""

    def test_default_grid(self):
        """Default angles run from 0 to 360 degrees in 10 degree steps."""
        angles, energies = synthetic_fss_scan(4.8)
        assert angles[0] == 0 and angles[-1] == 360
        assert len(angles) == len(energies) == 37

    def test_reproducible(self):
        """Same seed gives the same noise."""
        assert np.array_equal(synthetic_fss_scan(4.8, seed=5)[1], synthetic_fss_scan(4.8, seed=5)[1])
