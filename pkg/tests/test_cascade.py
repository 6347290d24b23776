"""Tests for the cascade Monte Carlo generator."""

import math
import os
from unittest.mock import patch

import numpy as np
import pytest

from cascade_tools.cascade import (
    BLOCK_PULSES,
    DETECTOR_A,
    DETECTOR_B,
    TRIGGER_CHANNEL,
    ExperimentConfig,
    ExperimentKind,
    PhotonEvents,
    RelativePolarization,
    TimeTagStream,
    apply_detection_chain,
    background_photon_ratio,
    block_rng,
    project_polarization,
    resolve_workers,
    sample_pair_event,
    simulate,
)
from cascade_tools.errors import ValidationError
from cascade_tools.physics import PolarizationBasis, SourceParams, model_density_matrix


SAMPLES = 1_000_000


def empirical_density_matrix(states: np.ndarray) -> np.ndarray:
    return np.einsum("ni,nj->ij", states, states.conj()) / len(states)


class TestExperimentKind:
    """Tests for ExperimentKind."""

    def test_families(self):
        """Kinds group into four measurement families."""
        assert ExperimentKind.HBT_XX.family == "hbt"
        assert ExperimentKind.CROSS_CORRELATION.family == "cross_correlation"
        assert ExperimentKind.HOM_X.family == "hom"
        assert ExperimentKind.LIFETIME_XX.family == "lifetime"

    def test_transitions(self):
        """Cross-correlation has no single transition."""
        assert ExperimentKind.HBT_X.transition == "x"
        assert ExperimentKind.HOM_XX.transition == "xx"
        assert ExperimentKind.CROSS_CORRELATION.transition is None


class TestExperimentConfig:
    """Tests for ExperimentConfig validation."""

    def test_defaults(self):
        """Default config is an HBT run on X."""
        config = ExperimentConfig()
        assert config.kind is ExperimentKind.HBT_X
        assert config.effective_basis is PolarizationBasis.LINEAR
        assert config.effective_relative_pol is RelativePolarization.CO
        assert config.detector_channels == (DETECTOR_A, DETECTOR_B)

    def test_accepts_strings(self):
        """Enum fields accept their string values."""
        config = ExperimentConfig(kind="cross_correlation", basis="da", relative_pol="cross")
        assert config.basis is PolarizationBasis.DIAGONAL
        assert config.relative_pol is RelativePolarization.CROSS

    def test_unknown_kind(self):
        """Unknown kind names the field."""
        with pytest.raises(ValidationError) as exc:
            ExperimentConfig(kind="tomography")
        assert exc.value.field == "kind"

    def test_basis_only_for_cross_correlation(self):
        """A basis on an HBT run is rejected."""
        with pytest.raises(ValidationError) as exc:
            ExperimentConfig(kind="hbt_x", basis="linear")
        assert exc.value.field == "basis"

    def test_relative_pol_not_for_lifetime(self):
        """Lifetime runs have no analyzers."""
        with pytest.raises(ValidationError) as exc:
            ExperimentConfig(kind="lifetime_x", relative_pol="co")
        assert exc.value.field == "relative_pol"

    def test_hom_requires_matched_delay(self):
        """HOM needs the interferometer delay to match the pulse separation."""
        with pytest.raises(ValidationError) as exc:
            ExperimentConfig(kind="hom_x", mzi_delay=1800.0, double_pulse_sep=1900.0)
        assert exc.value.field == "mzi_delay"

    @pytest.mark.parametrize(
        "field,value",
        [("n_pulses", 0), ("n_pulses", 2.5), ("seed", -1), ("irf_sigma", -1.0), ("dark_rate", -5.0)],
    )
    def test_rejects_bad_values(self, field, value):
        """Out-of-range values raise with the field name."""
        with pytest.raises(ValidationError) as exc:
            ExperimentConfig(**{field: value})
        assert exc.value.field == field

    def test_lifetime_uses_one_detector(self):
        """Lifetime runs record only detector A besides the trigger."""
        assert ExperimentConfig(kind="lifetime_xx").detector_channels == (DETECTOR_A,)


class TestTimeTagStream:
    """Tests for TimeTagStream."""

    def test_rejects_unsorted(self):
        """Records must be time-sorted."""
        with pytest.raises(ValidationError):
            TimeTagStream(SourceParams(), ExperimentConfig(), [1, 1], [20, 10], [0, 0])

    def test_rejects_length_mismatch(self):
        """Column arrays must have equal length."""
        with pytest.raises(ValidationError):
            TimeTagStream(SourceParams(), ExperimentConfig(), [1], [10, 20], [0, 0])

    def test_immutable(self):
        """Arrays cannot be modified in place."""
        stream = TimeTagStream(SourceParams(), ExperimentConfig(), [1, 2], [10, 20], [0, 0])
        with pytest.raises(ValueError):
            stream.timestamp[0] = 5

    def test_iteration_and_times(self):
        """Iteration yields records and times() filters by channel."""
        stream = TimeTagStream(SourceParams(), ExperimentConfig(), [1, 2, 1], [10, 20, 30], [0, 0, 1])
        records = list(stream)
        assert records[1].channel == 2
        assert records[2].timestamp == 30
        assert stream.times(1).tolist() == [10, 30]
        assert len(stream) == 3


class TestBackgroundRatio:
    """Tests for background_photon_ratio."""

    @pytest.mark.parametrize("g2", [0.0, 0.001, 0.007, 0.1, 0.3, 0.5])
    def test_inverts_g2_relation(self, g2):
        """The ratio r reproduces g2 = 2r/(1+r)^2."""
        r = background_photon_ratio(g2)
        assert 2 * r / (1 + r) ** 2 == pytest.approx(g2, abs=1e-12)

    def test_rejects_unreachable(self):
        """Independent background cannot exceed g2 = 0.5."""
        with pytest.raises(ValidationError):
            background_photon_ratio(0.6)


class TestPairSampling:
    """Tests for the per-cascade sampler."""

    @pytest.mark.parametrize("case", range(10))
    def test_state_matches_model(self, case):
        """Averaged sampled pair states match the model density matrix elementwise."""
        rng = np.random.default_rng(100 + case)
        params = SourceParams(
            fss_s=float(rng.uniform(0, 15)),
            tau_x=float(rng.uniform(30, 300)),
            tau_ss=float(rng.uniform(200, 20_000)),
        )
        states = sample_pair_event(params, block_rng(case, 0), SAMPLES).pair_states()
        expected = model_density_matrix(params).entries
        for i in range(4):
            for j in range(4):
                outer = states[:, i] * states[:, j].conj()
                mean = outer.mean()
                for part in (np.real, np.imag):
                    se = float(part(outer).std()) / math.sqrt(SAMPLES)
                    # 4 SE: about fifty correlated element checks across the ten cases
                    assert abs(float(part(mean - expected[i, j]))) <= 4 * se + 1e-12, (i, j, part.__name__)

    def test_state_matches_model_without_scattering(self):
        """Without spin scattering every pair is coherent."""
        params = SourceParams(fss_s=4.8, tau_x=60.0, tau_ss=math.inf)
        events = sample_pair_event(params, block_rng(7, 0), 100_000)
        assert not events.flipped.any()
        rho = empirical_density_matrix(events.pair_states())
        assert np.max(np.abs(rho - model_density_matrix(params).entries)) < 0.01

    def test_flip_fraction(self):
        """Spin flips happen before the X decay at rate tau_x/(tau_x + tau_ss)."""
        params = SourceParams(tau_x=60.0, tau_ss=1000.0)
        events = sample_pair_event(params, block_rng(3, 0), 200_000)
        expected = 60.0 / 1060.0
        sigma = math.sqrt(expected * (1 - expected) / len(events))
        assert abs(events.flipped.mean() - expected) < 5 * sigma

    def test_flipped_pairs_are_unpolarized(self):
        """Scrambled pairs average to the maximally mixed state."""
        params = SourceParams(tau_x=60.0, tau_ss=1.0)
        events = sample_pair_event(params, block_rng(3, 1), 100_000)
        states = events.pair_states()[events.flipped]
        rho = empirical_density_matrix(states)
        assert np.max(np.abs(rho - np.eye(4) / 4)) < 0.01

    def test_exciton_follows_biexciton(self):
        """X is always emitted after XX."""
        events = sample_pair_event(SourceParams(), block_rng(0, 0), 1000)
        assert np.all(events.x_emit >= events.xx_emit)


class TestProjection:
    """Tests for project_polarization."""

    def test_bell_state_is_correlated(self):
        """Psi+ gives identical ports in the linear basis."""
        states = np.tile(np.array([1, 0, 0, 1]) / math.sqrt(2), (1000, 1))
        a, _ = PolarizationBasis.LINEAR.vectors
        x_port, xx_port = project_polarization(states, a, a, np.random.default_rng(0))
        assert np.array_equal(x_port, xx_port)

    def test_rejects_unnormalized_analyzer(self):
        """Analyzer vectors must be unit Jones vectors."""
        states = np.array([[1, 0, 0, 0]], dtype=complex)
        with pytest.raises(ValidationError) as exc:
            project_polarization(states, np.array([1, 1]), np.array([1, 0]), np.random.default_rng(0))
        assert exc.value.field == "analyzer_x"


class TestDetectionChain:
    """Tests for apply_detection_chain."""

    def events(self, n: int) -> PhotonEvents:
        rng = np.random.default_rng(0)
        pulse = np.arange(n, dtype=np.int64)
        channel = np.where(pulse % 2 == 0, DETECTOR_A, DETECTOR_B).astype(np.uint16)
        return PhotonEvents(channel, pulse * 12658.0 + rng.exponential(60.0, n), pulse)

    def test_lossless_chain_is_identity(self):
        """Perfect detection without jitter or darks leaves the events unchanged."""
        events = self.events(1000)
        config = ExperimentConfig(kind="hbt_x", n_pulses=1000, irf_sigma=0.0, dark_rate=0.0)
        out = apply_detection_chain(
            events, SourceParams(eta=1.0, xi=1.0), config, np.random.default_rng(1), (0.0, 1.3e7)
        )
        np.testing.assert_array_equal(out.time, events.time)
        np.testing.assert_array_equal(out.channel, events.channel)
        np.testing.assert_array_equal(out.pulse_index, events.pulse_index)

    def test_survival_and_jitter(self):
        """Photons survive with eta*xi and pick up Gaussian jitter of irf_sigma."""
        n = 200_000
        events = self.events(n)
        params = SourceParams(eta=0.5, xi=0.5)
        config = ExperimentConfig(kind="hbt_x", n_pulses=n, irf_sigma=50.0, dark_rate=0.0)
        out = apply_detection_chain(events, params, config, np.random.default_rng(2), (0.0, n * 12658.0))
        assert len(out) / n == pytest.approx(0.25, abs=0.005)
        residual = out.time - events.time[np.isin(events.pulse_index, out.pulse_index)]
        assert residual.mean() == pytest.approx(0.0, abs=1.0)
        assert residual.std() == pytest.approx(50.0, rel=0.02)

    def test_dark_counts(self):
        """Dark counts follow the configured rate on both detectors."""
        config = ExperimentConfig(kind="hbt_x", n_pulses=10, dark_rate=1e6)
        out = apply_detection_chain(
            PhotonEvents.empty(), SourceParams(), config, np.random.default_rng(3), (0.0, 1e10)
        )
        # 1e6 Hz over 10 ms per channel
        for channel in (DETECTOR_A, DETECTOR_B):
            assert np.sum(out.channel == channel) == pytest.approx(1e4, rel=0.05)
        assert out.pulse_index.min() >= 0
        assert out.pulse_index.max() <= 9


class TestResolveWorkers:
    """Tests for resolve_workers."""

    def test_explicit_request(self):
        """An explicit worker count is honored."""
        with patch.dict(os.environ, clear=True):
            assert resolve_workers(3) == 3

    def test_env_cap(self):
        """CSTG_THREADS caps the worker count."""
        with patch.dict(os.environ, {"CSTG_THREADS": "2"}):
            assert resolve_workers(6) == 2

    def test_invalid_env_ignored(self):
        """A non-numeric cap is ignored."""
        with patch.dict(os.environ, {"CSTG_THREADS": "many"}):
            assert resolve_workers(4) == 4


class TestSimulate:
    """Tests for simulate."""

    def test_deterministic(self):
        """Same seed gives the same stream."""
        config = ExperimentConfig(n_pulses=20_000, seed=11)
        assert simulate(SourceParams(), config, workers=1) == simulate(SourceParams(), config, workers=1)

    def test_seed_changes_output(self):
        """Different seeds give different streams."""
        a = simulate(SourceParams(), ExperimentConfig(n_pulses=20_000, seed=1), workers=1)
        b = simulate(SourceParams(), ExperimentConfig(n_pulses=20_000, seed=2), workers=1)
        assert a != b

    def test_independent_of_worker_count(self):
        """Block streams make the output independent of parallelism."""
        config = ExperimentConfig(n_pulses=2 * BLOCK_PULSES + 100, seed=5)
        serial = simulate(SourceParams(), config, workers=1)
        parallel = simulate(SourceParams(), config, workers=3)
        assert serial == parallel

    def test_sorted_and_channels(self):
        """Records are time-sorted on the two HBT detectors."""
        stream = simulate(SourceParams(), ExperimentConfig(n_pulses=10_000), workers=1)
        assert np.all(np.diff(stream.timestamp) >= 0)
        assert set(np.unique(stream.channel)) <= {DETECTOR_A, DETECTOR_B}
        assert stream.pulse_index.min() >= 0
        assert stream.pulse_index.max() < 10_000

    def test_lifetime_has_trigger_per_pulse(self):
        """Lifetime runs record one trigger per laser pulse."""
        config = ExperimentConfig(kind="lifetime_x", n_pulses=5_000)
        stream = simulate(SourceParams(), config, workers=1)
        assert np.count_nonzero(stream.channel == TRIGGER_CHANNEL) == 5_000
        assert set(np.unique(stream.channel)) == {TRIGGER_CHANNEL, DETECTOR_A}

    def test_detected_rate(self):
        """Detected photons per pulse follow eta_xx * eta * xi."""
        params = SourceParams(xi=0.5, g2_x=0.0)
        config = ExperimentConfig(n_pulses=50_000, dark_rate=0.0)
        stream = simulate(params, config, workers=1)
        expected = config.n_pulses * params.eta_xx * params.eta * params.xi
        assert abs(stream.record_count - expected) < 5 * math.sqrt(expected)

    def test_no_collection_no_records(self):
        """Zero collection efficiency and no dark counts give an empty stream."""
        params = SourceParams(eta=0.0)
        config = ExperimentConfig(n_pulses=5_000, dark_rate=0.0)
        assert simulate(params, config, workers=1).record_count == 0
