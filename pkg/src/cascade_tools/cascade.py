"""Pulse-by-pulse Monte Carlo generator for cascade photon detection records.

Each laser pulse prepares the biexciton with probability eta_xx. The XX photon
is emitted after an Exp(tau_xx) delay, the X photon after a further Exp(tau_x)
delay, while a competing Exp(tau_ss) spin flip may scramble the pair
polarization. Photons then pass through the experiment geometry (HBT beam
splitter, polarization analyzers, unbalanced Mach-Zehnder, or a bare detector
against the laser trigger) and a detection chain with loss, Gaussian timing
jitter and dark counts.

Pulses are processed in fixed blocks. Every block draws from its own Philox
stream keyed by (seed, block index), so the output does not depend on how many
worker processes share the work.
"""

import math
import os
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from cascade_tools.errors import ValidationError
from cascade_tools.observability import get_logger, traced_operation
from cascade_tools.physics import HBAR_UEV_PS, PolarizationBasis, SourceParams

BLOCK_PULSES = 65_536

# First laser pulse fires this long after the run starts, leaving room for jitter
PULSE_OFFSET_PS = 5_000.0

TRIGGER_CHANNEL = 0
DETECTOR_A = 1
DETECTOR_B = 2

MAX_WORKERS = 8


class ExperimentKind(Enum):
    """Measurement geometries the generator can reproduce."""

    HBT_X = "hbt_x"
    HBT_XX = "hbt_xx"
    CROSS_CORRELATION = "cross_correlation"
    HOM_X = "hom_x"
    HOM_XX = "hom_xx"
    LIFETIME_X = "lifetime_x"
    LIFETIME_XX = "lifetime_xx"

    @property
    def family(self) -> str:
        """hbt, cross_correlation, hom or lifetime."""
        return self.value.rsplit("_", 1)[0] if self.transition else self.value

    @property
    def transition(self) -> str | None:
        """Transition the experiment looks at ('x' or 'xx'), None for X-XX pairs."""
        if self is ExperimentKind.CROSS_CORRELATION:
            return None
        return self.value.rsplit("_", 1)[1]


class RelativePolarization(Enum):
    """Co- or cross-polarized analyzer configuration."""

    CO = "co"
    CROSS = "cross"


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulated measurement run."""

    kind: ExperimentKind = ExperimentKind.HBT_X
    basis: PolarizationBasis | None = None
    relative_pol: RelativePolarization | None = None
    mzi_delay: float = 1900.0  # ps
    double_pulse_sep: float = 1900.0  # ps
    irf_sigma: float = 50.0  # ps
    dark_rate: float = 25.0  # Hz per channel
    n_pulses: int = 1_000_000
    seed: int = 0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", ExperimentKind(self.kind))
        except ValueError:
            raise ValidationError("kind", f"unknown experiment kind '{self.kind}'") from None
        if self.basis is not None:
            object.__setattr__(self, "basis", PolarizationBasis.parse(self.basis))
        if self.relative_pol is not None:
            try:
                object.__setattr__(self, "relative_pol", RelativePolarization(self.relative_pol))
            except ValueError:
                raise ValidationError(
                    "relative_pol", f"expected 'co' or 'cross', got '{self.relative_pol}'"
                ) from None

        family = self.kind.family
        if self.basis is not None and family != "cross_correlation":
            raise ValidationError("basis", f"only valid for cross_correlation, not {self.kind.value}")
        if self.relative_pol is not None and family not in ("cross_correlation", "hom"):
            raise ValidationError(
                "relative_pol", f"only valid for cross_correlation and hom, not {self.kind.value}"
            )
        if family == "hom" and self.mzi_delay != self.double_pulse_sep:
            raise ValidationError(
                "mzi_delay",
                f"must equal double_pulse_sep ({self.double_pulse_sep}) for HOM, got {self.mzi_delay}",
            )
        for name in ("mzi_delay", "double_pulse_sep"):
            if not getattr(self, name) > 0:
                raise ValidationError(name, f"must be > 0, got {getattr(self, name)}")
        if not self.irf_sigma >= 0:
            raise ValidationError("irf_sigma", f"must be >= 0, got {self.irf_sigma}")
        if not self.dark_rate >= 0:
            raise ValidationError("dark_rate", f"must be >= 0, got {self.dark_rate}")
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise ValidationError("n_pulses", f"must be an integer >= 1, got {self.n_pulses}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValidationError("seed", f"must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "n_pulses", int(self.n_pulses))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def effective_basis(self) -> PolarizationBasis:
        return self.basis or PolarizationBasis.LINEAR

    @property
    def effective_relative_pol(self) -> RelativePolarization:
        return self.relative_pol or RelativePolarization.CO

    @property
    def detector_channels(self) -> tuple[int, ...]:
        if self.kind.family == "lifetime":
            return (DETECTOR_A,)
        return (DETECTOR_A, DETECTOR_B)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["kind"] = self.kind.value
        data["basis"] = self.basis.value if self.basis else None
        data["relative_pol"] = self.relative_pol.value if self.relative_pol else None
        return data


class DetectionRecord(NamedTuple):
    """A single time-tagged detection."""

    channel: int
    timestamp: int  # ps from run start
    pulse_index: int


class TimeTagStream:
    """Immutable, globally time-sorted detection records plus the run snapshot."""

    def __init__(
        self,
        params: SourceParams,
        config: ExperimentConfig,
        channel: np.ndarray,
        timestamp: np.ndarray,
        pulse_index: np.ndarray,
    ) -> None:
        channel = np.ascontiguousarray(channel, dtype=np.uint16)
        timestamp = np.ascontiguousarray(timestamp, dtype=np.int64)
        pulse_index = np.ascontiguousarray(pulse_index, dtype=np.int64)
        if not (len(channel) == len(timestamp) == len(pulse_index)):
            raise ValidationError("records", "channel, timestamp and pulse_index lengths differ")
        if len(timestamp) > 1 and np.any(np.diff(timestamp) < 0):
            raise ValidationError("records", "timestamps are not sorted")
        for array in (channel, timestamp, pulse_index):
            array.setflags(write=False)
        self.params = params
        self.config = config
        self.channel = channel
        self.timestamp = timestamp
        self.pulse_index = pulse_index

    @property
    def record_count(self) -> int:
        return len(self.timestamp)

    @property
    def duration(self) -> float:
        """Nominal run length in ps."""
        return self.config.n_pulses * self.params.rep_period + PULSE_OFFSET_PS

    def times(self, channel: int) -> np.ndarray:
        """Sorted timestamps of one channel."""
        return self.timestamp[self.channel == channel]

    def __len__(self) -> int:
        return self.record_count

    def __iter__(self) -> Iterator[DetectionRecord]:
        for c, t, p in zip(self.channel, self.timestamp, self.pulse_index):
            yield DetectionRecord(int(c), int(t), int(p))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.params == other.params
            and self.config == other.config
            and np.array_equal(self.channel, other.channel)
            and np.array_equal(self.timestamp, other.timestamp)
            and np.array_equal(self.pulse_index, other.pulse_index)
        )

    def __repr__(self) -> str:
        return f"TimeTagStream(kind={self.config.kind.value}, records={self.record_count})"


@dataclass
class CascadeEvents:
    """Outcomes of n prepared XX-X cascades (times relative to preparation)."""

    xx_delay: np.ndarray
    x_delay: np.ndarray
    flipped: np.ndarray
    phase: np.ndarray
    product_index: np.ndarray

    def __len__(self) -> int:
        return len(self.xx_delay)

    @property
    def xx_emit(self) -> np.ndarray:
        return self.xx_delay

    @property
    def x_emit(self) -> np.ndarray:
        return self.xx_delay + self.x_delay

    def pair_states(self) -> np.ndarray:
        """Two-photon polarization state vectors, shape (n, 4), order HH, HV, VH, VV."""
        n = len(self)
        states = np.zeros((n, 4), dtype=complex)
        coherent = ~self.flipped
        states[coherent, 0] = 1 / math.sqrt(2)
        states[coherent, 3] = np.exp(1j * self.phase[coherent]) / math.sqrt(2)
        flipped = np.flatnonzero(self.flipped)
        states[flipped, self.product_index[flipped]] = 1.0
        return states


@dataclass
class PhotonEvents:
    """Photons arriving at detectors (absolute times in ps, before rounding)."""

    channel: np.ndarray
    time: np.ndarray
    pulse_index: np.ndarray

    @classmethod
    def empty(cls) -> "PhotonEvents":
        return cls(np.zeros(0, np.uint16), np.zeros(0, float), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: list["PhotonEvents"]) -> "PhotonEvents":
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.channel for p in parts]).astype(np.uint16),
            np.concatenate([p.time for p in parts]).astype(float),
            np.concatenate([p.pulse_index for p in parts]).astype(np.int64),
        )

    def __len__(self) -> int:
        return len(self.time)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Counter-based random stream for one pulse block."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    return np.random.Generator(np.random.Philox(sequence))


def background_photon_ratio(g2: float) -> float:
    """Extra-photon probability, relative to the QD photon, that yields a given g2(0).

    For independent QD and background photons with per-pulse probabilities p
    and q = r*p, the HBT zero-delay estimator returns 2r/(1 + r)^2.
    """
    if not 0.0 <= g2 <= 0.5:
        raise ValidationError("g2", f"independent background can only produce g2 in [0, 0.5], got {g2}")
    if g2 == 0:
        return 0.0
    return ((1 - g2) - math.sqrt(1 - 2 * g2)) / g2


def sample_pair_event(
    params: SourceParams,
    rng: np.random.Generator,
    size: int = 1,
) -> CascadeEvents:
    """Draw `size` cascades from an already prepared biexciton.

    A spin flip scrambles the pair into a random product state with probability
    tau_x/(tau_x + tau_ss); otherwise the pair carries the FSS phase of its X delay.
    """
    xx_delay = rng.exponential(params.tau_xx, size)
    x_delay = rng.exponential(params.tau_x, size)
    if math.isinf(params.tau_ss):
        flipped = np.zeros(size, dtype=bool)
    else:
        # The flip races its own exciton dwell draw; unflipped pairs keep the full Exp(tau_x) phase spread
        flipped = rng.exponential(params.tau_ss, size) < rng.exponential(params.tau_x, size)
    product_index = rng.integers(0, 4, size)
    phase = params.fss_s * x_delay / HBAR_UEV_PS
    return CascadeEvents(xx_delay, x_delay, flipped, phase, product_index)


def _orthogonal(v: np.ndarray) -> np.ndarray:
    return np.array([-np.conj(v[1]), np.conj(v[0])])


def _check_analyzer(name: str, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    if v.shape != (2,) or abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValidationError(name, "analyzer must be a normalized 2-component Jones vector")
    return v


def project_polarization(
    pair_states: np.ndarray,
    analyzer_x: np.ndarray,
    analyzer_xx: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Born-rule sample which analyzer port each photon of each pair leaves by.

    Port 0 transmits the analyzer vector, port 1 its orthogonal complement.
    Returns (x_port, xx_port) integer arrays.
    """
    a = _check_analyzer("analyzer_x", analyzer_x)
    b = _check_analyzer("analyzer_xx", analyzer_xx)
    outcomes = [np.kron(ex, exx) for ex in (a, _orthogonal(a)) for exx in (b, _orthogonal(b))]
    amplitudes = np.atleast_2d(pair_states) @ np.conj(np.stack(outcomes, axis=1))
    probs = np.abs(amplitudes) ** 2
    probs /= probs.sum(axis=1, keepdims=True)
    cumulative = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))
    outcome = np.minimum((u[:, None] >= cumulative).sum(axis=1), 3)
    return outcome // 2, outcome % 2


def apply_detection_chain(
    events: PhotonEvents,
    params: SourceParams,
    config: ExperimentConfig,
    rng: np.random.Generator,
    span: tuple[float, float],
) -> PhotonEvents:
    """Apply photon loss, timing jitter and dark counts.

    Each photon survives with probability eta*xi. Dark counts form a Poisson
    process on every detector channel over `span` (ps).
    """
    survive = rng.random(len(events)) < params.eta * params.xi
    time = events.time[survive]
    if config.irf_sigma > 0:
        time = time + rng.normal(0.0, config.irf_sigma, len(time))
    detected = PhotonEvents(events.channel[survive], time, events.pulse_index[survive])

    start, stop = span
    darks = []
    for channel in config.detector_channels:
        count = rng.poisson(config.dark_rate * (stop - start) * 1e-12)
        t = np.sort(rng.uniform(start, stop, count))
        pulse = np.floor((t - PULSE_OFFSET_PS) / params.rep_period).astype(np.int64)
        darks.append(
            PhotonEvents(
                np.full(count, channel, dtype=np.uint16),
                t,
                np.clip(pulse, 0, config.n_pulses - 1),
            )
        )
    return PhotonEvents.concat([detected, *darks])


def _emission_delay(
    params: SourceParams,
    transition: str,
    rng: np.random.Generator,
    size: int,
) -> np.ndarray:
    """Delay after the pulse at which an (uncorrelated) photon of a transition leaves."""
    delay = rng.exponential(params.tau_xx, size)
    if transition == "x":
        delay = delay + rng.exponential(params.tau_x, size)
    return delay


def _g2_for(params: SourceParams, transition: str) -> float:
    return params.g2_x if transition == "x" else params.g2_xx


def _background(
    params: SourceParams,
    transition: str,
    t_excite: np.ndarray,
    pulses: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Independent extra photons calibrated to the configured g2(0)."""
    q = min(1.0, params.eta_xx * background_photon_ratio(_g2_for(params, transition)))
    has = rng.random(len(t_excite)) < q
    delay = _emission_delay(params, transition, rng, int(has.sum()))
    return t_excite[has] + delay, pulses[has]


def _emit_hbt(params, config, pulses, t_pulse, rng) -> PhotonEvents:
    transition = config.kind.transition
    prepared = rng.random(len(pulses)) < params.eta_xx
    events = sample_pair_event(params, rng, int(prepared.sum()))
    emit = events.x_emit if transition == "x" else events.xx_emit
    times = [t_pulse[prepared] + emit]
    index = [pulses[prepared]]
    bg_time, bg_pulse = _background(params, transition, t_pulse, pulses, rng)
    times.append(bg_time)
    index.append(bg_pulse)
    time = np.concatenate(times)
    channel = np.where(rng.random(len(time)) < 0.5, DETECTOR_A, DETECTOR_B)
    return PhotonEvents(channel.astype(np.uint16), time, np.concatenate(index))


def _emit_cross_correlation(params, config, pulses, t_pulse, rng) -> PhotonEvents:
    """Cascade photons behind the X and XX analyzers.

    No residual multi-photon background is added in this geometry; the
    correlation degrees follow the density-matrix model.
    """
    prepared = rng.random(len(pulses)) < params.eta_xx
    events = sample_pair_event(params, rng, int(prepared.sum()))
    a, _ = config.effective_basis.vectors
    x_port, xx_port = project_polarization(events.pair_states(), a, a, rng)
    xx_wanted = 0 if config.effective_relative_pol is RelativePolarization.CO else 1

    t_prep = t_pulse[prepared]
    p_prep = pulses[prepared]
    x_pass = x_port == 0
    xx_pass = xx_port == xx_wanted
    parts = [
        PhotonEvents(
            np.full(int(x_pass.sum()), DETECTOR_A, np.uint16),
            t_prep[x_pass] + events.x_emit[x_pass],
            p_prep[x_pass],
        ),
        PhotonEvents(
            np.full(int(xx_pass.sum()), DETECTOR_B, np.uint16),
            t_prep[xx_pass] + events.xx_emit[xx_pass],
            p_prep[xx_pass],
        ),
    ]
    return PhotonEvents.concat(parts)


def _emit_hom(params, config, pulses, t_pulse, rng) -> PhotonEvents:
    transition = config.kind.transition
    n = len(pulses)
    p_pol = 1.0 if config.effective_relative_pol is RelativePolarization.CO else 0.0
    same_port_prob = (1 + params.overlap_m * p_pol) / 2

    prepared, arrival, long_arm = [], [], []
    for excitation in range(2):
        t_excite = t_pulse + excitation * config.double_pulse_sep
        ok = rng.random(n) < params.eta_xx
        delay = _emission_delay(params, transition, rng, n)
        arm = rng.random(n) < 0.5
        prepared.append(ok)
        long_arm.append(arm)
        arrival.append(t_excite + delay + arm * config.mzi_delay)

    # First photon delayed by the long arm meets the second on the short arm
    meet = prepared[0] & prepared[1] & long_arm[0] & ~long_arm[1]
    port_first = rng.integers(0, 2, n)
    port_second = rng.integers(0, 2, n)
    same = rng.random(n) < same_port_prob
    port_second = np.where(meet, np.where(same, port_first, 1 - port_first), port_second)

    parts = []
    for ok, t, port in zip(prepared, arrival, (port_first, port_second)):
        parts.append(PhotonEvents((DETECTOR_A + port[ok]).astype(np.uint16), t[ok], pulses[ok]))

    for excitation in range(2):
        t_excite = t_pulse + excitation * config.double_pulse_sep
        bg_time, bg_pulse = _background(params, transition, t_excite, pulses, rng)
        arm = rng.random(len(bg_time)) < 0.5
        port = rng.integers(0, 2, len(bg_time))
        parts.append(
            PhotonEvents(
                (DETECTOR_A + port).astype(np.uint16),
                bg_time + arm * config.mzi_delay,
                bg_pulse,
            )
        )
    return PhotonEvents.concat(parts)


def _emit_lifetime(params, config, pulses, t_pulse, rng) -> PhotonEvents:
    transition = config.kind.transition
    prepared = rng.random(len(pulses)) < params.eta_xx
    events = sample_pair_event(params, rng, int(prepared.sum()))
    emit = events.x_emit if transition == "x" else events.xx_emit
    bg_time, bg_pulse = _background(params, transition, t_pulse, pulses, rng)
    time = np.concatenate([t_pulse[prepared] + emit, bg_time])
    index = np.concatenate([pulses[prepared], bg_pulse])
    return PhotonEvents(np.full(len(time), DETECTOR_A, np.uint16), time, index)


_EMITTERS = {
    "hbt": _emit_hbt,
    "cross_correlation": _emit_cross_correlation,
    "hom": _emit_hom,
    "lifetime": _emit_lifetime,
}


# Worker function for parallel block simulation (module level for ProcessPoolExecutor)
def _simulate_block(args: tuple) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Simulate one pulse block.

    Args:
        args: (params, config, block index)

    Returns:
        (block index, channel, timestamp, pulse_index) arrays, unsorted
    """
    params, config, block = args
    rng = block_rng(config.seed, block)
    period = params.rep_period

    first = block * BLOCK_PULSES
    last = min(first + BLOCK_PULSES, config.n_pulses)
    pulses = np.arange(first, last, dtype=np.int64)
    t_pulse = pulses * period + PULSE_OFFSET_PS

    photons = _EMITTERS[config.kind.family](params, config, pulses, t_pulse, rng)

    start = 0.0 if first == 0 else first * period + PULSE_OFFSET_PS
    stop = last * period + PULSE_OFFSET_PS
    detected = apply_detection_chain(photons, params, config, rng, (start, stop))

    if config.kind.family == "lifetime":
        trigger = PhotonEvents(
            np.full(len(pulses), TRIGGER_CHANNEL, np.uint16), t_pulse, pulses
        )
        detected = PhotonEvents.concat([trigger, detected])

    timestamp = np.maximum(np.rint(detected.time), 0).astype(np.int64)
    return block, detected.channel, timestamp, detected.pulse_index


def resolve_workers(requested: int | None = None) -> int:
    """Number of worker processes, capped by CSTG_THREADS when set."""
    workers = requested or min(os.cpu_count() or 4, MAX_WORKERS)
    cap = os.environ.get("CSTG_THREADS")
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            get_logger().warning("Ignoring invalid CSTG_THREADS", value=cap)
    return max(1, workers)


def simulate(
    params: SourceParams,
    config: ExperimentConfig,
    workers: int | None = None,
) -> TimeTagStream:
    """Generate the detection record stream of one experiment.

    Deterministic for a given (params, config); the worker count only changes
    how blocks are scheduled.

    Args:
        params: Physical source parameters
        config: Experiment geometry, pulse count and seed
        workers: Worker processes (default: CSTG_THREADS or CPU count)

    Returns:
        TimeTagStream sorted by timestamp, carrying params and config
    """
    logger = get_logger()
    n_blocks = math.ceil(config.n_pulses / BLOCK_PULSES)
    workers = min(resolve_workers(workers), n_blocks)

    with traced_operation(
        "simulate",
        {
            "kind": config.kind.value,
            "n_pulses": config.n_pulses,
            "seed": config.seed,
            "blocks": n_blocks,
            "workers": workers,
        },
    ) as span:
        results: dict[int, tuple] = {}
        tasks = [(params, config, block) for block in range(n_blocks)]

        if workers == 1:
            for task in tasks:
                block, *arrays = _simulate_block(task)
                results[block] = arrays
        else:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = {executor.submit(_simulate_block, task): task[2] for task in tasks}
                for future in as_completed(futures):
                    block, *arrays = future.result()
                    results[block] = arrays
                    logger.debug("Block complete", block=block, of=n_blocks)

        ordered = [results[block] for block in range(n_blocks)]
        channel = np.concatenate([r[0] for r in ordered])
        timestamp = np.concatenate([r[1] for r in ordered])
        pulse_index = np.concatenate([r[2] for r in ordered])

        order = np.lexsort((pulse_index, channel, timestamp))
        stream = TimeTagStream(
            params, config, channel[order], timestamp[order], pulse_index[order]
        )
        span.set_attribute("records", stream.record_count)
        logger.info(
            "Simulation complete",
            kind=config.kind.value,
            records=stream.record_count,
        )
        return stream
