"""Closed-form model of the biexciton-exciton two-photon polarization state.

The cascade emits an XX photon followed by an X photon. With a finite fine
structure splitting s the two decay paths acquire a relative phase s*tau/hbar
that depends on the (random) X dwell time tau; exciton spin scattering during
that dwell time scrambles the polarization correlation entirely.

Time-averaging the phase over tau ~ Exp(tau_x) gives the coherence factor
c = 1/(1 - i*x) with x = s*tau_x/hbar, and the spin-scattering channel mixes in
the maximally mixed state with weight 1 - k, k = tau_ss/(tau_ss + tau_x):

    rho = k * rho_ideal(s) + (1 - k) * I/4

Units: energies in ueV, times in ps, rates in MHz.
Two-photon basis order is (HH, HV, VH, VV) with the X photon first.
"""

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from cascade_tools.errors import ValidationError

# Reduced Planck constant in ueV*ps
HBAR_UEV_PS = 658.2119569

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10

_H = np.array([1.0, 0.0], dtype=complex)
_V = np.array([0.0, 1.0], dtype=complex)


class PolarizationBasis(Enum):
    """Polarization analysis bases and their two basis vectors."""

    LINEAR = "linear"
    DIAGONAL = "diagonal"
    CIRCULAR = "circular"

    @property
    def vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (a, b): H/V, D/A or L/R as Jones vectors."""
        s = 1 / math.sqrt(2)
        if self is PolarizationBasis.LINEAR:
            return _H.copy(), _V.copy()
        if self is PolarizationBasis.DIAGONAL:
            return s * (_H + _V), s * (_H - _V)
        return s * (_H + 1j * _V), s * (_H - 1j * _V)

    @classmethod
    def parse(cls, value: "str | PolarizationBasis") -> "PolarizationBasis":
        """Accept enum members, names, values or the HV/DA/LR shorthand."""
        if isinstance(value, cls):
            return value
        aliases = {"hv": "linear", "da": "diagonal", "lr": "circular"}
        key = str(value).strip().lower()
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValidationError("basis", f"unknown polarization basis '{value}'") from None


@dataclass(frozen=True)
class SourceParams:
    """Physical parameters of one entangled-pair source.

    Defaults describe the Purcell-enhanced GaAs device characterized in the
    reference measurements (device 1).
    """

    fss_s: float = 4.8  # ueV
    tau_x: float = 60.0  # ps
    tau_xx: float = 50.0  # ps
    tau_ss: float = 15000.0  # ps, math.inf disables spin scattering
    eta_xx: float = 0.9
    eta: float = 0.85
    xi: float = 0.07
    g2_x: float = 0.001
    g2_xx: float = 0.007
    rep_rate: float = 79.0  # MHz
    overlap_m: float = 0.9
    apd_correction: float = 1.25

    def __post_init__(self) -> None:
        if not (self.fss_s >= 0 and math.isfinite(self.fss_s)):
            raise ValidationError("fss_s", f"must be finite and >= 0, got {self.fss_s}")
        for name in ("tau_x", "tau_xx", "rep_rate"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValidationError(name, f"must be finite and > 0, got {value}")
        if not self.tau_ss > 0:
            raise ValidationError("tau_ss", f"must be > 0, got {self.tau_ss}")
        for name in ("eta_xx", "eta", "xi", "overlap_m"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(name, f"must be in [0, 1], got {value}")
        for name in ("g2_x", "g2_xx"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValidationError(name, f"must be in [0, 1), got {value}")
        if not self.apd_correction >= 1.0:
            raise ValidationError(
                "apd_correction", f"must be >= 1, got {self.apd_correction}"
            )

    @property
    def rep_period(self) -> float:
        """Laser repetition period in ps."""
        return 1e6 / self.rep_rate

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class TwoPhotonDensityMatrix:
    """Validated 4x4 polarization density matrix over (HH, HV, VH, VV)."""

    entries: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        rho = np.asarray(self.entries, dtype=complex)
        if rho.shape != (4, 4):
            raise ValidationError("rho", f"expected shape (4, 4), got {rho.shape}")
        if not np.all(np.abs(rho - rho.conj().T) <= HERMITIAN_TOL):
            raise ValidationError("rho", "matrix is not Hermitian")
        trace = np.trace(rho)
        if abs(trace - 1.0) > TRACE_TOL:
            raise ValidationError("rho", f"trace must be 1, got {trace.real:.15g}")
        smallest = float(np.linalg.eigvalsh(rho)[0])
        if smallest < -PSD_TOL:
            raise ValidationError("rho", f"matrix is not positive semidefinite ({smallest:.3g})")
        rho.setflags(write=False)
        object.__setattr__(self, "entries", rho)

    def __getitem__(self, index: tuple[int, int]) -> complex:
        return complex(self.entries[index])

    def expectation(self, operator: np.ndarray) -> complex:
        """Return Tr[rho * operator]."""
        return complex(np.trace(self.entries @ operator))

    @classmethod
    def from_pure(cls, psi: np.ndarray) -> "TwoPhotonDensityMatrix":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))


def _require_positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValidationError(name, f"must be > 0, got {value}")


def phase_parameter(s: float, tau_x: float) -> float:
    """Dimensionless dephasing parameter x = s * tau_x / hbar."""
    return s * tau_x / HBAR_UEV_PS


def coherence_factor(s: float, tau_x: float) -> complex:
    """Time average of exp(i*s*tau/hbar) over tau ~ Exp(mean tau_x).

    Returns 1/(1 - i*x) = (1 + i*x)/(1 + x^2).
    """
    _require_positive("tau_x", tau_x)
    if s < 0:
        raise ValidationError("fss_s", f"must be >= 0, got {s}")
    x = phase_parameter(s, tau_x)
    return complex(1.0, x) / (1.0 + x * x)


def scattering_survival(tau_x: float, tau_ss: float) -> float:
    """Probability that no spin flip occurs before the exciton decays."""
    _require_positive("tau_x", tau_x)
    _require_positive("tau_ss", tau_ss)
    if math.isinf(tau_ss):
        return 1.0
    return tau_ss / (tau_ss + tau_x)


def bell_psi_plus() -> TwoPhotonDensityMatrix:
    """Projector onto (|HH> + |VV>)/sqrt(2)."""
    return TwoPhotonDensityMatrix.from_pure(np.array([1, 0, 0, 1]))


def model_density_matrix(params: SourceParams) -> TwoPhotonDensityMatrix:
    """Time-averaged two-photon state for the given source."""
    k = scattering_survival(params.tau_x, params.tau_ss)
    c = coherence_factor(params.fss_s, params.tau_x)

    ideal = np.zeros((4, 4), dtype=complex)
    ideal[0, 0] = ideal[3, 3] = 0.5
    # rho = E[|psi><psi|] with psi_VV = exp(i*s*tau/hbar) psi_HH:
    # rho[VV,HH] = c/2 and rho[HH,VV] = conj(c)/2
    ideal[3, 0] = c / 2
    ideal[0, 3] = c.conjugate() / 2

    rho = k * ideal + (1 - k) * np.eye(4) / 4
    return TwoPhotonDensityMatrix(rho)


def fidelity_to_psi_plus(rho: TwoPhotonDensityMatrix) -> float:
    """Overlap <psi+|rho|psi+>."""
    if not isinstance(rho, TwoPhotonDensityMatrix):
        rho = TwoPhotonDensityMatrix(rho)
    f = (rho[0, 0].real + rho[3, 3].real) / 2 + rho[0, 3].real
    return float(min(1.0, max(0.0, f)))


def _projector(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    v = np.kron(a, b)
    return np.outer(v, v.conj())


def predicted_correlation(
    rho: TwoPhotonDensityMatrix,
    basis: PolarizationBasis | str,
) -> float:
    """Degree of polarization correlation C = (P_co - P_cross)/(P_co + P_cross)."""
    basis = PolarizationBasis.parse(basis)
    a, b = basis.vectors
    co = rho.expectation(_projector(a, a) + _projector(b, b)).real
    cross = rho.expectation(_projector(a, b) + _projector(b, a)).real
    return float((co - cross) / (co + cross))


def predicted_correlations(rho: TwoPhotonDensityMatrix) -> dict[PolarizationBasis, float]:
    """C for all three analysis bases."""
    return {basis: predicted_correlation(rho, basis) for basis in PolarizationBasis}


def fidelity_from_correlations(c_lin: float, c_diag: float, c_circ: float) -> float:
    """Entanglement fidelity f = (1 + C_lin + C_diag - C_circ)/4."""
    for name, value in (("c_lin", c_lin), ("c_diag", c_diag), ("c_circ", c_circ)):
        if not -1.0 <= value <= 1.0:
            raise ValidationError(name, f"must be in [-1, 1], got {value}")
    return (1.0 + c_lin + c_diag - c_circ) / 4.0


def fidelity_at(s: float, tau_x: float, tau_ss: float) -> float:
    """Analytic model fidelity f(s) = 1/4 + k/4 + (k/2)/(1 + x^2)."""
    k = scattering_survival(tau_x, tau_ss)
    x = phase_parameter(s, tau_x)
    return 0.25 + 0.25 * k + 0.5 * k / (1.0 + x * x)


def fidelity_vs_fss_curve(
    params: SourceParams,
    fss_grid: list[float],
) -> list[tuple[float, float]]:
    """Model fidelity at each FSS value, holding all other parameters fixed."""
    if len(fss_grid) == 0:
        raise ValidationError("fss_grid", "must not be empty")
    curve = []
    for s in fss_grid:
        if s < 0:
            raise ValidationError("fss_grid", f"FSS values must be >= 0, got {s}")
        curve.append((float(s), fidelity_at(s, params.tau_x, params.tau_ss)))
    return curve


def _require_probability(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValidationError(name, f"must be in [0, 1], got {value}")


def pair_collection_probability(
    eta_xx: float,
    eta: float,
    g2_x: float,
    g2_xx: float,
) -> float:
    """Probability of collecting one photon pair per excitation pulse."""
    for name, value in (("eta_xx", eta_xx), ("eta", eta), ("g2_x", g2_x), ("g2_xx", g2_xx)):
        _require_probability(name, value)
    return eta_xx * eta**2 * math.sqrt(1 - g2_x) * math.sqrt(1 - g2_xx)


def collection_efficiency_from_rate(
    detected_rate: float,
    rep_rate: float,
    xi: float,
    apd_correction: float,
    eta_xx: float,
) -> float:
    """Single-photon collection efficiency at the first lens from a detected rate.

    Rates in MHz; xi is the setup transmission after the first lens.
    """
    _require_positive("detected_rate", detected_rate)
    _require_positive("rep_rate", rep_rate)
    for name, value in (("xi", xi), ("eta_xx", eta_xx)):
        if not 0.0 < value <= 1.0:
            raise ValidationError(name, f"must be in (0, 1], got {value}")
    if apd_correction < 1.0:
        raise ValidationError("apd_correction", f"must be >= 1, got {apd_correction}")
    eta = detected_rate * apd_correction / (rep_rate * xi * eta_xx)
    if eta > 1.0 + 1e-12:
        raise ValidationError(
            "detected_rate",
            f"inconsistent inputs: implied collection efficiency {eta:.4f} exceeds 1",
        )
    return min(eta, 1.0)


def purcell_factor(tau_bulk: float, tau_cavity: float) -> float:
    """Purcell factor as the bulk-to-cavity lifetime ratio."""
    _require_positive("tau_bulk", tau_bulk)
    _require_positive("tau_cavity", tau_cavity)
    return tau_bulk / tau_cavity


def rabi_preparation(power: float, p_pi: float, eta_max: float) -> float:
    """Phenomenological XX preparation probability under two-photon excitation.

    eta_xx(P) = eta_max * sin^2((pi/2) * sqrt(P/P_pi)), so the first maximum
    sits at the pi-pulse power P_pi.
    """
    if power < 0:
        raise ValidationError("power", f"must be >= 0, got {power}")
    _require_positive("p_pi", p_pi)
    _require_probability("eta_max", eta_max)
    return eta_max * math.sin(math.pi / 2 * math.sqrt(power / p_pi)) ** 2
