"""Figures of merit, report assembly and bundled reference data."""

import csv
import io
import json
import math
from collections.abc import Iterator, Mapping
from dataclasses import astuple, dataclass, field, fields
from importlib import resources
from typing import Any

from cascade_tools.errors import IncompleteReportError, ValidationError
from cascade_tools.observability import get_logger, traced_operation
from cascade_tools.physics import SourceParams, fidelity_from_correlations, pair_collection_probability


@dataclass(frozen=True)
class Estimate:
    """A value with its one-standard-deviation uncertainty.

    `raw` keeps the unclamped value when `value` was clamped into its
    physical range.
    """

    value: float
    sigma: float = 0.0
    raw: float | None = None

    def __post_init__(self) -> None:
        if not self.sigma >= 0:
            raise ValidationError("sigma", f"uncertainty must be >= 0, got {self.sigma}")

    def __iter__(self) -> Iterator[float]:
        yield self.value
        yield self.sigma

    def clamped(self, lo: float, hi: float) -> "Estimate":
        if lo <= self.value <= hi:
            return self
        return Estimate(min(max(self.value, lo), hi), self.sigma, raw=self.value)

    def to_dict(self) -> dict[str, float]:
        out = {"value": self.value, "sigma": self.sigma}
        if self.raw is not None:
            out["raw"] = self.raw
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | float) -> "Estimate":
        if isinstance(data, (int, float)):
            return cls(float(data))
        raw = data.get("raw")
        return cls(float(data["value"]), float(data.get("sigma", 0.0)), None if raw is None else float(raw))

    def __str__(self) -> str:
        return f"{self.value:.4g} ± {self.sigma:.2g}"


FOM_FIELDS = (
    "g2_x",
    "g2_xx",
    "c_lin",
    "c_diag",
    "c_circ",
    "fidelity",
    "v_hom_x",
    "v_hom_xx",
    "tau_x",
    "tau_xx",
    "fss",
    "eta",
    "pair_probability",
)

PROBABILITY_FIELDS = frozenset({"g2_x", "g2_xx", "fidelity", "v_hom_x", "v_hom_xx", "eta", "pair_probability"})
CORRELATION_FIELDS = frozenset({"c_lin", "c_diag", "c_circ"})

UNITS = {"tau_x": "ps", "tau_xx": "ps", "fss": "μeV"}


@dataclass(frozen=True)
class Thresholds:
    """Pass/fail limits applied to a compiled report."""

    fidelity_min: float = 0.5
    g2_max: float = 0.01
    visibility_min: float = 0.5

    def evaluate(self, report: "FomReport") -> dict[str, bool]:
        flags: dict[str, bool] = {}
        if report.fidelity is not None:
            flags["fidelity"] = report.fidelity.value > self.fidelity_min
        for name in ("g2_x", "g2_xx"):
            est = getattr(report, name)
            if est is not None:
                flags[name] = est.value < self.g2_max
        for name in ("v_hom_x", "v_hom_xx"):
            est = getattr(report, name)
            if est is not None:
                flags[name] = est.value > self.visibility_min
        return flags


@dataclass(frozen=True)
class FomReport:
    """Extracted figures of merit; absent measurements stay None."""

    g2_x: Estimate | None = None
    g2_xx: Estimate | None = None
    c_lin: Estimate | None = None
    c_diag: Estimate | None = None
    c_circ: Estimate | None = None
    fidelity: Estimate | None = None
    v_hom_x: Estimate | None = None
    v_hom_xx: Estimate | None = None
    tau_x: Estimate | None = None
    tau_xx: Estimate | None = None
    fss: Estimate | None = None
    eta: Estimate | None = None
    pair_probability: Estimate | None = None
    flags: dict[str, bool] = field(default_factory=dict)

    def estimates(self) -> dict[str, Estimate]:
        return {name: est for name in FOM_FIELDS if (est := getattr(self, name)) is not None}

    def to_dict(self) -> dict[str, Any]:
        return {
            "figures": {name: est.to_dict() for name, est in self.estimates().items()},
            "flags": dict(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FomReport":
        figures = data.get("figures", data)
        unknown = set(figures) - set(FOM_FIELDS)
        if unknown:
            raise ValidationError("figures", f"unknown figures of merit: {', '.join(sorted(unknown))}")
        values = {name: Estimate.from_dict(figures[name]) for name in FOM_FIELDS if name in figures}
        return cls(**values, flags=dict(data.get("flags", {})))

    @classmethod
    def from_json(cls, text: str) -> "FomReport":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError("report", f"not valid JSON: {e}") from e
        return cls.from_dict(data)

    def render_text(self) -> str:
        lines = ["Figures of merit", "----------------"]
        for name, est in self.estimates().items():
            unit = f" {UNITS[name]}" if name in UNITS else ""
            line = f"{name:<18}{est.value:>10.4f} ± {est.sigma:.4f}{unit}"
            if est.raw is not None:
                line += f"  (raw {est.raw:.4f})"
            if name in self.flags:
                line += "  PASS" if self.flags[name] else "  FAIL"
            lines.append(line)
        return "\n".join(lines) + "\n"


def _derive_fidelity(estimates: Mapping[str, Estimate]) -> Estimate:
    c_lin, c_diag, c_circ = (estimates[k] for k in ("c_lin", "c_diag", "c_circ"))
    value = fidelity_from_correlations(
        *(min(max(c.value, -1.0), 1.0) for c in (c_lin, c_diag, c_circ))
    )
    sigma = math.sqrt(c_lin.sigma**2 + c_diag.sigma**2 + c_circ.sigma**2) / 4
    return Estimate(value, sigma)


def _clip01(value: float) -> float:
    return min(max(value, 0.0), 1.0)


def _derive_pair_probability(estimates: Mapping[str, Estimate], params: SourceParams) -> Estimate:
    eta = estimates["eta"]
    g2_x = estimates.get("g2_x", Estimate(params.g2_x))
    g2_xx = estimates.get("g2_xx", Estimate(params.g2_xx))
    value = pair_collection_probability(
        params.eta_xx, _clip01(eta.value), _clip01(g2_x.value), _clip01(g2_xx.value)
    )
    sigma = math.sqrt(
        (2 * value / max(eta.value, 1e-12) * eta.sigma) ** 2
        + (value / (2 * (1 - _clip01(g2_x.value))) * g2_x.sigma) ** 2
        + (value / (2 * (1 - _clip01(g2_xx.value))) * g2_xx.sigma) ** 2
    )
    return Estimate(value, sigma)


def compile_report(
    estimates: Mapping[str, Estimate],
    params: SourceParams | None = None,
    thresholds: Thresholds | None = None,
    required: tuple[str, ...] = (),
) -> FomReport:
    """Assemble estimator outputs into a report.

    Fidelity is derived from the three correlation degrees and the pair
    probability from the collection efficiency when they are not supplied
    directly. Probabilities are clamped to [0, 1] and correlations to [-1, 1],
    keeping the raw value alongside.

    Args:
        estimates: Figure-of-merit name to Estimate
        params: Source parameters for derived figures (default: device-1)
        thresholds: Pass/fail limits for the flags
        required: Names that must be present after derivation

    Returns:
        FomReport with flags evaluated

    Raises:
        ValidationError: If an estimate name is not a figure of merit
        IncompleteReportError: If nothing was estimated or a required name is missing
    """
    unknown = set(estimates) - set(FOM_FIELDS)
    if unknown:
        raise ValidationError("estimates", f"unknown figures of merit: {', '.join(sorted(unknown))}")
    if not estimates:
        raise IncompleteReportError([])

    params = params or SourceParams()
    thresholds = thresholds or Thresholds()

    with traced_operation("compile_report", {"estimates": len(estimates)}) as span:
        values = dict(estimates)
        if "fidelity" not in values and all(k in values for k in ("c_lin", "c_diag", "c_circ")):
            values["fidelity"] = _derive_fidelity(values)
        if "pair_probability" not in values and "eta" in values:
            values["pair_probability"] = _derive_pair_probability(values, params)

        missing = [name for name in required if name not in values]
        if missing:
            raise IncompleteReportError(missing)

        for name, est in values.items():
            if name in PROBABILITY_FIELDS:
                values[name] = est.clamped(0.0, 1.0)
            elif name in CORRELATION_FIELDS:
                values[name] = est.clamped(-1.0, 1.0)

        report = FomReport(**values)
        report = FomReport(**values, flags=thresholds.evaluate(report))
        span.set_attribute("figures", len(values))
        get_logger().info("Compiled report", figures=sorted(values), flags=report.flags)
        return report


@dataclass(frozen=True)
class ReferenceSource:
    """One row of the published source comparison table.

    Figures are kept as printed, qualifiers such as "<" or "~" included.
    """

    source: str
    pair_probability: str
    fidelity: str
    indistinguishability: str
    citation: str


def _format_figure(est: Estimate | None) -> str:
    return "Not shown" if est is None else f"{est.value:.2f}"


def load_reference_table() -> list[ReferenceSource]:
    """Read the bundled comparison table of entangled-photon sources."""
    text = resources.files("cascade_tools.data").joinpath("reference_sources.csv").read_text("utf-8")
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append(
            ReferenceSource(
                source=row["source"],
                pair_probability=row["pair_probability"],
                fidelity=row["fidelity"],
                indistinguishability=row["indistinguishability"],
                citation=row["citation"],
            )
        )
    return rows


def load_measurements(name: str = "device-1-measurements.json") -> dict[str, Estimate]:
    """Read a bundled set of measured figures of merit."""
    text = resources.files("cascade_tools.data").joinpath(name).read_text("utf-8")
    return FomReport.from_json(text).estimates()


def report_reference_row(report: FomReport, label: str = "This work") -> ReferenceSource:
    """Summarize a report the way the comparison table does."""
    visibilities = [v for v in (report.v_hom_x, report.v_hom_xx) if v is not None]
    mean = Estimate(sum(v.value for v in visibilities) / len(visibilities)) if visibilities else None
    return ReferenceSource(
        source=label,
        pair_probability=_format_figure(report.pair_probability),
        fidelity=_format_figure(report.fidelity),
        indistinguishability=_format_figure(mean),
        citation="computed",
    )


def format_reference_csv(rows: list[ReferenceSource]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow([f.name for f in fields(ReferenceSource)])
    writer.writerows(astuple(row) for row in rows)
    return out.getvalue()
