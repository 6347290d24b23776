"""Plot-ready CSV tables for the `curve` commands."""

import csv
import io
import math
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np

from cascade_tools.errors import ValidationError
from cascade_tools.fitting import synthetic_fss_scan
from cascade_tools.physics import (
    PolarizationBasis,
    SourceParams,
    fidelity_vs_fss_curve,
    model_density_matrix,
    predicted_correlations,
    rabi_preparation,
)

FIDELITY_COLUMNS = ("fss_uev", "fidelity", "c_linear", "c_diagonal", "c_circular")
RABI_COLUMNS = ("power_nw", "sqrt_power", "eta_xx", "detected_rate_mhz")
FSS_SCAN_COLUMNS = ("angle_deg", "delta_e_uev")


def linear_grid(start: float, stop: float, step: float) -> list[float]:
    """start, start+step, ... up to and including stop (within rounding)."""
    if not step > 0:
        raise ValidationError("step", f"must be > 0, got {step}")
    if stop < start:
        raise ValidationError("to", f"must be >= from ({start}), got {stop}")
    count = math.floor((stop - start) / step + 1e-9)
    return [round(start + i * step, 9) for i in range(count + 1)]


def fidelity_vs_fss_rows(params: SourceParams, grid: Sequence[float]) -> list[tuple[float, ...]]:
    """Model fidelity and correlation degrees at each FSS value."""
    rows = []
    for s, fidelity in fidelity_vs_fss_curve(params, list(grid)):
        correlations = predicted_correlations(model_density_matrix(replace(params, fss_s=s)))
        rows.append(
            (
                s,
                fidelity,
                correlations[PolarizationBasis.LINEAR],
                correlations[PolarizationBasis.DIAGONAL],
                correlations[PolarizationBasis.CIRCULAR],
            )
        )
    return rows


def rabi_rows(
    params: SourceParams,
    powers: Sequence[float],
    p_pi: float,
    eta_max: float,
) -> list[tuple[float, ...]]:
    """Preparation probability and expected detected X rate versus excitation power."""
    rows = []
    for power in powers:
        eta_xx = rabi_preparation(power, p_pi, eta_max)
        rate = params.rep_rate * eta_xx * params.eta * params.xi / params.apd_correction
        rows.append((power, math.sqrt(power), eta_xx, rate))
    return rows


def fss_scan_rows(fss: float, noise: float, step: float, seed: int) -> list[tuple[float, ...]]:
    angles, energies = synthetic_fss_scan(fss, noise, linear_grid(0.0, 360.0, step), seed=seed)
    return list(zip(angles.tolist(), energies.tolist()))


def format_table(columns: Sequence[str], rows: Sequence[Sequence[float]], digits: Sequence[int]) -> str:
    """CSV text with a header row and fixed decimals per column."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([f"{value:.{d}f}" for value, d in zip(row, digits)])
    return out.getvalue()


def read_fss_scan(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an angle/energy CSV written by `curve fss-scan` or a measurement."""
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise ValidationError("fss_scan", f"cannot read {path}: {e}") from None
    if table.shape[1] < 2:
        raise ValidationError("fss_scan", "expected angle and energy columns")
    return table[:, 0], table[:, 1]
