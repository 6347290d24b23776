"""Tests for curve tables."""

from pathlib import Path

import pytest

from cascade_tools.curves import (
    FIDELITY_COLUMNS,
    fidelity_vs_fss_rows,
    format_table,
    linear_grid,
    rabi_rows,
    read_fss_scan,
)
from cascade_tools.errors import ValidationError
from cascade_tools.physics import SourceParams


class TestLinearGrid:
    """Tests for linear_grid."""

    def test_includes_stop(self):
        """The stop value is included despite float steps."""
        grid = linear_grid(0.0, 1.0, 0.1)
        assert len(grid) == 11
        assert grid[-1] == 1.0
        assert grid[3] == 0.3

    def test_single_point(self):
        """start == stop gives one point."""
        assert linear_grid(4.8, 4.8, 0.1) == [4.8]

    def test_rejects_bad_step(self):
        """Steps must be positive."""
        with pytest.raises(ValidationError):
            linear_grid(0.0, 1.0, -0.1)

    def test_rejects_reversed_range(self):
        """The range must not run backwards."""
        with pytest.raises(ValidationError):
            linear_grid(2.0, 1.0, 0.1)


class TestRows:
    """Tests for curve rows."""

    def test_fidelity_rows_consistent(self):
        """Fidelity equals (1 + C_lin + C_diag - C_circ)/4 on every row."""
        for s, f, c_lin, c_diag, c_circ in fidelity_vs_fss_rows(SourceParams(), [0.0, 4.8, 10.0]):
            assert f == pytest.approx((1 + c_lin + c_diag - c_circ) / 4)
            assert c_circ == pytest.approx(-c_diag)

    def test_rabi_rate(self):
        """Detected rate scales the preparation probability by the setup."""
        params = SourceParams()
        (_, _, eta_xx, rate), = rabi_rows(params, [36.0], 36.0, 0.9)
        assert eta_xx == pytest.approx(0.9)
        assert rate == pytest.approx(79.0 * 0.9 * 0.85 * 0.07 / 1.25)

    def test_format_table(self):
        """Values are written with fixed decimals under the column row."""
        text = format_table(FIDELITY_COLUMNS, [(4.8, 0.9170043, 1, 0.5, -0.5)], (3, 6, 6, 6, 6))
        assert text.splitlines() == [
            "fss_uev,fidelity,c_linear,c_diagonal,c_circular",
            "4.800,0.917004,1.000000,0.500000,-0.500000",
        ]


class TestReadFssScan:
    """Tests for read_fss_scan."""

    def test_reads_two_columns(self, tmp_path: Path):
        """Angle and energy columns are returned."""
        path = tmp_path / "scan.csv"
        path.write_text("angle_deg,delta_e_uev\n0,1.5\n10,2.0\n")
        angles, energies = read_fss_scan(path)
        assert angles.tolist() == [0.0, 10.0]
        assert energies.tolist() == [1.5, 2.0]

    def test_malformed(self, tmp_path: Path):
        """Unparseable files are validation errors."""
        path = tmp_path / "scan.csv"
        path.write_text("angle_deg,delta_e_uev\nzero,one\n")
        with pytest.raises(ValidationError):
            read_fss_scan(path)
