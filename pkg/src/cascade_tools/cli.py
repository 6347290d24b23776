"""Main CLI entry point for cascade-tools."""

import atexit
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Optional

import numpy as np
import typer
from rich.console import Console
from rich.table import Table

from cascade_tools import curves
from cascade_tools.analysis import analyze_streams
from cascade_tools.cascade import simulate
from cascade_tools.config import RunConfig, load_config
from cascade_tools.errors import AnalysisError, FormatError, ValidationError
from cascade_tools.observability import get_logger, init_observability, shutdown_observability, traced_operation
from cascade_tools.physics import purcell_factor
from cascade_tools.report import (
    FomReport,
    compile_report,
    format_reference_csv,
    load_measurements,
    load_reference_table,
    report_reference_row,
)
from cascade_tools.tagfile import read_tagfile, write_tagfile, write_text_atomic

app = typer.Typer(
    name="cascade-tools",
    help="Simulate and analyze quantum-dot cascade entangled photon pair sources.",
    no_args_is_help=True,
)
# Diagnostics go to stderr; stdout carries CSV and report output
console = Console(stderr=True)
stdout = Console()

curve_app = typer.Typer(help="Emit plot-ready CSV curve tables.")
app.add_typer(curve_app, name="curve")

EXIT_VALIDATION = 2
EXIT_ANALYSIS = 3


@app.callback()
def main_callback() -> None:
    """Cascade Tools - entangled photon pair source simulation and analysis."""
    # Use sync export for CLI to ensure spans are sent before process exits
    init_observability(sync_export=True)
    atexit.register(shutdown_observability)


@curve_app.callback(invoke_without_command=True)
def curve_callback(ctx: typer.Context) -> None:
    """Emit plot-ready CSV curve tables."""
    if ctx.invoked_subcommand is None:
        console.print("[yellow]Use --help to see available options[/yellow]")


@contextmanager
def _exit_on_error() -> Iterator[None]:
    """Map toolkit errors to exit codes with a message on stderr."""
    try:
        yield
    except (ValidationError, FormatError) as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_VALIDATION) from None
    except AnalysisError as e:
        console.print(f"[red]Analysis failed:[/red] {e}")
        raise typer.Exit(EXIT_ANALYSIS) from None


def _load_run_config(path: Path | None) -> RunConfig:
    return load_config(path) if path is not None else RunConfig()


def _emit(text: str, output: Path | None) -> None:
    """Write text atomically to a file, or to stdout."""
    if output is None:
        typer.echo(text, nl=False)
    else:
        write_text_atomic(output, text)
        console.print(f"[green]Wrote[/green] {output}")


ConfigOption = Annotated[
    Optional[Path],
    typer.Option(
        "--config", "-c", help="Run configuration file; bundled device-1.cfg and device-4.cfg load by name"
    ),
]


@app.command("simulate")
def simulate_command(
    config: ConfigOption = None,
    kind: Annotated[
        Optional[str],
        typer.Option(
            "--kind", "-k",
            help="hbt_x, hbt_xx, cross_correlation, hom_x, hom_xx, lifetime_x or lifetime_xx",
        ),
    ] = None,
    basis: Annotated[
        Optional[str],
        typer.Option("--basis", help="Analysis basis for cross_correlation: linear, diagonal or circular"),
    ] = None,
    relative_pol: Annotated[
        Optional[str],
        typer.Option("--relative-pol", help="co or cross (cross_correlation and hom)"),
    ] = None,
    n_pulses: Annotated[
        Optional[int],
        typer.Option("--n-pulses", help="Number of laser pulses (pulse pairs for hom)"),
    ] = None,
    seed: Annotated[
        Optional[int],
        typer.Option("--seed", help="Random seed; identical seeds give identical files"),
    ] = None,
    workers: Annotated[
        Optional[int],
        typer.Option("--workers", help="Worker processes (default: CSTG_THREADS or CPU count)"),
    ] = None,
    fmt: Annotated[
        str,
        typer.Option("--format", help="Tag file encoding: binary or csv"),
    ] = "binary",
    output: Annotated[
        Optional[Path],
        typer.Option("--output", "-o", help="Tag file to write (default: [output] tags)"),
    ] = None,
) -> None:
    """Simulate one measurement run and write its detection records.

    Example:
        cascade-tools simulate -c device-1.cfg --kind cross_correlation \\
            --basis diagonal --relative-pol co --seed 7 -o diag-co.cstg
    """
    with traced_operation("cli_simulate", {"kind": kind, "format": fmt, "seed": seed}):
        with _exit_on_error():
            run = _load_run_config(config).with_overrides(
                "experiment",
                kind=kind,
                basis=basis,
                relative_pol=relative_pol,
                n_pulses=n_pulses,
                seed=seed,
            )
            target = output or (Path(run.output.tags) if run.output.tags else None)
            if target is None:
                raise ValidationError("output", "no tag file given (use --output or [output] tags)")
            stream = simulate(run.params, run.experiment, workers=workers)
            write_tagfile(stream, target, fmt)
            console.print(
                f"[green]Success![/green] Wrote {stream.record_count} records "
                f"({run.experiment.kind.value}) to {target}"
            )


@app.command("analyze")
def analyze_command(
    tagfiles: Annotated[
        Optional[list[Path]],
        typer.Argument(help="Tag files from one or more simulated or measured runs"),
    ] = None,
    config: ConfigOption = None,
    output: Annotated[
        Optional[Path],
        typer.Option("--output", "-o", help="JSON report path (default: [output] report, else stdout)"),
    ] = None,
    text: Annotated[
        Optional[Path],
        typer.Option("--text", help="Human-readable report path (default: [output] text_report, else stderr)"),
    ] = None,
    bin_width: Annotated[
        Optional[float],
        typer.Option("--bin-width", help="Coincidence histogram bin width in ps"),
    ] = None,
    window: Annotated[
        Optional[float],
        typer.Option("--window", help="Peak integration window in ps (default: half the period)"),
    ] = None,
    apd_correction: Annotated[
        Optional[float],
        typer.Option("--apd-correction", help="Detector nonlinearity factor for the efficiency estimate"),
    ] = None,
    fss_scan: Annotated[
        Optional[Path],
        typer.Option("--fss-scan", help="CSV polarization scan (angle_deg, delta_e_uev) to fit for FSS"),
    ] = None,
) -> None:
    """Extract figures of merit from tag files.

    Example:
        cascade-tools analyze hbt.cstg diag-co.cstg diag-cross.cstg -o fom.json
    """
    paths = tagfiles or []
    with traced_operation("cli_analyze", {"tagfiles": len(paths)}):
        with _exit_on_error():
            run = _load_run_config(config).with_overrides(
                "analysis", bin_width=bin_width, window=window, apd_correction=apd_correction
            )
            streams = [read_tagfile(path) for path in paths]
            scan = curves.read_fss_scan(fss_scan) if fss_scan is not None else None
            report = analyze_streams(streams, run.analysis, scan)

            json_target = output or (Path(run.output.report) if run.output.report else None)
            text_target = text or (Path(run.output.text_report) if run.output.text_report else None)
            # Both reports are rendered before either is written; a failed write leaves neither file
            json_text, summary = report.to_json(), report.render_text()
            written: list[Path] = []
            try:
                if text_target is not None:
                    write_text_atomic(text_target, summary)
                    written.append(text_target)
                _emit(json_text, json_target)
            except OSError as e:
                for path in written:
                    path.unlink(missing_ok=True)
                raise ValidationError("output", f"cannot write report: {e}") from None
            if text_target is None:
                console.print(summary, highlight=False)


@curve_app.command("fidelity-vs-fss")
def curve_fidelity(
    config: ConfigOption = None,
    tau_x: Annotated[
        Optional[float],
        typer.Option("--tau-x", help="X lifetime in ps"),
    ] = None,
    tau_ss: Annotated[
        Optional[float],
        typer.Option("--tau-ss", help="Spin-scattering time in ps (inf disables)"),
    ] = None,
    start: Annotated[float, typer.Option("--from", help="First FSS value in ueV")] = 0.0,
    stop: Annotated[float, typer.Option("--to", help="Last FSS value in ueV")] = 20.0,
    step: Annotated[float, typer.Option("--step", help="FSS step in ueV")] = 0.1,
    output: Annotated[
        Optional[Path],
        typer.Option("--output", "-o", help="CSV path (default: stdout)"),
    ] = None,
) -> None:
    """Model fidelity versus FSS.

    Columns: fss_uev, fidelity, c_linear, c_diagonal, c_circular.
    """
    with traced_operation("cli_curve_fidelity", {"tau_x": tau_x, "tau_ss": tau_ss}):
        with _exit_on_error():
            run = _load_run_config(config).with_overrides("params", tau_x=tau_x, tau_ss=tau_ss)
            rows = curves.fidelity_vs_fss_rows(run.params, curves.linear_grid(start, stop, step))
            _emit(curves.format_table(curves.FIDELITY_COLUMNS, rows, (3, 6, 6, 6, 6)), output)


@curve_app.command("rabi")
def curve_rabi(
    config: ConfigOption = None,
    p_pi: Annotated[float, typer.Option("--p-pi", help="Pi-pulse power in nW")] = 36.0,
    eta_max: Annotated[
        Optional[float],
        typer.Option("--eta-max", help="Peak preparation probability (default: eta_xx)"),
    ] = None,
    start: Annotated[float, typer.Option("--from", help="Lowest power in nW")] = 0.0,
    stop: Annotated[float, typer.Option("--to", help="Highest power in nW")] = 200.0,
    points: Annotated[int, typer.Option("--points", help="Number of power values")] = 101,
    output: Annotated[
        Optional[Path],
        typer.Option("--output", "-o", help="CSV path (default: stdout)"),
    ] = None,
) -> None:
    """Phenomenological two-photon Rabi curve.

    Columns: power_nw, sqrt_power, eta_xx, detected_rate_mhz.
    """
    with traced_operation("cli_curve_rabi", {"p_pi": p_pi, "points": points}):
        with _exit_on_error():
            if points < 2:
                raise ValidationError("points", f"must be >= 2, got {points}")
            if start < 0 or stop <= start:
                raise ValidationError("to", "power range must satisfy 0 <= from < to")
            params = _load_run_config(config).params
            powers = np.linspace(start, stop, points).tolist()
            rows = curves.rabi_rows(params, powers, p_pi, params.eta_xx if eta_max is None else eta_max)
            _emit(curves.format_table(curves.RABI_COLUMNS, rows, (4, 6, 6, 6)), output)


@curve_app.command("fss-scan")
def curve_fss_scan(
    fss: Annotated[float, typer.Option("--fss", help="Fine-structure splitting in ueV")] = 4.8,
    noise: Annotated[float, typer.Option("--noise", help="Gaussian energy noise in ueV")] = 0.1,
    step: Annotated[float, typer.Option("--step", help="Polarizer angle step in degrees")] = 10.0,
    seed: Annotated[int, typer.Option("--seed", help="Random seed")] = 0,
    output: Annotated[
        Optional[Path],
        typer.Option("--output", "-o", help="CSV path (default: stdout)"),
    ] = None,
) -> None:
    """Synthetic polarization scan of the XX-X energy difference.

    Columns: angle_deg, delta_e_uev.
    """
    with traced_operation("cli_curve_fss_scan", {"fss": fss, "seed": seed}):
        with _exit_on_error():
            rows = curves.fss_scan_rows(fss, noise, step, seed)
            _emit(curves.format_table(curves.FSS_SCAN_COLUMNS, rows, (1, 6)), output)


@app.command("report")
def report_command(
    input_path: Annotated[
        Optional[Path],
        typer.Option("--input", "-i", help="JSON report from analyze (default: bundled device-1 measurements)"),
    ] = None,
    compare: Annotated[
        bool,
        typer.Option("--compare", help="Show the report next to published entangled-photon sources"),
    ] = False,
    output: Annotated[
        Optional[Path],
        typer.Option("--output", "-o", help="Write the comparison table as CSV"),
    ] = None,
    tau_bulk: Annotated[
        Optional[float],
        typer.Option("--tau-bulk", help="Bulk X lifetime in ps; prints the Purcell factor"),
    ] = None,
) -> None:
    """Print a figure-of-merit report, optionally against the reference table."""
    logger = get_logger()
    with traced_operation("cli_report", {"input": str(input_path) if input_path else None}):
        with _exit_on_error():
            if input_path is not None:
                try:
                    report = FomReport.from_json(input_path.read_text(encoding="utf-8"))
                except OSError as e:
                    raise ValidationError("input", f"cannot read {input_path}: {e.strerror}") from None
            else:
                report = compile_report(load_measurements())
            typer.echo(report.render_text(), nl=False)

            if tau_bulk is not None:
                if report.tau_x is None:
                    raise ValidationError("tau_bulk", "report has no tau_x to compare against")
                typer.echo(f"purcell_factor_x  {purcell_factor(tau_bulk, report.tau_x.value):.2f}")

            if compare or output is not None:
                rows = load_reference_table() + [report_reference_row(report)]
                logger.info("Comparing against reference sources", rows=len(rows))
                if compare:
                    table = Table(title="Entangled photon pair sources")
                    for column in ("Source", "Pair efficiency", "Fidelity", "Indistinguishability"):
                        table.add_column(column)
                    for row in rows:
                        table.add_row(row.source, row.pair_probability, row.fidelity, row.indistinguishability)
                    stdout.print(table)
                if output is not None:
                    write_text_atomic(output, format_reference_csv(rows))
                    console.print(f"[green]Wrote[/green] {output}")


def main() -> None:
    """Entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
