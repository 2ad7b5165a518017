"""Command-line front end.

    ifmsim bell [--config FILE] [--seed N] [--out DIR] [--quiet]
    ifmsim fit COUNTS.csv [--out DIR]

Every run writes ``counts.csv``, ``summary.txt``, ``summary.json``, any
plot-ready tables, and ``manifest.json`` (config echo, seed, version and file
digests). The output directory is ``--out``, else ``$IFMSIM_OUT``, else the
config's ``output_dir``. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from ifmsim import procedures
from ifmsim.analysis import FringeFit, fit_fringe, predicted_s
from ifmsim.config import ConfigError, ExperimentConfig, default_config, load_config
from ifmsim.counting import U64_MAX
from ifmsim.fitting import DesignError, gaussian_sum_model
from ifmsim.persistence import (
    CountsFormatError,
    read_counts_table,
    write_counts_table,
    write_manifest,
    write_summary,
    write_table,
)

log = logging.getLogger("ifmsim")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SUBCOMMANDS = ("bell", "raster", "temperature", "rocking", "two-flipper", "larmor-cal", "fit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64 - 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config (or JSON config / run manifest)")
    common.add_argument("--seed", type=_u64, help="unsigned 64-bit root seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides IFMSIM_OUT and the config)")
    common.add_argument("--quiet", action="store_true", help="do not print the summary")
    parser = _Parser(prog="ifmsim", description="Polarized neutron interferometer Bell-test simulator")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "fit":
            p.add_argument("counts", type=Path, help="counts table to fit")
    return parser


# ------------------------------------------------------------------ tables

FIT_COLUMNS = ("offset", "offset_sigma", "amplitude", "amplitude_sigma", "phase", "phase_sigma",
               "contrast", "contrast_sigma", "chi_square", "dof")


def _fit_values(f: FringeFit) -> list:
    return [f.offset, f.offset_sigma, f.amplitude, f.amplitude_sigma, f.phase, f.phase_sigma,
            f.contrast, f.contrast_sigma, f.chi_square, f.dof]


def fit_all_fringes(records) -> list[tuple[tuple, FringeFit]]:
    return [(key, fit_fringe(recs)) for key, recs in procedures.group_fringes(records).items()]


def write_fits_table(path, fits) -> Path:
    coord_keys = sorted({k for key, _ in fits for k, _ in key[3]})
    header = ("detector", "alpha_rad", "time_s") + tuple(coord_keys) + FIT_COLUMNS
    rows = []
    for (det, alpha, t, coords), f in fits:
        cd = dict(coords)
        rows.append([det, f"{alpha:.12g}", f"{t:.12g}"] + [cd.get(k, "") for k in coord_keys] + _fit_values(f))
    return write_table(path, header, rows)


# ------------------------------------------------------------- subcommands

def cmd_bell(cfg: ExperimentConfig, out: Path):
    run = procedures.run_bell_experiment(cfg)
    r = run.result
    summary = {
        "s_value": r.s_value,
        "s_sigma": r.s_sigma,
        "n_sigma_violation": r.n_sigma_violation,
        "visibility": run.visibility,
        "predicted_s": predicted_s(run.visibility),
        "fit_s_value": run.fit_s_value,
        "total_counts": run.total_counts,
    }
    for n, e in enumerate(r.e, start=1):
        summary[f"e{n}.alpha_rad"], summary[f"e{n}.chi_rad"] = e.setting_pair
        summary[f"e{n}.value"], summary[f"e{n}.sigma"] = e.value, e.sigma
    for alpha, f in sorted(run.fringe_fits.items()):
        summary[f"contrast.alpha_{alpha:.6f}"] = f.contrast
    fits = fit_all_fringes(run.records)
    return run.records, summary, [write_fits_table(out / "fits.csv", fits)]


def cmd_raster(cfg: ExperimentConfig, out: Path):
    m = procedures.run_raster_scan(cfg)
    x, z = m.argmax()
    summary = {
        "max_contrast": m.max_contrast,
        "max_x_mm": x,
        "max_z_mm": z,
        "nx": len(m.x_positions),
        "nz": len(m.z_positions),
        "step_mm": cfg.scan.raster.step_mm,
        "aperture_mm": m.aperture_mm,
    }
    rows = [[xv, zv, m.contrast_grid[iz, ix], m.sigma_grid[iz, ix]]
            for iz, zv in enumerate(m.z_positions) for ix, xv in enumerate(m.x_positions)]
    table = write_table(out / "raster.csv", ("x_mm", "z_mm", "contrast", "contrast_sigma"), rows)
    return m.records, summary, [table]


def cmd_temperature(cfg: ExperimentConfig, out: Path):
    res = procedures.run_temperature_scan(cfg)
    summary = {"phase_slope_rad_per_c": res.phase_slope, "phase_slope_sigma": res.phase_slope_sigma}
    rows = []
    for (t, f), ph in zip(res.points, res.unwrapped_phases):
        rows.append([t, f.contrast, f.contrast_sigma, f.phase, ph, f.phase_sigma])
        summary[f"contrast.t_{t:.2f}"] = f.contrast
    table = write_table(out / "temperature.csv",
                        ("temperature_c", "contrast", "contrast_sigma", "phase", "phase_unwrapped", "phase_sigma"),
                        rows)
    return res.records, summary, [table]


def cmd_rocking(cfg: ExperimentConfig, out: Path):
    res = procedures.run_rocking_scan(cfg)
    rc = cfg.scan.rocking
    summary = {"monochromator": rc.monochromator, "coil": rc.coil, "n_peaks": len(res.peaks)}
    for n, (p, c) in enumerate(zip(res.peaks, res.configured), start=1):
        summary.update({
            f"peak{n}.center_rad": p.center, f"peak{n}.center_sigma": p.center_sigma,
            f"peak{n}.fwhm_rad": p.fwhm, f"peak{n}.fwhm_sigma": p.fwhm_sigma,
            f"peak{n}.height": p.height, f"peak{n}.height_sigma": p.height_sigma,
            f"peak{n}.configured_fwhm_rad": c.fwhm,
        })
    if res.polarization_estimate is not None:
        summary["peak_separation_rad"] = res.peaks[1].center - res.peaks[0].center
        summary["polarization_estimate"] = res.polarization_estimate
    params = np.ravel([[p.center * 1e6, p.fwhm * 1e6, p.height * rc.peak_rate * rc.time_per_point_s]
                       for p in res.peaks])
    model, _ = gaussian_sum_model(res.angles * 1e6, params)
    rows = [[a, c, m] for a, c, m in zip(res.angles, res.counts, model)]
    table = write_table(out / "rocking.csv", ("theta_rad", "counts", "model"), rows)
    return res.records, summary, [table]


def cmd_two_flipper(cfg: ExperimentConfig, out: Path):
    res = procedures.run_two_flipper_analysis(cfg)
    summary = {
        "polarization": res.polarization, "polarization_sigma": res.polarization_sigma,
        "flipper1_efficiency": res.eff1, "flipper1_sigma": res.eff1_sigma,
        "flipper2_efficiency": res.eff2, "flipper2_sigma": res.eff2_sigma,
    }
    return res.records, summary, []


def cmd_larmor(cfg: ExperimentConfig, out: Path):
    res = procedures.run_larmor_calibration(cfg)
    summary = {
        "path": cfg.scan.larmor.path,
        "amps_per_quarter_turn": res.amps_per_quarter_turn,
        "amps_sigma": res.sigma,
        "transmission": res.transmission,
    }
    rows = [[r.coords["current_a"], r.observed_counts] for r in res.records]
    table = write_table(out / "larmor.csv", ("current_a", "counts"), rows)
    return res.records, summary, [table]


def cmd_fit(records, out: Path):
    fits = fit_all_fringes(records)
    if not fits:
        raise DesignError("no fringe with at least 5 distinct chi values in the counts table")
    summary = {"n_fringes": len(fits)}
    for n, (key, f) in enumerate(fits):
        summary[f"fringe{n}.alpha_rad"] = key[1]
        summary[f"fringe{n}.contrast"] = f.contrast
        summary[f"fringe{n}.contrast_sigma"] = f.contrast_sigma
        summary[f"fringe{n}.phase"] = f.phase
    return summary, [write_fits_table(out / "fits.csv", fits)]


RUNNERS = {
    "bell": cmd_bell,
    "raster": cmd_raster,
    "temperature": cmd_temperature,
    "rocking": cmd_rocking,
    "two-flipper": cmd_two_flipper,
    "larmor-cal": cmd_larmor,
}


def resolve_output(args, cfg: ExperimentConfig) -> Path:
    if args.out is not None:
        return args.out
    env = os.environ.get("IFMSIM_OUT")
    if env:
        return Path(env)
    return Path(cfg.output_dir)


def run(command: str, cfg: ExperimentConfig, out: Path, counts_path: Path | None = None) -> dict:
    """Execute one subcommand and write its artifacts; returns the summary."""
    if command not in SUBCOMMANDS:
        raise UsageError(f"unknown subcommand {command!r}")
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    if command == "fit":
        records = read_counts_table(counts_path)
        inputs.append(counts_path)
        summary, tables = cmd_fit(records, out)
    else:
        records, summary, tables = RUNNERS[command](cfg, out)
    counts = write_counts_table(records, out / "counts.csv")
    txt, js = write_summary(summary, out)
    write_manifest(out, command, cfg.echo(), cfg.seed, [counts, txt, js, *tables], inputs)
    return summary


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(SUBCOMMANDS))
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg = cfg.updated(seed=args.seed)
    except (UsageError, ConfigError) as exc:
        print(f"ifmsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.quiet:
        log.setLevel(logging.WARNING)
    out = resolve_output(args, cfg)
    try:
        summary = run(args.command, cfg, out, getattr(args, "counts", None))
    except (OSError, CountsFormatError, ValueError, RuntimeError) as exc:
        print(f"ifmsim: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for k, v in summary.items():
        log.info("%s = %s", k, f"{v:.6g}" if isinstance(v, float) and math.isfinite(v) else v)
    log.info("wrote %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
