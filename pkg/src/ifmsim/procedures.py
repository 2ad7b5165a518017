"""Scripted measurement procedures.

Each procedure is a pure function of ``(config, seed)``. Scan points draw
their counts from seeds derived as ``root.derive(stream, *indices)`` (see
``ifmsim.counting``), so results do not depend on evaluation order.

Two-flipper relations. With beam polarization P, flip probabilities f1, f2,
an ideal analyser and d_i = 1 - 2 f_i, the four intensities are

    I00 = I0/2 (1 + P)          I10 = I0/2 (1 + P d1)
    I01 = I0/2 (1 + P d2)       I11 = I0/2 (1 + P d1 d2)

which invert to d1 = (I10 - I11)/(I00 - I01), d2 = (I01 - I11)/(I00 - I10)
and P = r/(1 - r) with r = (I00 - I01) / (I00 (1 - d2)).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks, peak_widths

from ifmsim import apparatus
from ifmsim.analysis import (
    BellResult,
    EstimateError,
    ExpectationEstimate,
    FringeFit,
    chsh_s,
    expectation_from_counts,
    expectation_from_fringe,
    fit_fringe,
)
from ifmsim.config import ExperimentConfig
from ifmsim.counting import CountRecord, RngSeed, draw_counts, expected_rate
from ifmsim.fitting import (
    DesignError,
    gaussian_sum_model,
    levenberg_marquardt,
    poisson_weights,
    sinusoid_model,
)
from ifmsim.qcore import (
    PATH_I,
    PATH_II,
    JointSetting,
    SpinPathState,
    apply_channel,
    apply_channels,
    prepare_bell_state,
    spin_projector,
)


class Stream(enum.IntEnum):
    """First element of every derived seed key."""

    BELL_CARDINAL = 1
    BELL_FINE = 2
    RASTER = 3
    TEMPERATURE = 4
    ROCKING = 5
    TWO_FLIPPER = 6
    LARMOR = 7


ScanKind = enum.Enum("ScanKind", "bell raster temperature rocking two_flipper larmor_calibration")


def quantize(x: float) -> float:
    """Round to 12 significant digits so settings survive the counts table exactly."""
    return float(f"{x:.12g}")


@dataclass(frozen=True)
class ScanPlan:
    kind: ScanKind
    grid: tuple
    time_per_point: float
    seed: RngSeed

    def __post_init__(self) -> None:
        if not self.grid:
            raise ValueError("scan grid is empty")
        if not self.time_per_point > 0:
            raise ValueError("time_per_point must be positive")


def _seed(config: ExperimentConfig, seed) -> RngSeed:
    if seed is None:
        return config.rng_seed
    return seed if isinstance(seed, RngSeed) else RngSeed(seed)


def phase_grid(n: int) -> list[float]:
    return [quantize(2 * math.pi * k / n) for k in range(n)]


def group_fringes(records: Sequence[CountRecord], min_points: int = 5) -> dict[tuple, list[CountRecord]]:
    """Group records into chi scans.

    Records belong to one fringe when they agree on everything except chi
    and the counts: detector, alpha, integration time and scan coordinates.
    Groups with fewer than ``min_points`` distinct chi values are dropped.
    """
    groups: dict[tuple, list[CountRecord]] = {}
    for r in records:
        key = (r.detector, r.setting.alpha, r.integration_time, tuple(sorted(r.coords.items())))
        groups.setdefault(key, []).append(r)
    return {k: v for k, v in groups.items() if len({r.setting.chi for r in v}) >= min_points}


# --------------------------------------------------------------------- bell

BELL_ALPHAS = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
BELL_CHIS = (math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, 7 * math.pi / 4)
# (alpha index, chi index) of E(a1,c1), E(a1,c2), E(a2,c1), E(a2,c2) with
# a1 = 0, a2 = pi/2, c1 = pi/4, c2 = -pi/4 (= 7pi/4)
CHSH_TERMS = ((0, 0), (0, 3), (1, 0), (1, 3))


def bell_channels(config: ExperimentConfig):
    n = config.noise
    chans = [apparatus.make_spin_depolarizer(n.polarization), apparatus.make_path_dephasing(n.contrast)]
    chans += [apparatus.make_flipper_inefficiency(f) for f in n.flipper_efficiencies]
    return chans


def prepared_state(config: ExperimentConfig) -> SpinPathState:
    """Bell-like state after every configured noise process."""
    return apply_channels(prepare_bell_state(), bell_channels(config))


@dataclass(frozen=True)
class BellRun:
    result: BellResult
    records: tuple
    fringe_fits: dict
    fit_s_value: float
    total_counts: float
    visibility: float


def _bell_record(state, cfg, alpha, chi, time, seed, noise):
    s = JointSetting(alpha, chi)
    rate = expected_rate(state, s, cfg.counting.base_rate, cfg.beam.detector_efficiency, "O")
    return draw_counts(rate, time, seed, s, "O", noise)


def run_bell_experiment(config: ExperimentConfig, seed=None) -> BellRun:
    root = _seed(config, seed)
    noise = config.noise.poisson
    state = prepared_state(config)
    alphas = [quantize(a) for a in BELL_ALPHAS]
    chis = [quantize(c) for c in BELL_CHIS]
    t_card = config.counting.time_per_point_s
    t_fine = config.counting.fine_time_per_point_s

    cardinal = {}
    records = []
    for i, a in enumerate(alphas):
        for j, c in enumerate(chis):
            rec = _bell_record(state, config, a, c, t_card, root.derive(Stream.BELL_CARDINAL, i, j), noise)
            cardinal[i, j] = rec
            records.append(rec)
    fine = phase_grid(config.scan.bell.fine_points)
    for i, a in enumerate(alphas):
        for k, c in enumerate(fine):
            records.append(_bell_record(state, config, a, c, t_fine, root.derive(Stream.BELL_FINE, i, k), noise))

    es = []
    for i, j in CHSH_TERMS:
        ip, jp = (i + 2) % 4, (j + 2) % 4
        es.append(expectation_from_counts(cardinal[i, j], cardinal[ip, jp], cardinal[i, jp], cardinal[ip, j]))
    result = chsh_s(*es)

    fits = {}
    for key, recs in group_fringes(records).items():
        if key[2] == t_fine:
            fits[key[1]] = fit_fringe(recs)
    fit_e = []
    for i, j in CHSH_TERMS:
        a, ap = alphas[i], alphas[(i + 2) % 4]
        fit_e.append(expectation_from_fringe(fits[a], fits[ap], chis[j]))
    fit_s = fit_e[0] + fit_e[1] - fit_e[2] + fit_e[3]
    total = float(sum(r.observed_counts for r in records))
    return BellRun(result, tuple(records), fits, float(fit_s), total, config.visibility())


def run_bell_repeats(config: ExperimentConfig, n_runs: int, seed=None) -> list[BellResult]:
    """Independent Bell runs with seeds derived from the root seed by run index."""
    root = _seed(config, seed)
    return [run_bell_experiment(config, root.derive(0, r)).result for r in range(n_runs)]


# ------------------------------------------------------- interferometer scans

def _interferometer_state(contrast: float) -> SpinPathState:
    plus = np.full((2, 2), 0.5, dtype=complex)
    up = np.diag([1.0, 0.0]).astype(complex)
    return apply_channel(SpinPathState.product(up, plus), apparatus.make_path_dephasing(contrast))


def _fringe_records(config, contrast, phase_offset, chis, time, seeds, coords, noise):
    state = _interferometer_state(contrast)
    out = []
    for c, sd in zip(chis, seeds):
        rate = expected_rate(state, JointSetting(0.0, c + phase_offset), config.counting.base_rate,
                             config.beam.detector_efficiency, "H")
        out.append(draw_counts(rate, time, sd, JointSetting(0.0, c), "H", noise, coords))
    return out


@dataclass(frozen=True)
class RasterMap:
    x_positions: tuple
    z_positions: tuple
    contrast_grid: np.ndarray
    sigma_grid: np.ndarray
    aperture_mm: float
    records: tuple = ()

    def __post_init__(self) -> None:
        shape = (len(self.z_positions), len(self.x_positions))
        if self.contrast_grid.shape != shape or self.sigma_grid.shape != shape:
            raise ValueError(f"grid shape {self.contrast_grid.shape} does not match positions {shape}")

    @property
    def max_contrast(self) -> float:
        return float(np.max(self.contrast_grid))

    def argmax(self) -> tuple[float, float]:
        iz, ix = np.unravel_index(np.argmax(self.contrast_grid), self.contrast_grid.shape)
        return self.x_positions[ix], self.z_positions[iz]


def contrast_field(config: ExperimentConfig, x: float, z: float) -> float:
    r = config.scan.raster
    if r.shape == "uniform":
        return r.peak_contrast
    u = ((x - r.center_x_mm) / r.width_x_mm) ** 2 + ((z - r.center_z_mm) / r.width_z_mm) ** 2
    return r.peak_contrast * math.exp(-0.5 * u)


def _axis(lo: float, hi: float, step: float) -> list[float]:
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [quantize(lo + i * step) for i in range(n)]


def raster_plan(config: ExperimentConfig, seed=None) -> ScanPlan:
    r = config.scan.raster
    xs, zs = _axis(r.x_min_mm, r.x_max_mm, r.step_mm), _axis(r.z_min_mm, r.z_max_mm, r.step_mm)
    grid = tuple((x, z) for z in zs for x in xs)
    return ScanPlan(ScanKind.raster, grid, r.time_per_point_s, _seed(config, seed))


def run_raster_scan(config: ExperimentConfig, plan: ScanPlan | None = None) -> RasterMap:
    """Fit a fringe at every aperture position and map the contrast."""
    plan = plan or raster_plan(config)
    r = config.scan.raster
    xs = sorted({x for x, _ in plan.grid})
    zs = sorted({z for _, z in plan.grid})
    chis = phase_grid(r.fringe_points)
    cgrid = np.zeros((len(zs), len(xs)))
    sgrid = np.zeros_like(cgrid)
    records = []
    for x, z in plan.grid:
        ix, iz = xs.index(x), zs.index(z)
        seeds = [plan.seed.derive(Stream.RASTER, iz, ix, k) for k in range(len(chis))]
        recs = _fringe_records(config, contrast_field(config, x, z), 0.0, chis, plan.time_per_point,
                               seeds, {"x_mm": x, "z_mm": z}, config.noise.poisson)
        fit = fit_fringe(recs)
        cgrid[iz, ix] = fit.contrast
        sgrid[iz, ix] = fit.contrast_sigma
        records += recs
    return RasterMap(tuple(xs), tuple(zs), cgrid, sgrid, r.aperture_mm, tuple(records))


@dataclass(frozen=True)
class TemperatureScanResult:
    points: tuple  # (temperature, FringeFit)
    unwrapped_phases: tuple
    phase_slope: float
    phase_slope_sigma: float
    records: tuple = ()


def _weighted_slope(t, y, sigma) -> tuple[float, float]:
    t, y, w = np.asarray(t), np.asarray(y), 1.0 / np.asarray(sigma) ** 2
    if np.ptp(t) == 0:
        return float("nan"), float("nan")
    sw, st, sy = w.sum(), (w * t).sum(), (w * y).sum()
    stt, sty = (w * t * t).sum(), (w * t * y).sum()
    det = sw * stt - st * st
    return float((sw * sty - st * sy) / det), float(math.sqrt(sw / det))


def run_temperature_scan(config: ExperimentConfig, temperatures=None, seed=None) -> TemperatureScanResult:
    root = _seed(config, seed)
    tm = config.thermal.to_model()
    ts = config.scan.temperature
    temps = list(ts.temperatures_c if temperatures is None else temperatures)
    chis = phase_grid(ts.fringe_points)
    points, records = [], []
    for it, t in enumerate(temps):
        seeds = [root.derive(Stream.TEMPERATURE, it, k) for k in range(len(chis))]
        recs = _fringe_records(config, apparatus.contrast_at_temperature(tm, t), apparatus.thermal_phase_shift(tm, t),
                               chis, ts.time_per_point_s, seeds, {"temperature_c": t}, config.noise.poisson)
        points.append((t, fit_fringe(recs)))
        records += recs
    phases = np.unwrap([f.phase for _, f in points])
    slope, slope_sigma = _weighted_slope(temps, phases, [f.phase_sigma for _, f in points])
    return TemperatureScanResult(tuple(points), tuple(float(p) for p in phases), slope, slope_sigma, tuple(records))


# ------------------------------------------------------------- two flippers

def two_flipper_inversion(i00: float, i10: float, i01: float, i11: float) -> tuple[float, float, float]:
    """(polarization, efficiency 1, efficiency 2) from the four flipper intensities."""
    den1, den2 = i00 - i01, i00 - i10
    if den1 == 0 or den2 == 0:
        raise EstimateError("flipper intensities are degenerate")
    d1 = (i10 - i11) / den1
    d2 = (i01 - i11) / den2
    if d2 == 1 or i00 == 0:
        raise EstimateError("second flipper has no effect")
    r = (i00 - i01) / (i00 * (1 - d2))
    if r == 1:
        raise EstimateError("polarization diverges")
    return r / (1 - r), (1 - d1) / 2, (1 - d2) / 2


@dataclass(frozen=True)
class TwoFlipperResult:
    polarization: float
    polarization_sigma: float
    eff1: float
    eff1_sigma: float
    eff2: float
    eff2_sigma: float
    records: tuple = ()


def run_two_flipper_analysis(config: ExperimentConfig, seed=None, polarization=None,
                             efficiencies=None) -> TwoFlipperResult:
    root = _seed(config, seed)
    pol = config.noise.polarization if polarization is None else polarization
    effs = config.noise.flipper_efficiencies if efficiencies is None else efficiencies
    if len(effs) < 2:
        raise ValueError("the two-flipper method needs two flipper efficiencies")
    f1, f2 = effs[0], effs[1]
    spin = 0.5 * np.array([[1 + pol, 0], [0, 1 - pol]], dtype=complex)
    path = np.diag([1.0, 0.0]).astype(complex)
    base = SpinPathState.product(spin, path)
    analyzer = np.kron(np.diag([1.0, 0.0]), np.eye(2))
    t = config.scan.two_flipper.time_per_point_s
    records, means, counts = [], {}, {}
    for on1 in (0, 1):
        for on2 in (0, 1):
            st = base
            if on1:
                st = apply_channel(st, apparatus.make_spin_turner(math.pi, f1))
            if on2:
                st = apply_channel(st, apparatus.make_spin_turner(math.pi, f2))
            p = float(np.real(np.trace(st.rho @ analyzer)))
            rate = config.counting.base_rate * config.beam.detector_efficiency * p
            rec = draw_counts(rate, t, root.derive(Stream.TWO_FLIPPER, on1, on2), None, "O",
                              config.noise.poisson, {"flipper1": on1, "flipper2": on2})
            records.append(rec)
            counts[on1, on2] = rec.observed_counts
            means[on1, on2] = rec.expected_counts
    order = [(0, 0), (1, 0), (0, 1), (1, 1)]
    n = np.array([counts[k] for k in order], dtype=float)
    est = np.array(two_flipper_inversion(*n))
    # first-order propagation with Poisson variances, central differences
    var = np.array([means[k] for k in order]) if not config.noise.poisson else np.maximum(n, 1.0)
    jac = np.zeros((3, 4))
    for i in range(4):
        h = 1e-6 * max(abs(n[i]), 1.0)
        up, dn = n.copy(), n.copy()
        up[i] += h
        dn[i] -= h
        jac[:, i] = (np.array(two_flipper_inversion(*up)) - np.array(two_flipper_inversion(*dn))) / (2 * h)
    sig = np.sqrt(jac**2 @ var)
    return TwoFlipperResult(float(est[0]), float(sig[0]), float(est[1]), float(sig[1]),
                            float(est[2]), float(sig[2]), tuple(records))


# ------------------------------------------------------- larmor calibration

def block_path(state: SpinPathState, open_path: str) -> tuple[SpinPathState, float]:
    """Ideal absorber in the other path: (renormalised state, transmitted fraction)."""
    v = PATH_I if open_path == "I" else PATH_II
    proj = np.kron(np.eye(2), np.outer(v, v.conj()))
    rho = proj @ state.rho @ proj
    t = float(np.real(np.trace(rho)))
    if t <= 0:
        raise EstimateError("no intensity passes the open path")
    return SpinPathState(rho / t), t


@dataclass(frozen=True)
class LarmorCalibration:
    amps_per_quarter_turn: float
    sigma: float
    transmission: float
    records: tuple = ()


def _profile_frequency(x, y, w, span):
    """Coarse frequency from the best linear fit over a grid of trial frequencies."""
    k_lo = 0.25 * 2 * math.pi / span
    k_hi = math.pi * (len(x) - 1) / span
    best = None
    for k in np.linspace(k_lo, k_hi, 2000):
        design = np.column_stack([np.ones_like(x), np.cos(k * x), np.sin(k * x)])
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
        chi2 = float(np.sum(w * (y - design @ coef) ** 2))
        if best is None or chi2 < best[0]:
            best = (chi2, k, coef)
    _, k, (o, a, b) = best
    return np.array([o, math.hypot(a, b), k, math.atan2(-b, a)])


def run_larmor_calibration(config: ExperimentConfig, path: str | None = None, current_grid=None,
                           seed=None) -> LarmorCalibration:
    """Scan one Larmor coil with the other path blocked; fit the precession frequency."""
    root = _seed(config, seed)
    lc = config.scan.larmor
    path = path or lc.path
    if current_grid is None:
        current_grid = np.linspace(lc.current_min_a, lc.current_max_a, lc.points)
    currents = [quantize(float(c)) for c in current_grid]
    if len(set(currents)) < 5:
        raise DesignError("need at least 5 distinct currents")
    beam = config.beam_parameters()
    n = config.noise
    # spin up with beam polarization, turned into the xy-plane before the splitter
    spin = 0.5 * np.array([[1 + n.polarization, 0], [0, 1 - n.polarization]], dtype=complex)
    plus = np.full((2, 2), 0.5, dtype=complex)
    state = SpinPathState.product(spin, plus)
    f1 = n.flipper_efficiencies[0] if n.flipper_efficiencies else 1.0
    state = apply_channel(state, apparatus.make_spin_turner(math.pi / 2, f1))
    state, transmission = block_path(state, path)
    # analyser aligned with the turned spin (azimuth -pi/2)
    analyzer = spin_projector(-math.pi / 2, 1)
    records = []
    for i, cur in enumerate(currents):
        ang = apparatus.larmor_angle(config.larmor_coil(cur), beam)
        st = apply_channel(state, apparatus.make_larmor_accelerator(ang, path))
        p = float(np.real(np.trace(st.rho @ analyzer)))
        rate = config.counting.base_rate * beam.detector_efficiency * transmission * p
        records.append(draw_counts(rate, lc.time_per_point_s, root.derive(Stream.LARMOR, i), None, "O",
                                   n.poisson, {"current_a": cur}))
    x = np.array(currents)
    y = np.array([r.observed_counts for r in records], dtype=float)
    w = poisson_weights(y)
    p0 = _profile_frequency(x, y, w, float(np.ptp(x)))
    res = levenberg_marquardt(sinusoid_model, x, y, w, p0)
    k, sk = abs(res.params[2]), math.sqrt(res.covariance[2, 2])
    amps = (math.pi / 2) / k
    return LarmorCalibration(amps, amps * sk / k, transmission, tuple(records))


# -------------------------------------------------------------- rocking

@dataclass(frozen=True)
class FittedPeak:
    center: float
    center_sigma: float
    fwhm: float
    fwhm_sigma: float
    height: float
    height_sigma: float


@dataclass(frozen=True)
class RockingScanResult:
    angles: np.ndarray
    counts: np.ndarray
    peaks: tuple
    configured: tuple
    polarization_estimate: float | None
    records: tuple = ()


def configured_peaks(config: ExperimentConfig) -> list[apparatus.RockingPeak]:
    rc = config.scan.rocking
    fwhm, _ = apparatus.MONOCHROMATOR_FWHM[rc.monochromator]
    up = apparatus.broadened_peak(apparatus.RockingPeak(0.0, fwhm, 1.0), rc.coil)
    peaks = [up]
    if rc.double_peak:
        sep = config.beam.prism_beam_separation_rad
        peaks.append(apparatus.RockingPeak(sep, up.fwhm, up.height * rc.down_height_ratio))
    return peaks


def rocking_grid(config: ExperimentConfig) -> np.ndarray:
    rc = config.scan.rocking
    peaks = configured_peaks(config)
    w = peaks[0].fwhm
    lo = min(p.center for p in peaks) - rc.span_fwhm * w
    hi = max(p.center for p in peaks) + rc.span_fwhm * w
    step = rc.step_fwhm * w
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.array([quantize(lo + i * step) for i in range(n)])


def _peak_guesses(x, y, n_peaks):
    idx, props = find_peaks(y, prominence=0.2 * float(np.max(y)))
    if len(idx) < n_peaks:
        raise DesignError(f"found {len(idx)} peaks, expected {n_peaks}")
    idx = idx[np.argsort(props["prominences"])[::-1][:n_peaks]]
    idx = np.sort(idx)
    widths = peak_widths(y, idx, rel_height=0.5)[0] * float(np.mean(np.diff(x)))
    return np.column_stack([x[idx], widths, y[idx]]).ravel()


def run_rocking_scan(config: ExperimentConfig, angle_grid=None, seed=None) -> RockingScanResult:
    root = _seed(config, seed)
    rc = config.scan.rocking
    peaks = configured_peaks(config)
    grid = rocking_grid(config) if angle_grid is None else np.asarray([quantize(a) for a in angle_grid])
    intensity = apparatus.rocking_curve(peaks, grid)
    records = []
    for i, (a, inten) in enumerate(zip(grid, intensity)):
        rate = rc.peak_rate * float(inten)
        records.append(draw_counts(rate, rc.time_per_point_s, root.derive(Stream.ROCKING, i), None, "O",
                                   config.noise.poisson, {"theta_rad": float(a)}))
    counts = np.array([r.observed_counts for r in records], dtype=float)
    # fit in microradians and counts
    x = grid * 1e6
    res = levenberg_marquardt(gaussian_sum_model, x, counts, poisson_weights(counts),
                              _peak_guesses(x, counts, len(peaks)))
    norm = rc.peak_rate * rc.time_per_point_s
    fitted = []
    for j, (c, w, h) in enumerate(np.asarray(res.params).reshape(-1, 3)):
        s = np.sqrt(np.diag(res.covariance)[3 * j:3 * j + 3])
        fitted.append(FittedPeak(float(c) * 1e-6, float(s[0]) * 1e-6, abs(float(w)) * 1e-6, float(s[1]) * 1e-6,
                                  float(h) / norm, float(s[2]) / norm))
    pol = None
    if len(fitted) == 2:
        up, down = (apparatus.RockingPeak(p.center, p.fwhm, max(p.height, 0.0)) for p in fitted)
        pol = apparatus.polarization_from_peak_overlap(up, down, up.fwhm)
    return RockingScanResult(grid, counts, tuple(fitted), tuple(peaks), pol, tuple(records))
