"""Beamline elements as channel factories, plus scalar calibration models."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import constants, integrate

from ifmsim.qcore import (
    I2,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    ElementChannel,
    spin_rotation,
)

FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))


@dataclass(frozen=True)
class PhysicalConstants:
    planck_h: float = constants.h
    hbar: float = constants.hbar
    neutron_mass: float = constants.m_n
    neutron_magnetic_moment_magnitude: float = abs(constants.physical_constants["neutron mag. mom."][0])

    def __post_init__(self) -> None:
        if abs(self.hbar - self.planck_h / (2 * np.pi)) > 1e-12 * self.hbar:
            raise ValueError("hbar must equal planck_h / 2pi")


CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class BeamParameters:
    wavelength: float = 1.92e-10
    prism_beam_separation: float = 2.3e-5
    detector_efficiency: float = 0.99
    constants: PhysicalConstants = CONSTANTS

    def __post_init__(self) -> None:
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        if not 0 < self.detector_efficiency <= 1:
            raise ValueError("detector_efficiency must be in (0, 1]")

    @property
    def velocity(self) -> float:
        c = self.constants
        return c.planck_h / (c.neutron_mass * self.wavelength)


# Quoted calibration points: 0.33 mT gives pi/2, reached at about 0.7 A.
FIELD_FOR_QUARTER_TURN = 0.33e-3
CURRENT_FOR_QUARTER_TURN = 0.7


def calibrated_coil_length(beam: BeamParameters = BeamParameters(),
                           field_for_quarter_turn: float = FIELD_FOR_QUARTER_TURN) -> float:
    """Effective coil length that turns the spin by pi/2 at the given field."""
    c = beam.constants
    return (np.pi / 2) * c.hbar * beam.velocity / (2 * c.neutron_magnetic_moment_magnitude * field_for_quarter_turn)


@dataclass(frozen=True)
class LarmorCoil:
    effective_length: float = field(default_factory=calibrated_coil_length)
    field_per_ampere: float = FIELD_FOR_QUARTER_TURN / CURRENT_FOR_QUARTER_TURN
    current: float = CURRENT_FOR_QUARTER_TURN

    def __post_init__(self) -> None:
        if not self.effective_length > 0:
            raise ValueError("effective_length must be positive")

    @property
    def bz(self) -> float:
        return self.field_per_ampere * self.current


def larmor_angle(coil: LarmorCoil, beam: BeamParameters) -> float:
    """Larmor rotation 2 mu l B / (hbar v); signed with the current."""
    c = beam.constants
    return 2 * c.neutron_magnetic_moment_magnitude * coil.effective_length * coil.bz / (c.hbar * beam.velocity)


def _spin_local(u2: np.ndarray) -> np.ndarray:
    return np.kron(u2, I2)


def make_spin_turner(angle: float, efficiency: float = 1.0) -> ElementChannel:
    """x-rotation of the spin, applied with probability ``efficiency``.

    For a pi rotation the net flip probability equals the efficiency.
    """
    if not 0 <= efficiency <= 1:
        raise ValueError(f"efficiency must be in [0, 1], got {efficiency}")
    u = _spin_local(spin_rotation("x", angle))
    ops = [np.sqrt(efficiency) * u]
    if efficiency < 1:
        ops.append(np.sqrt(1 - efficiency) * np.eye(4))
    return ElementChannel(tuple(ops), f"spin_turner({angle:.6g},{efficiency:.6g})")


def make_larmor_accelerator(angle: float, path: str) -> ElementChannel:
    """Spin z-rotation applied only to the component travelling along ``path``."""
    idx = {"I": 0, "II": 1}[path]
    sel = np.zeros((2, 2), dtype=complex)
    sel[idx, idx] = 1
    other = np.eye(2, dtype=complex) - sel
    u = np.kron(spin_rotation("z", angle), sel) + np.kron(I2, other)
    return ElementChannel.unitary(u, f"larmor_{path}({angle:.6g})")


def make_phase_shifter(chi: float) -> ElementChannel:
    """Phase e^{i chi} on path II relative to path I."""
    u = np.kron(I2, np.diag([1.0, np.exp(1j * chi)]))
    return ElementChannel.unitary(u, f"phase_shifter({chi:.6g})")


def make_path_dephasing(contrast: float) -> ElementChannel:
    """Scale path coherences by ``contrast``; populations untouched."""
    if not 0 <= contrast <= 1:
        raise ValueError(f"contrast must be in [0, 1], got {contrast}")
    z = np.kron(I2, SIGMA_Z)
    p = (1 - contrast) / 2
    return ElementChannel((np.sqrt(1 - p) * np.eye(4), np.sqrt(p) * z), f"path_dephasing({contrast:.6g})")


def make_spin_depolarizer(polarization: float) -> ElementChannel:
    """Shrink the spin Bloch vector by ``polarization``."""
    if not 0 <= polarization <= 1:
        raise ValueError(f"polarization must be in [0, 1], got {polarization}")
    p = 3 * (1 - polarization) / 4
    ops = [np.sqrt(1 - p) * np.eye(4)]
    ops += [np.sqrt(p / 3) * _spin_local(s) for s in (SIGMA_X, SIGMA_Y, SIGMA_Z)]
    return ElementChannel(tuple(ops), f"spin_depolarizer({polarization:.6g})")


def make_flipper_inefficiency(efficiency: float) -> ElementChannel:
    """Loss of the equatorial spin signal when a pi/2 turner misfires.

    With probability ``1 - efficiency`` the turner leaves the spin untouched,
    so the analyser sees no equatorial spin component; in the state frame
    this is a spin dephasing mixture.
    """
    if not 0 <= efficiency <= 1:
        raise ValueError(f"efficiency must be in [0, 1], got {efficiency}")
    p = (1 - efficiency) / 2
    z = _spin_local(SIGMA_Z)
    return ElementChannel((np.sqrt(1 - p) * np.eye(4), np.sqrt(p) * z), f"flipper_loss({efficiency:.6g})")


@dataclass(frozen=True)
class ThermalModel:
    """Contrast and phase drift of the interferometer versus cooling-water temperature."""

    reference_temperature: float = 25.2
    contrast_vs_temperature: tuple = ((25.2, 0.88), (26.2, 0.60), (26.8, 0.33))
    phase_drift_rate: float = 1.92

    def __post_init__(self) -> None:
        anchors = tuple((float(t), float(c)) for t, c in self.contrast_vs_temperature)
        if not anchors:
            raise ValueError("thermal model needs at least one anchor")
        temps = [t for t, _ in anchors]
        if any(b <= a for a, b in zip(temps, temps[1:])):
            raise ValueError("anchor temperatures must be strictly increasing")
        if any(not 0 <= c <= 1 for _, c in anchors):
            raise ValueError("anchor contrasts must be in [0, 1]")
        object.__setattr__(self, "contrast_vs_temperature", anchors)


def contrast_at_temperature(tm: ThermalModel, t: float) -> float:
    temps = [a for a, _ in tm.contrast_vs_temperature]
    cons = [c for _, c in tm.contrast_vs_temperature]
    if not temps[0] <= t <= temps[-1]:
        raise ValueError(f"temperature {t} degC outside model range [{temps[0]}, {temps[-1]}]")
    return float(np.interp(t, temps, cons))


def thermal_phase_shift(tm: ThermalModel, t: float) -> float:
    return tm.phase_drift_rate * (t - tm.reference_temperature)


@dataclass(frozen=True)
class RockingPeak:
    center: float
    fwhm: float
    height: float = 1.0

    def __post_init__(self) -> None:
        if not self.fwhm > 0:
            raise ValueError("fwhm must be positive")
        if self.height < 0:
            raise ValueError("height must be non-negative")

    @property
    def sigma(self) -> float:
        return self.fwhm / FWHM_PER_SIGMA

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.height * np.exp(-0.5 * ((theta - self.center) / self.sigma) ** 2)


def rocking_curve(peaks: Sequence[RockingPeak], angle_grid) -> np.ndarray:
    grid = np.asarray(angle_grid, dtype=float)
    out = np.zeros_like(grid)
    for pk in peaks:
        out += pk(grid)
    return out


def polarization_from_peak_overlap(up: RockingPeak, down: RockingPeak, acceptance_fwhm: float) -> float:
    """Polarization left after the crystal's acceptance window selects the up peak."""
    window = RockingPeak(up.center, acceptance_fwhm, 1.0)

    def overlap(pk: RockingPeak) -> float:
        # the integrand is itself Gaussian; integrate +-12 of its widths
        s2 = pk.sigma ** 2 + window.sigma ** 2
        mid = (pk.center * window.sigma ** 2 + window.center * pk.sigma ** 2) / s2
        half = 12 * pk.sigma * window.sigma / np.sqrt(s2)
        val, _ = integrate.quad(lambda x: pk(x) * window(x), mid - half, mid + half,
                                epsabs=0.0, epsrel=1e-12, limit=200)
        return val

    i_up, i_down = overlap(up), overlap(down)
    if i_up + i_down == 0:
        raise ValueError("no intensity inside the acceptance window")
    return (i_up - i_down) / (i_up + i_down)


class CoilKind(str, enum.Enum):
    NONE = "none"
    AL_WIRE = "al_wire"
    AL_RIBBON = "al_ribbon"
    CU_RIBBON_3MM = "cu_ribbon_3mm"
    CU_RIBBON_4MM = "cu_ribbon_4mm"


# (peak height factor, FWHM factor) relative to the empty beamline
COIL_BROADENING = {
    CoilKind.NONE: (1.000, 1.000),
    CoilKind.AL_WIRE: (0.56, 1.68),
    CoilKind.AL_RIBBON: (0.80, 1.16),
    CoilKind.CU_RIBBON_3MM: (0.84, 1.11),
    CoilKind.CU_RIBBON_4MM: (0.85, 1.16),
}

# monochromator rocking FWHM (rad) with quoted uncertainty
MONOCHROMATOR_FWHM = {
    "single": (6.11e-6, 0.47e-6),
    "triple": (4.26e-6, 0.10e-6),
}


def broadened_peak(base: RockingPeak, coil_kind) -> RockingPeak:
    h, w = COIL_BROADENING[CoilKind(coil_kind)]
    return RockingPeak(base.center, base.fwhm * w, base.height * h)
