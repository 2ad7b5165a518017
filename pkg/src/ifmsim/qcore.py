"""Two-qubit (spin x path) quantum mechanics for the interferometer.

Basis ordering is fixed as ``{up.I, up.II, down.I, down.II}``, i.e. the
Kronecker product ``spin (x) path`` with index ``2*spin + path`` where
``spin=0`` is up and ``path=0`` is path I.

Sign convention: the monitored detector outcome is the (+, +) joint
projection, so the ideal count rate goes as 1/4 (1 + cos(alpha + chi)) and
the four-rate estimator returns ``E = +cos(alpha + chi)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10
CPTP_TOL = 1e-10

I2 = np.eye(2, dtype=complex)
I4 = np.eye(4, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)

UP = np.array([1, 0], dtype=complex)
DOWN = np.array([0, 1], dtype=complex)
PATH_I = np.array([1, 0], dtype=complex)
PATH_II = np.array([0, 1], dtype=complex)


class StateError(ValueError):
    """Raised when a density matrix violates the state invariants."""


class ChannelError(ValueError):
    """Raised when a Kraus set is not trace preserving."""


def _check_state(rho: np.ndarray) -> None:
    if rho.shape != (4, 4):
        raise StateError(f"density matrix must be 4x4, got {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise StateError("density matrix has non-finite entries")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > HERMITIAN_TOL:
        raise StateError(f"density matrix not Hermitian (deviation {herm:.3e})")
    tr = np.trace(rho)
    if abs(tr - 1.0) > TRACE_TOL:
        raise StateError(f"density matrix trace {tr.real:.15g} != 1")
    lam = np.linalg.eigvalsh(rho).min()
    if lam < -PSD_TOL:
        raise StateError(f"density matrix not positive semidefinite (min eigenvalue {lam:.3e})")


@dataclass(frozen=True, eq=False)
class SpinPathState:
    """Density matrix over spin (x) path. Validated on construction."""

    rho: np.ndarray

    def __post_init__(self) -> None:
        rho = np.array(self.rho, dtype=complex)
        _check_state(rho)
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_vector(cls, psi: Sequence[complex]) -> "SpinPathState":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def product(cls, spin_rho: np.ndarray, path_rho: np.ndarray) -> "SpinPathState":
        return cls(np.kron(spin_rho, path_rho))

    @classmethod
    def maximally_mixed(cls) -> "SpinPathState":
        return cls(I4 / 4)

    @property
    def purity(self) -> float:
        return float(np.real(np.trace(self.rho @ self.rho)))

    def spin_reduced(self) -> np.ndarray:
        """Partial trace over the path factor."""
        return np.einsum("ajbj->ab", self.rho.reshape(2, 2, 2, 2))

    def path_reduced(self) -> np.ndarray:
        """Partial trace over the spin factor."""
        return np.einsum("iaib->ab", self.rho.reshape(2, 2, 2, 2))

    def concurrence(self) -> float:
        """Wootters concurrence of the two-qubit state."""
        # the lambdas are the singular values of sqrt(rho) YY sqrt(rho)*, which
        # avoids square roots of near-zero eigenvalues for pure states
        w, v = np.linalg.eigh(self.rho)
        root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
        yy = np.kron(SIGMA_Y, SIGMA_Y)
        lam = np.linalg.svd(root @ yy @ root.conj(), compute_uv=False)
        return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


@dataclass(frozen=True, eq=False)
class ElementChannel:
    """CPTP map on the 4-dim space given by a Kraus set."""

    kraus_ops: tuple
    label: str = ""

    def __post_init__(self) -> None:
        ops = tuple(np.array(k, dtype=complex) for k in self.kraus_ops)
        if not ops:
            raise ChannelError(f"channel {self.label!r} has no Kraus operators")
        for k in ops:
            if k.shape != (4, 4):
                raise ChannelError(f"Kraus operator of {self.label!r} must be 4x4, got {k.shape}")
            k.setflags(write=False)
        object.__setattr__(self, "kraus_ops", ops)

    def completeness_defect(self) -> float:
        total = sum(k.conj().T @ k for k in self.kraus_ops)
        return float(np.max(np.abs(total - I4)))

    @property
    def is_trace_preserving(self) -> bool:
        return self.completeness_defect() <= CPTP_TOL

    def then(self, other: "ElementChannel") -> "ElementChannel":
        """Composition: apply ``self`` first, then ``other``."""
        ops = [b @ a for a in self.kraus_ops for b in other.kraus_ops]
        return ElementChannel(tuple(ops), f"{self.label}>{other.label}")

    @classmethod
    def unitary(cls, u: np.ndarray, label: str = "") -> "ElementChannel":
        return cls((u,), label)

    @classmethod
    def identity(cls) -> "ElementChannel":
        return cls((I4,), "identity")


@dataclass(frozen=True)
class JointSetting:
    """Spin-analysis azimuth ``alpha`` and path phase ``chi`` (radians)."""

    alpha: float
    chi: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.alpha) and np.isfinite(self.chi)):
            raise ValueError(f"non-finite setting ({self.alpha}, {self.chi})")


def _equatorial_projector(phase: float, sign: int) -> np.ndarray:
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    v = np.array([1.0, sign * np.exp(1j * phase)], dtype=complex) / np.sqrt(2)
    return np.outer(v, v.conj())


def spin_projector(alpha: float, sign: int) -> np.ndarray:
    """Projector onto (|up> + sign e^{i alpha}|down>)/sqrt2, tensored with the path identity."""
    return np.kron(_equatorial_projector(alpha, sign), I2)


def path_projector(chi: float, sign: int) -> np.ndarray:
    """Projector onto (|I> + sign e^{i chi}|II>)/sqrt2, tensored with the spin identity."""
    return np.kron(I2, _equatorial_projector(chi, sign))


def joint_observable(s: JointSetting) -> np.ndarray:
    spin_obs = spin_projector(s.alpha, 1) - spin_projector(s.alpha, -1)
    path_obs = path_projector(s.chi, 1) - path_projector(s.chi, -1)
    return spin_obs @ path_obs


def prepare_bell_state() -> SpinPathState:
    """(|up, I> + |down, II>)/sqrt2 as a density matrix."""
    psi = (np.kron(UP, PATH_I) + np.kron(DOWN, PATH_II)) / np.sqrt(2)
    return SpinPathState.from_vector(psi)


def joint_expectation(state: SpinPathState, s: JointSetting) -> float:
    return float(np.real(np.trace(state.rho @ joint_observable(s))))


def ideal_joint_probability(state: SpinPathState, s: JointSetting, signs: tuple[int, int] = (1, 1)) -> float:
    proj = spin_projector(s.alpha, signs[0]) @ path_projector(s.chi, signs[1])
    return float(np.real(np.trace(state.rho @ proj)))


def apply_channel(state: SpinPathState, ch: ElementChannel) -> SpinPathState:
    defect = ch.completeness_defect()
    if defect > CPTP_TOL:
        raise ChannelError(f"channel {ch.label!r} is not trace preserving (defect {defect:.3e})")
    rho = sum(k @ state.rho @ k.conj().T for k in ch.kraus_ops)
    # re-symmetrise to keep rounding from accumulating over long pipelines
    rho = 0.5 * (rho + rho.conj().T)
    return SpinPathState(rho)


def apply_channels(state: SpinPathState, channels: Sequence[ElementChannel]) -> SpinPathState:
    for ch in channels:
        state = apply_channel(state, ch)
    return state


def spin_rotation(axis: str, angle: float) -> np.ndarray:
    """2x2 rotation exp(-i angle sigma_axis / 2)."""
    sig = {"x": SIGMA_X, "y": SIGMA_Y, "z": SIGMA_Z}[axis]
    return np.cos(angle / 2) * I2 - 1j * np.sin(angle / 2) * sig
