"""Detector count generation: joint probabilities to Poisson counts.

Seeds are split deterministically. A child seed for a scan point is the first
64 bits of ``numpy.random.SeedSequence(entropy=root, spawn_key=keys)``, where
``keys`` is a tuple of small integers such as ``(stream, setting_index,
repetition)``. Counts never depend on the order in which points are drawn.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ifmsim.qcore import (
    JointSetting,
    SpinPathState,
    ideal_joint_probability,
    path_projector,
)

U64_MAX = 2**64 - 1
MAX_MEAN = 2.0**63


@dataclass(frozen=True)
class RngSeed:
    seed: int

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) <= U64_MAX:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        object.__setattr__(self, "seed", int(self.seed))

    def derive(self, *keys: int) -> "RngSeed":
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        lo, hi = ss.generate_state(2, dtype=np.uint32)
        return RngSeed(int(lo) | (int(hi) << 32))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class CountRecord:
    setting: JointSetting
    integration_time: float
    mean_rate: float
    observed_counts: float
    detector: str = "O"
    coords: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.observed_counts < 0:
            raise ValueError("observed_counts must be non-negative")
        if self.mean_rate < 0:
            raise ValueError("mean_rate must be non-negative")
        if self.detector not in ("O", "H"):
            raise ValueError(f"detector must be 'O' or 'H', got {self.detector!r}")

    @property
    def expected_counts(self) -> float:
        return self.mean_rate * self.integration_time


def detection_probability(state: SpinPathState, s: JointSetting, detector: str = "O") -> float:
    """O: spin-analysed (+,+) outcome. H: complementary path port, no spin analysis."""
    if detector == "O":
        return ideal_joint_probability(state, s, (1, 1))
    if detector == "H":
        return float(np.real(np.trace(state.rho @ path_projector(s.chi, -1))))
    raise ValueError(f"unknown detector {detector!r}")


def expected_rate(state: SpinPathState, s: JointSetting, base_rate: float,
                  efficiency: float, detector: str = "O") -> float:
    """Mean count rate; averaged over settings it equals base_rate * efficiency / 2."""
    if base_rate < 0 or not 0 <= efficiency <= 1:
        raise ValueError("base_rate must be >= 0 and efficiency in [0, 1]")
    p = detection_probability(state, s, detector)
    # O sees one of four outcomes (mean 1/4), H one of two (mean 1/2)
    weight = 2.0 if detector == "O" else 1.0
    return max(0.0, base_rate * efficiency * weight * p)


def draw_counts(rate: float, time: float, seed: RngSeed, setting: JointSetting | None = None,
                detector: str = "O", noise: bool = True, coords: dict | None = None) -> CountRecord:
    """One detector reading. With ``noise=False`` the mean is recorded as-is."""
    if rate < 0 or time < 0:
        raise ValueError(f"rate and time must be non-negative (rate={rate}, time={time})")
    mean = rate * time
    if mean >= MAX_MEAN:
        raise ValueError(f"mean counts {mean:.3e} exceed the 2^63 limit")
    if noise:
        counts = int(seed.generator().poisson(mean)) if mean > 0 else 0
    else:
        counts = float(mean)
    return CountRecord(
        setting=setting if setting is not None else JointSetting(0.0, 0.0),
        integration_time=float(time),
        mean_rate=float(rate),
        observed_counts=counts,
        detector=detector,
        coords=dict(coords or {}),
    )
