import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_density_matrix
from ifmsim import apparatus
from ifmsim.apparatus import (
    BeamParameters,
    CoilKind,
    LarmorCoil,
    RockingPeak,
    ThermalModel,
    broadened_peak,
    contrast_at_temperature,
    larmor_angle,
    polarization_from_peak_overlap,
    rocking_curve,
    thermal_phase_shift,
)
from ifmsim.qcore import (
    JointSetting,
    SpinPathState,
    apply_channel,
    apply_channels,
    joint_expectation,
    prepare_bell_state,
)

unit = st.floats(0.0, 1.0)
angle = st.floats(-10.0, 10.0, allow_nan=False)


def all_factories(a, f):
    return [
        apparatus.make_spin_turner(a, f),
        apparatus.make_larmor_accelerator(a, "I"),
        apparatus.make_larmor_accelerator(a, "II"),
        apparatus.make_phase_shifter(a),
        apparatus.make_path_dephasing(f),
        apparatus.make_spin_depolarizer(f),
        apparatus.make_flipper_inefficiency(f),
    ]


@settings(max_examples=100, deadline=None)
@given(angle, unit)
def test_every_channel_is_trace_preserving(a, f):
    for ch in all_factories(a, f):
        assert ch.completeness_defect() <= 1e-10, ch.label


@settings(max_examples=50, deadline=None)
@given(angle, st.integers(0, 2**32 - 1))
def test_unitary_elements_preserve_purity(a, seed):
    state = SpinPathState(random_density_matrix(np.random.default_rng(seed)))
    for ch in (apparatus.make_spin_turner(a), apparatus.make_larmor_accelerator(a, "I"),
               apparatus.make_phase_shifter(a)):
        assert apply_channel(state, ch).purity == pytest.approx(state.purity, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(unit, st.integers(0, 2**32 - 1))
def test_noise_channels_never_raise_purity(f, seed):
    state = SpinPathState(random_density_matrix(np.random.default_rng(seed)))
    for ch in (apparatus.make_path_dephasing(f), apparatus.make_spin_depolarizer(f),
               apparatus.make_flipper_inefficiency(f)):
        assert apply_channel(state, ch).purity <= state.purity + 1e-12


@settings(max_examples=50, deadline=None)
@given(angle, angle, st.integers(0, 2**32 - 1))
def test_rotations_compose_additively(t1, t2, seed):
    state = SpinPathState(random_density_matrix(np.random.default_rng(seed)))
    for make in (apparatus.make_phase_shifter, lambda t: apparatus.make_larmor_accelerator(t, "II"),
                 lambda t: apparatus.make_spin_turner(t)):
        two = apply_channels(state, [make(t1), make(t2)])
        one = apply_channel(state, make(t1 + t2))
        np.testing.assert_allclose(two.rho, one.rho, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(unit, unit, unit, unit, angle, angle)
def test_noise_visibility_is_product_of_factors(c, p, f1, f2, a, chi):
    chain = [apparatus.make_path_dephasing(c), apparatus.make_spin_depolarizer(p),
             apparatus.make_flipper_inefficiency(f1), apparatus.make_flipper_inefficiency(f2)]
    state = apply_channels(prepare_bell_state(), chain)
    assert joint_expectation(state, JointSetting(a, chi)) == pytest.approx(c * p * f1 * f2 * math.cos(a + chi), abs=1e-12)


def test_spin_turner_flip_probability_equals_efficiency():
    up = SpinPathState.from_vector(np.array([1, 0, 0, 0]))
    for f in (0.0, 0.5, 0.98, 1.0):
        out = apply_channel(up, apparatus.make_spin_turner(math.pi, f))
        p_down = float(np.real(out.rho[2, 2] + out.rho[3, 3]))
        assert p_down == pytest.approx(f, abs=1e-12)


def test_depolarizer_sets_polarization():
    up = SpinPathState.from_vector(np.array([1, 0, 0, 0]))
    out = apply_channel(up, apparatus.make_spin_depolarizer(0.993))
    rho_s = out.spin_reduced()
    assert float(np.real(rho_s[0, 0] - rho_s[1, 1])) == pytest.approx(0.993, abs=1e-12)


def _pure_concurrence(v):
    a, b, c, d = v
    return 2 * abs(a * d - b * c)


@settings(max_examples=100, deadline=None)
@given(angle, st.sampled_from(["I", "II"]))
def test_larmor_accelerator_entangles_product_state(theta, path):
    # (|up> + |down>)(|I> + |II>)/2; rotation on one path only
    v = np.full(4, 0.5, dtype=complex)
    out = apply_channel(SpinPathState.from_vector(v), apparatus.make_larmor_accelerator(theta, path))
    assert out.concurrence() == pytest.approx(abs(math.sin(theta / 2)), abs=1e-9)
    # oracle: rotated amplitudes written out by hand
    ph = np.exp(-1j * theta / 2)
    hand = 0.5 * (np.array([ph, 1, 1 / ph, 1]) if path == "I" else np.array([1, ph, 1, 1 / ph]))
    assert _pure_concurrence(hand) == pytest.approx(abs(math.sin(theta / 2)), abs=1e-12)


def test_larmor_pi_gives_maximal_entanglement():
    v = np.full(4, 0.5, dtype=complex)
    out = apply_channel(SpinPathState.from_vector(v), apparatus.make_larmor_accelerator(math.pi, "I"))
    assert out.concurrence() == pytest.approx(1.0, abs=1e-12)


def test_neutron_velocity():
    assert BeamParameters().velocity == pytest.approx(2060.0, abs=1.0)


def test_larmor_calibration_points():
    beam = BeamParameters()
    coil = LarmorCoil()
    assert coil.bz == pytest.approx(0.33e-3, rel=1e-12)
    assert larmor_angle(coil, beam) == pytest.approx(math.pi / 2, rel=1e-12)
    assert larmor_angle(LarmorCoil(current=1.4), beam) == pytest.approx(math.pi, rel=1e-12)
    assert larmor_angle(LarmorCoil(current=-0.7), beam) == pytest.approx(-math.pi / 2, rel=1e-12)


def test_larmor_angle_formula_oracle():
    c = apparatus.CONSTANTS
    beam = BeamParameters()
    v = c.planck_h / (c.neutron_mass * beam.wavelength)
    coil = LarmorCoil(effective_length=0.05, field_per_ampere=1e-3, current=0.2)
    expected = 2 * 9.6623651e-27 * 0.05 * 2e-4 / (1.054571817e-34 * v)
    assert larmor_angle(coil, beam) == pytest.approx(expected, rel=1e-6)


def test_thermal_anchor_values():
    tm = ThermalModel()
    assert contrast_at_temperature(tm, 25.2) == pytest.approx(0.88, abs=1e-12)
    assert contrast_at_temperature(tm, 26.2) == pytest.approx(0.60, abs=1e-12)
    assert contrast_at_temperature(tm, 26.8) == pytest.approx(0.33, abs=1e-12)
    assert contrast_at_temperature(tm, 25.7) == pytest.approx(0.74, abs=1e-12)
    assert thermal_phase_shift(tm, 26.2) == pytest.approx(1.92, abs=1e-12)
    assert thermal_phase_shift(tm, 25.2) == 0.0
    with pytest.raises(ValueError):
        contrast_at_temperature(tm, 30.0)


def test_rocking_peak_half_height_at_half_width():
    pk = RockingPeak(center=1e-5, fwhm=4.26e-6, height=3.0)
    assert float(pk(1e-5 + 2.13e-6)) == pytest.approx(1.5, rel=1e-12)
    assert float(pk(1e-5 - 2.13e-6)) == pytest.approx(1.5, rel=1e-12)
    assert float(pk(1e-5)) == pytest.approx(3.0, rel=1e-15)


def test_double_peak_minimum_is_negligible():
    sep = BeamParameters().prism_beam_separation
    fw = apparatus.MONOCHROMATOR_FWHM["triple"][0]
    peaks = [RockingPeak(0.0, fw), RockingPeak(sep, fw)]
    grid = np.linspace(0, sep, 2001)
    curve = rocking_curve(peaks, grid)
    assert curve[1000] < 1e-3
    # oracle: two Gaussian tails evaluated directly at the midpoint
    sigma = fw / (2 * math.sqrt(2 * math.log(2)))
    assert 2 * math.exp(-0.5 * (sep / 2 / sigma) ** 2) == pytest.approx(curve[1000], rel=1e-9)


def _gaussian_overlap(c1, s1, h1, c2, s2):
    s2sum = s1 * s1 + s2 * s2
    return h1 * math.sqrt(2 * math.pi) * s1 * s2 / math.sqrt(s2sum) * math.exp(-(c1 - c2) ** 2 / (2 * s2sum))


@pytest.mark.parametrize("down_height,acc", [(1.0, 4.26e-6), (0.3, 6.11e-6), (1.0, 2e-5)])
def test_peak_overlap_polarization_matches_closed_form(down_height, acc):
    fw = 4.26e-6
    up, down = RockingPeak(0.0, fw), RockingPeak(2.3e-5, fw, down_height)
    k = 2 * math.sqrt(2 * math.log(2))
    s, sw = fw / k, acc / k
    iu = _gaussian_overlap(0.0, s, 1.0, 0.0, sw)
    idn = _gaussian_overlap(2.3e-5, s, down_height, 0.0, sw)
    expected = (iu - idn) / (iu + idn)
    assert polarization_from_peak_overlap(up, down, acc) == pytest.approx(expected, abs=1e-9)


def test_coil_broadening_table_golden():
    base = RockingPeak(0.0, 4.26e-6, 10.0)
    golden = {
        "none": (10.0, 4.26e-6),
        "al_wire": (5.6, 4.26e-6 * 1.68),
        "al_ribbon": (8.0, 4.26e-6 * 1.16),
        "cu_ribbon_3mm": (8.4, 4.26e-6 * 1.11),
        "cu_ribbon_4mm": (8.5, 4.26e-6 * 1.16),
    }
    for kind, (h, fw) in golden.items():
        pk = broadened_peak(base, kind)
        assert pk.height == pytest.approx(h, rel=1e-12)
        assert pk.fwhm == pytest.approx(fw, rel=1e-12)
    assert {k.value for k in CoilKind} == set(golden)


def test_channel_parameter_validation():
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            apparatus.make_path_dephasing(bad)
        with pytest.raises(ValueError):
            apparatus.make_spin_depolarizer(bad)
        with pytest.raises(ValueError):
            apparatus.make_flipper_inefficiency(bad)
        with pytest.raises(ValueError):
            apparatus.make_spin_turner(0.0, bad)
    with pytest.raises(KeyError):
        apparatus.make_larmor_accelerator(0.1, "III")


@settings(max_examples=100, deadline=None)
@given(unit, unit, st.integers(0, 2**32 - 1))
def test_dephasing_semigroup(c1, c2, seed):
    state = SpinPathState(random_density_matrix(np.random.default_rng(seed)))
    two = apply_channels(state, [apparatus.make_path_dephasing(c1), apparatus.make_path_dephasing(c2)])
    one = apply_channel(state, apparatus.make_path_dephasing(c1 * c2))
    np.testing.assert_allclose(two.rho, one.rho, atol=1e-12)


UP_STATE = SpinPathState.product(np.diag([1.0, 0.0]), np.diag([1.0, 0.0]))


def test_spin_turner_examples():
    half = apply_channel(UP_STATE, apparatus.make_spin_turner(math.pi / 2, 1.0))
    np.testing.assert_allclose(half.spin_reduced().real.diagonal(), [0.5, 0.5], atol=1e-12)
    assert half.purity == pytest.approx(1.0, abs=1e-12)
    flipped = apply_channel(UP_STATE, apparatus.make_spin_turner(math.pi, 0.98))
    assert flipped.spin_reduced()[1, 1].real == pytest.approx(0.98, abs=1e-12)
    rho = random_density_matrix(np.random.default_rng(1))
    for f in (0.0, 0.4, 1.0):
        out = apply_channel(SpinPathState(rho), apparatus.make_spin_turner(0.0, f))
        np.testing.assert_allclose(out.rho, rho, atol=1e-12)


def test_opposite_larmor_turns_entangle_maximally():
    v = np.full(4, 0.5, dtype=complex)
    out = apply_channels(SpinPathState.from_vector(v), [apparatus.make_larmor_accelerator(math.pi / 2, "I"),
                                                        apparatus.make_larmor_accelerator(-math.pi / 2, "II")])
    assert out.concurrence() == pytest.approx(1.0, abs=1e-12)
    # by hand: amplitudes e^{-i pi/4}, e^{i pi/4}, e^{i pi/4}, e^{-i pi/4} over 2
    e = np.exp(1j * math.pi / 4)
    assert _pure_concurrence(np.array([1 / e, e, e, 1 / e]) / 2) == pytest.approx(1.0, abs=1e-12)
    rho = random_density_matrix(np.random.default_rng(2))
    np.testing.assert_allclose(apply_channel(SpinPathState(rho), apparatus.make_larmor_accelerator(0.0, "I")).rho,
                               rho, atol=1e-15)


def test_phase_shifter_examples():
    rho = random_density_matrix(np.random.default_rng(3))
    for chi in (0.0, 2 * math.pi):
        np.testing.assert_allclose(apply_channel(SpinPathState(rho), apparatus.make_phase_shifter(chi)).rho,
                                   rho, atol=1e-12)
    plus = SpinPathState.product(np.diag([1.0, 0.0]), np.full((2, 2), 0.5))
    minus = SpinPathState.product(np.diag([1.0, 0.0]), np.array([[0.5, -0.5], [-0.5, 0.5]]))
    np.testing.assert_allclose(apply_channel(plus, apparatus.make_phase_shifter(math.pi)).rho, minus.rho, atol=1e-12)


def test_path_dephasing_examples():
    bell = prepare_bell_state()
    np.testing.assert_allclose(apply_channel(bell, apparatus.make_path_dephasing(1.0)).rho, bell.rho, atol=1e-15)
    out = apply_channel(bell, apparatus.make_path_dephasing(0.91))
    grid = np.linspace(0, 2 * math.pi, 73)
    best = max(abs(joint_expectation(out, JointSetting(a, c))) for a in grid for c in grid)
    assert best == pytest.approx(0.91, abs=1e-12)


def test_spin_depolarizer_examples():
    rho = random_density_matrix(np.random.default_rng(4))
    state = SpinPathState(rho)
    np.testing.assert_allclose(apply_channel(state, apparatus.make_spin_depolarizer(1.0)).rho, rho, atol=1e-15)
    mixed = apply_channel(state, apparatus.make_spin_depolarizer(0.0))
    np.testing.assert_allclose(mixed.rho, np.kron(np.eye(2) / 2, state.path_reduced()), atol=1e-12)
    out = apply_channel(prepare_bell_state(), apparatus.make_spin_depolarizer(0.993))
    assert joint_expectation(out, JointSetting(0.0, 0.0)) == pytest.approx(0.993, abs=1e-12)


def test_thermal_phase_linear():
    tm = ThermalModel()
    assert thermal_phase_shift(tm, 25.2 - 0.5) == pytest.approx(-0.96, abs=1e-12)


def test_zero_current_no_rotation():
    assert larmor_angle(LarmorCoil(current=0.0), BeamParameters()) == 0.0


def _brute_force_polarization(sep, fwhm, acc):
    k = 2 * math.sqrt(2 * math.log(2))
    s, sa = fwhm / k, acc / k
    x = np.linspace(-20 * max(s, sa), sep + 20 * max(s, sa), 400_001)
    window = np.exp(-0.5 * (x / sa) ** 2)
    up = np.trapezoid(np.exp(-0.5 * (x / s) ** 2) * window, x)
    down = np.trapezoid(np.exp(-0.5 * ((x - sep) / s) ** 2) * window, x)
    return (up - down) / (up + down)


def test_peak_overlap_examples():
    fw = 4.26e-6
    p = polarization_from_peak_overlap(RockingPeak(0.0, fw), RockingPeak(2.3e-5, fw), fw)
    assert p > 0.993
    assert p == pytest.approx(_brute_force_polarization(2.3e-5, fw, fw), abs=1e-9)
    assert polarization_from_peak_overlap(RockingPeak(0.0, fw), RockingPeak(0.0, fw), fw) == pytest.approx(0.0, abs=1e-12)
    far = polarization_from_peak_overlap(RockingPeak(0.0, fw), RockingPeak(1e-3, fw), fw)
    assert far == pytest.approx(1.0, abs=1e-12)
