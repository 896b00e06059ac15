import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbtrap.errors import GridError, PhysicsError
from bbtrap.optics import (
    BeamSpec, EvanescentWarning, GridSpec, IntensityVolume, ScalarField, VolumeSpec, crossed_bbt_intensity,
    gaussian_field, lg_amplitude, lg_field, lg_intensity, load_ivol, propagate, ring_radius, save_ivol,
    slice_extract, spp_apply, spp_beam_stack, write_slice_csv,
)

from conftest import SMOKE, matched_beams
from oracles import fresnel_radial, lg01_ring_radius, focused_vortex_profile, peak_radius, rayleigh_sommerfeld_radial


def central(a, frac=0.5):
    n = a.shape[0]
    lo, hi = int(n * (1 - frac) / 2), int(n * (1 + frac) / 2)
    return a[lo:hi, lo:hi]


def test_beam_spec_rejects_bad_values():
    with pytest.raises(PhysicsError):
        BeamSpec(0.0, 1.0)
    with pytest.raises(PhysicsError):
        BeamSpec(1e-6, 1.0, wavelength=-1.0)
    with pytest.raises(PhysicsError):
        BeamSpec(1e-6, -1.0)
    with pytest.raises(PhysicsError):
        BeamSpec(1e-6, 1.0, half_angle_theta=0.31)


def test_grid_must_be_power_of_two():
    with pytest.raises(GridError):
        GridSpec(100, 128, 50e-9)


def test_lg_field_power_matches_spec():
    spec = BeamSpec(2.3e-6, 0.24)
    f = lg_field(spec, GridSpec(256, 256, 50e-9), 3e-6)
    assert f.power() == pytest.approx(0.24, rel=1e-12)


def test_lg_field_rejects_coarse_grid():
    with pytest.raises(GridError):
        lg_field(BeamSpec(1e-6, 1.0), GridSpec(64, 64, 200e-9), 0.0)


def test_vortex_null_on_axis():
    spec = BeamSpec(2.3e-6, 0.24)
    f = lg_field(spec, GridSpec(128, 128, 50e-9), 0.0)
    assert f.amplitude[64, 64] == 0.0


def test_ring_radius_at_waist_is_w0_over_root2():
    spec = BeamSpec(2.3e-6, 0.24)
    f = lg_field(spec, GridSpec(256, 256, 25e-9), 0.0)
    assert ring_radius(f.intensity(), 25e-9) == pytest.approx(2.3e-6 / math.sqrt(2), rel=5e-3)


def test_ring_radius_at_rayleigh_range_grows_by_root2():
    spec = BeamSpec(2.3e-6, 0.24)
    zr = math.pi * spec.waist_w0**2 / spec.wavelength
    f = lg_field(spec, GridSpec(256, 256, 50e-9), zr)
    expected = lg01_ring_radius(2.3e-6, 532e-9, zr)
    assert expected == pytest.approx(2.3e-6, rel=1e-12)
    assert ring_radius(f.intensity(), 50e-9) == pytest.approx(expected, rel=5e-3)


@settings(max_examples=30, deadline=None)
@given(z=st.floats(-60e-6, 60e-6), l=st.sampled_from([-2, -1, 1, 2, 3]))
def test_vortex_intensity_vanishes_on_own_axis_at_every_z(z, l):
    spec = BeamSpec(2.3e-6, 0.24, charge_l=l)
    r = np.array([0.0, 1e-6, 2e-6])
    prof = lg_intensity(spec, r, 0 * r, z + 0 * r)
    peak = lg_intensity(spec, np.array([spec.waist_at(z) * math.sqrt(abs(l) / 2)]), np.zeros(1), np.full(1, z))
    assert prof[0] <= 1e-6 * peak[0]


def test_spp_identity_for_zero_charge():
    f = gaussian_field(BeamSpec(2.3e-6, 0.1), GridSpec(64, 64, 100e-9))
    g = spp_apply(f, 0)
    assert np.array_equal(f.amplitude, g.amplitude)


@settings(max_examples=20, deadline=None)
@given(l=st.integers(-4, 4), seed=st.integers(0, 2**31 - 1))
def test_spp_preserves_power(l, seed):
    rng = np.random.default_rng(seed)
    f = ScalarField(rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32)), 1e-7)
    assert spp_apply(f, l).power() == pytest.approx(f.power(), rel=1e-13)


def test_spp_on_gaussian_develops_null_on_axis():
    vals = []
    for pitch in (100e-9, 50e-9, 25e-9):
        grid = GridSpec(256, 256, pitch)
        f = spp_apply(gaussian_field(BeamSpec(2.3e-6, 0.1), grid), 1)
        g = propagate(f, 1e-6)
        vals.append(g.intensity()[128, 128] / g.intensity().max())
    assert vals[-1] < vals[0]
    assert vals[-1] < 1e-3


def test_spp_far_field_ring_matches_direct_diffraction_sum():
    spec = BeamSpec(2.3e-6, 0.1)
    pitch, z = 200e-9, 100e-6
    src = spp_apply(gaussian_field(spec, GridSpec(256, 256, pitch)), 1)
    # zero padding keeps the wide-angle light from the phase singularity off the periodic images
    padded = np.zeros((1024, 1024), dtype=complex)
    padded[384:640, 384:640] = src.amplitude
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EvanescentWarning)
        far = propagate(ScalarField(padded, pitch), z)
    measured = ring_radius(far.intensity(), pitch)
    radii = np.arange(0, 15e-6, pitch)
    ref = np.abs(rayleigh_sommerfeld_radial(src.amplitude, pitch, 532e-9, z, radii)) ** 2
    assert measured == pytest.approx(peak_radius(radii, ref), rel=1e-2)
    row = far.intensity()[512:512 + len(radii), 512]
    assert np.max(np.abs(row - ref)) < 0.03 * ref.max()


def test_fresnel_and_angular_spectrum_agree_for_gaussian():
    spec = BeamSpec(2.3e-6, 0.1)
    src = gaussian_field(spec, GridSpec(256, 256, 200e-9))
    far = propagate(src, 100e-6)
    radii = np.arange(0, 10e-6, 200e-9)
    ref = np.abs(fresnel_radial(src.amplitude, 200e-9, 532e-9, 100e-6, radii)) ** 2
    row = far.intensity()[128:128 + len(radii), 128]
    # the paraxial kernel is good to about (wavelength / (pi w0))^2
    assert np.max(np.abs(row - ref)) < 5e-3 * ref.max()
    exact = np.abs(rayleigh_sommerfeld_radial(src.amplitude, 200e-9, 532e-9, 100e-6, radii)) ** 2
    assert np.max(np.abs(row - exact)) < 1e-8 * exact.max()


def test_propagate_zero_is_identity():
    f = lg_field(BeamSpec(2.3e-6, 0.24), GridSpec(64, 64, 100e-9), 0.0)
    assert np.array_equal(propagate(f, 0.0).amplitude, f.amplitude)


@settings(max_examples=15, deadline=None)
@given(d=st.floats(-40e-6, 40e-6).filter(lambda v: abs(v) > 1e-9))
def test_propagate_there_and_back_and_conserves_power(d):
    f = lg_field(BeamSpec(2.5e-6, 0.24), GridSpec(256, 256, 100e-9), 0.0)
    g = propagate(f, d)
    assert g.power() == pytest.approx(f.power(), rel=1e-9)
    back = propagate(g, -d)
    err = np.max(np.abs(back.amplitude - f.amplitude)) / np.max(np.abs(f.amplitude))
    assert err < 1e-9


def test_evanescent_warning():
    rng = np.random.default_rng(0)
    f = ScalarField(rng.normal(size=(64, 64)).astype(complex), 100e-9)
    with pytest.warns(EvanescentWarning):
        propagate(f, 1e-6)


@pytest.mark.parametrize("z", [-20e-6, -10e-6, 5e-6, 10e-6, 20e-6])
def test_angular_spectrum_matches_analytic_lg(z):
    spec = BeamSpec(4e-6, 0.24)
    grid = GridSpec(256, 256, 100e-9)
    start = lg_field(spec, grid, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", EvanescentWarning)
        num = propagate(start, z)
    ref = lg_field(spec, grid, z)
    err = np.max(np.abs(central(num.amplitude) - central(ref.amplitude))) / np.max(np.abs(ref.amplitude))
    assert err < 1e-3


def test_crossed_intensity_is_zero_at_origin():
    a, b = matched_beams()
    vol = crossed_bbt_intensity(a, b, SMOKE)
    c = tuple(n // 2 for n in SMOKE.shape)
    assert vol.values[c] == 0.0
    assert np.all(vol.values >= 0)


def test_crossed_intensity_mirror_symmetric_in_z():
    a, b = matched_beams()
    v = crossed_bbt_intensity(a, b, SMOKE).values
    # nodes k and n-k sit at opposite z
    mirrored = v[:, :, :0:-1]
    np.testing.assert_allclose(v[:, :, 1:], mirrored, rtol=1e-12, atol=1e-12 * v.max())


def test_swapping_beams_is_bit_exact():
    a, b = matched_beams()
    assert np.array_equal(crossed_bbt_intensity(a, b, SMOKE).values, crossed_bbt_intensity(b, a, SMOKE).values)


def test_result_independent_of_thread_count():
    a, b = matched_beams()
    one = crossed_bbt_intensity(a, b, SMOKE, threads=1).values
    four = crossed_bbt_intensity(a, b, SMOKE, threads=4).values
    assert np.array_equal(one, four)


def test_equal_polarizations_rejected():
    a, _ = matched_beams()
    with pytest.raises(PhysicsError):
        crossed_bbt_intensity(a, a, SMOKE)


def test_focused_spp_beam_ring_matches_hankel_transform():
    spec = BeamSpec(3.5e-6, 0.24)
    pitch = 100e-9
    stack = spp_beam_stack(spec, GridSpec(256, 256, pitch), [0.0, 20e-6])
    assert stack[:, :, 0].sum() * pitch**2 == pytest.approx(0.24, rel=1e-9)
    assert stack[:, :, 1].sum() * pitch**2 == pytest.approx(0.24, rel=1e-9)
    assert stack[128, 128, 0] < 1e-12 * stack[:, :, 0].max()
    radii = np.linspace(1e-6, 6e-6, 501)
    prof = focused_vortex_profile(spec.waist_w0, 1, radii)
    assert ring_radius(stack[:, :, 0], pitch) == pytest.approx(peak_radius(radii, prof), rel=1e-2)


def test_spp_model_gives_dark_centre_with_same_power_scale():
    a, b = matched_beams()
    vol = VolumeSpec(64, 64, 16, 100e-9, 100e-9, 2e-6)
    lg = crossed_bbt_intensity(a, b, vol, model="lg").values
    spp = crossed_bbt_intensity(a, b, vol, model="spp").values
    assert spp[32, 32, 8] < 1e-12 * spp.max()
    # the focused SPP ring is wider than the LG ring, so its peak is lower
    assert 0.3 < spp.max() / lg.max() < 1.0


def test_slice_of_zero_field_is_zero():
    vol = IntensityVolume(np.zeros((8, 8, 4)), (1e-7, 1e-7, 1e-6), (-4e-7, -4e-7, -2e-6))
    assert not slice_extract(vol, "xy", 0.0).values.any()


def test_slice_out_of_range():
    vol = IntensityVolume(np.zeros((8, 8, 4)), (1e-7, 1e-7, 1e-6), (-4e-7, -4e-7, -2e-6))
    with pytest.raises(GridError):
        slice_extract(vol, "xy", 5e-6)
    with pytest.raises(GridError):
        slice_extract(vol, "ab", 0.0)


def test_restacking_xy_slices_is_bit_exact():
    a, b = matched_beams()
    vol = crossed_bbt_intensity(a, b, SMOKE)
    z = vol.axes()[2]
    stack = np.stack([slice_extract(vol, "xy", zz).values for zz in z], axis=2)
    assert np.array_equal(stack, vol.values)


def test_xz_slice_has_dark_centre_and_two_bright_lobes_along_z():
    a, b = matched_beams()
    vol = crossed_bbt_intensity(a, b, VolumeSpec(64, 64, 64, 100e-9, 100e-9, 1e-6))
    sl = slice_extract(vol, "xz", 0.0)
    on_axis = sl.values[32, :]
    assert on_axis[32] == 0.0
    # z nodes 32 - k and 32 + k are mirror images
    np.testing.assert_allclose(on_axis[1:32], on_axis[63:32:-1], rtol=1e-12)
    assert on_axis[1:].max() > 0


def test_slice_csv_header(tmp_path):
    vol = IntensityVolume(np.ones((4, 4, 2)), (1e-7, 1e-7, 1e-6), (-2e-7, -2e-7, -1e-6))
    p = tmp_path / "s.csv"
    write_slice_csv(p, slice_extract(vol, "xy", 0.0))
    assert p.read_text().splitlines()[0] == "# x_m, y_m, intensity_W_m2"
    assert np.loadtxt(p, delimiter=",").shape == (16, 3)


@settings(max_examples=20, deadline=None)
@given(shape=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), seed=st.integers(0, 1000))
def test_ivol_round_trip(tmp_path_factory, shape, seed):
    v = np.random.default_rng(seed).random(shape)
    p = tmp_path_factory.mktemp("ivol") / "v.ivol"
    save_ivol(p, v, (1e-7, 2e-7, 3e-7), (0.0, -1e-6, 2e-6), quantity="intensity", units="W/m^2")
    back, header = load_ivol(p)
    assert np.array_equal(back, v)
    assert header["order"] == "x-fastest"


def test_ivol_payload_is_x_fastest(tmp_path):
    v = np.arange(24, dtype=float).reshape(2, 3, 4)
    p = tmp_path / "v.ivol"
    save_ivol(p, v, (1, 1, 1), (0, 0, 0), quantity="intensity", units="W/m^2")
    raw = p.read_bytes().split(b"\n", 1)[1]
    flat = np.frombuffer(raw, dtype="<f8")
    assert flat[1] == v[1, 0, 0]


def test_lg_amplitude_carries_gouy_phase():
    spec = BeamSpec(2.3e-6, 1.0, charge_l=1)
    zr = spec.rayleigh_range
    # on-axis phase of the radial ring point at x = small, y = 0 minus carrier
    a = lg_amplitude(spec, np.array([1e-9]), np.array([0.0]), np.array([zr]))
    phase = np.angle(a[0] * np.exp(-1j * spec.wavenumber * zr))
    assert phase == pytest.approx(-2 * math.pi / 4, abs=1e-6)
