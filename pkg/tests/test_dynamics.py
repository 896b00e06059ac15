import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import constants

from bbtrap import rng
from bbtrap.dynamics import (
    AtomState, CounterModel, LoadingParams, LossModel, RegionSpec, bright_excess_factor, classify_counts,
    expected_capture, integrate_trajectory, omega_max_estimate, sample_thermal, sample_trapped,
    simulate_count_histogram, simulate_loading, simulate_retention,
)
from bbtrap.errors import FitError, PhysicsError, StabilityError

from conftest import harmonic_grid
from oracles import poisson_overlap

KB = constants.k
QUIET = LossModel(background_rate_dark=0.0, recoil_heating_on=False)
BOX = RegionSpec((-1e-6,) * 3, (1e-6,) * 3)


def test_thermal_mean_kinetic_energy(cesium):
    T = 20e-6
    atoms = sample_thermal(10_000, T, BOX, 1, mass=cesium.mass)
    ke = np.array([0.5 * cesium.mass * a.velocity @ a.velocity for a in atoms])
    # kinetic energy of a 3D Maxwell-Boltzmann atom has variance (3/2) (kT)^2
    sigma = math.sqrt(1.5) * KB * T / math.sqrt(len(ke))
    assert abs(ke.mean() - 1.5 * KB * T) < 3 * sigma
    pos = np.array([a.position for a in atoms])
    assert np.all(pos >= -1e-6) and np.all(pos <= 1e-6)


def test_cold_limit_speeds(cesium):
    atoms = sample_thermal(200, 1e-9, BOX, 3, mass=cesium.mass)
    speeds = np.array([np.linalg.norm(a.velocity) for a in atoms])
    assert speeds.max() < 1e-3


def test_sampling_deterministic(cesium):
    a = sample_thermal(50, 20e-6, BOX, 42, mass=cesium.mass)
    b = sample_thermal(50, 20e-6, BOX, 42, mass=cesium.mass)
    assert all(np.array_equal(x.position, y.position) and np.array_equal(x.velocity, y.velocity) for x, y in zip(a, b))
    c = sample_thermal(50, 20e-6, BOX, 43, mass=cesium.mass)
    assert not np.array_equal(a[0].velocity, c[0].velocity)


def test_thermal_rejects_bad_input(cesium):
    with pytest.raises(PhysicsError):
        sample_thermal(5, 0.0, BOX, 1)
    with pytest.raises(PhysicsError):
        RegionSpec((0, 0, 0), (0, 1, 1))


def test_streams_are_independent_of_order():
    a = rng.stream(5, rng.TRAJECTORY, 7).random(4)
    rng.stream(5, rng.TRAJECTORY, 6).random(100)
    b = rng.stream(5, rng.TRAJECTORY, 7).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rng.stream(5, rng.TRAJECTORY, 8).random(4))


# ---------------------------------------------------------------------------
# integrator


def harmonic_run(cesium, interpolation, steps=100_000, per_period=None):
    omega = 2 * math.pi * 20e3
    pot = harmonic_grid(n=64, pitch=50e-9, omega=omega, mass=cesium.mass)
    dt = 1.0 / (50 * omega)
    atom = AtomState(np.array([0.4e-6, -0.2e-6, 0.1e-6]), np.array([0.0, 0.01, -0.02]))
    rec = integrate_trajectory(atom, pot, dt, steps, QUIET, rng.stream(0, 0), species=cesium,
                               omega_max=omega, interpolation=interpolation)
    return rec, omega, dt


def test_tricubic_energy_drift_below_1e3(cesium):
    rec, _, _ = harmonic_run(cesium, "tricubic")
    assert rec.alive
    e = rec.energies(cesium.mass)
    assert np.max(np.abs(e - e[0])) / e[0] < 1e-3


def test_tricubic_period(cesium):
    rec, omega, dt = harmonic_run(cesium, "tricubic", steps=20_000)
    x = rec.positions[:, 0]
    # upward zero crossings with linear interpolation
    s = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    t = rec.times[s] + dt * (-x[s]) / (x[s + 1] - x[s])
    period = np.mean(np.diff(t))
    assert period == pytest.approx(2 * math.pi / omega, rel=1e-3)


def test_trilinear_is_bounded_but_not_conservative(cesium):
    rec, _, _ = harmonic_run(cesium, "trilinear", steps=20_000)
    e = rec.energies(cesium.mass)
    drift = np.max(np.abs(e - e[0])) / e[0]
    # piecewise-constant force: bounded energy error, well above the tricubic level
    assert 1e-3 < drift < 0.2


def test_stability_guard(cesium):
    pot = harmonic_grid(n=32, mass=cesium.mass)
    om = omega_max_estimate(pot, cesium.mass)
    atom = AtomState(np.zeros(3), np.zeros(3))
    with pytest.raises(StabilityError):
        integrate_trajectory(atom, pot, 0.2 / om, 10, QUIET, rng.stream(0, 0), species=cesium)


def test_energetic_atom_escapes_over_saddle(cesium, smoke_trap):
    _, pot, rep = smoke_trap
    d = rep.saddle_position - rep.minimum_position
    d /= np.linalg.norm(d)
    speed = math.sqrt(2 * 1.5 * rep.depth / cesium.mass)
    atom = AtomState(rep.minimum_position.copy(), speed * d)
    om = float(np.max(rep.trap_frequencies))
    rec = integrate_trajectory(atom, pot, 1 / (50 * om), 200_000, QUIET, rng.stream(0, 1),
                               species=cesium, omega_max=om, record_every=100)
    assert rec.fate == "escaped"
    # it leaves through the face nearest the saddle direction
    exit_axis = int(np.argmax(np.abs(rec.final.position - rep.minimum_position) / (pot.bounds()[:, 1])))
    assert exit_axis == int(np.argmax(np.abs(d) / pot.bounds()[:, 1]))


def test_cold_atom_survives_a_million_steps(cesium, smoke_trap):
    _, pot, rep = smoke_trap
    d = rep.saddle_position - rep.minimum_position
    d /= np.linalg.norm(d)
    speed = math.sqrt(2 * 0.45 * rep.depth / cesium.mass)
    atom = AtomState(rep.minimum_position.copy(), speed * d)
    om = float(np.max(rep.trap_frequencies))
    rec = integrate_trajectory(atom, pot, 1 / (50 * om), 1_000_000, QUIET, rng.stream(0, 2),
                               species=cesium, omega_max=om, record_every=1000)
    assert rec.alive
    assert np.max(rec.energies(cesium.mass)) < rep.barrier_energy


def test_background_loss_time_is_exponential(cesium):
    pot = harmonic_grid(n=32, mass=cesium.mass)
    om = 2 * math.pi * 20e3
    loss = LossModel(background_rate_dark=2e3, recoil_heating_on=False)
    ends = []
    for i in range(400):
        rec = integrate_trajectory(AtomState(np.zeros(3), np.zeros(3)), pot, 1 / (50 * om), 5_000, loss,
                                   rng.stream(9, rng.TRAJECTORY, i), species=cesium, omega_max=om,
                                   record_every=5_000)
        ends.append(rec.end_time if rec.fate == "lost" else np.inf)
    ends = np.array(ends)
    horizon = 5_000 / (50 * om)
    frac = np.mean(np.isfinite(ends))
    expected = 1 - math.exp(-2e3 * horizon)
    assert abs(frac - expected) < 4 * math.sqrt(expected * (1 - expected) / 400)


def test_recoil_kicks_heat(cesium, smoke_trap):
    _, pot, rep = smoke_trap
    om = float(np.max(rep.trap_frequencies))
    hot = LossModel(background_rate_dark=0.0, heating_multiplier=1e5)
    atom = AtomState(rep.minimum_position + np.array([2e-7, 0, 0]), np.zeros(3))
    rec = integrate_trajectory(atom, pot, 1 / (50 * om), 50_000, hot, rng.stream(1, 3), species=cesium,
                               omega_max=om, record_every=100)
    assert rec.n_kicks > 0
    e = rec.energies(cesium.mass)
    assert e[-1] > e[0]


def test_trapped_sample_stays_below_barrier(cesium, smoke_trap):
    _, pot, rep = smoke_trap
    pos, vel = sample_trapped(500, 20e-6, pot, rep, 4, cesium.mass)
    u, inside = pot.sample(pos)
    assert inside.all() and np.all(u < rep.barrier_energy)
    # equipartition of the kinetic part
    ke = 0.5 * cesium.mass * np.sum(vel**2, axis=1)
    assert ke.mean() == pytest.approx(1.5 * KB * 20e-6, rel=0.15)


# ---------------------------------------------------------------------------
# loading and counting


def test_zero_density_never_loads(smoke_trap):
    _, pot, rep = smoke_trap
    out = simulate_loading(LoadingParams(mot_density=0.0), pot, rep, 200, 1)
    assert not out.occupancy.any()


def test_loading_probability_and_no_pairs(smoke_trap):
    _, pot, rep = smoke_trap
    out = simulate_loading(LoadingParams(), pot, rep, 10_000, 2024)
    assert out.p1 == pytest.approx(0.526, abs=0.015)
    assert set(np.unique(out.occupancy)) <= {0, 1}
    assert np.count_nonzero(out.occupancy >= 2) == 0
    assert np.mean(out.captured) == pytest.approx(out.expected_capture, rel=0.05)


def test_loading_rejects_bad_probability():
    with pytest.raises(PhysicsError):
        LoadingParams(blockade_p1=1.5)


def test_dark_counter_is_unimodal():
    res = simulate_count_histogram(2200, 0.5, CounterModel(atom_count_rate=0.0), 3)
    assert not res.bimodal
    assert res.p1 == 0.0


def test_classifier_against_exact_poisson_overlap():
    counter = CounterModel(atom_count_rate=500.0, background_count_rate=100.0)
    occ = (rng.stream(11, 0).random(10_000) < 0.5).astype(int)
    res = simulate_count_histogram(len(occ), occ, counter, 11)
    m0, m1 = 10.0, 60.0
    assert (m1 - m0) >= 6 * (math.sqrt(m0) + math.sqrt(m1)) / 2
    assert res.bimodal and res.distinguishable
    wrong = np.mean((res.counts > res.threshold) != occ.astype(bool))
    assert wrong < 1e-3
    oracle = poisson_overlap(res.mode_means[0], res.mode_means[1], res.threshold, res.p1)
    assert res.overlap == pytest.approx(oracle, rel=1e-6)
    assert oracle < 1e-3


def test_preset_histogram_recovers_loading_probability():
    res = simulate_count_histogram(2200, 0.526, CounterModel(), 5)
    assert res.bimodal
    assert res.p1 == pytest.approx(0.526, abs=0.02)


def test_indistinguishable_modes_flagged():
    res = simulate_count_histogram(2200, 0.5, CounterModel(atom_count_rate=150.0), 7)
    assert not res.distinguishable


@settings(max_examples=30, deadline=None)
@given(counts=st.lists(st.integers(0, 200), min_size=2, max_size=300))
def test_classifier_never_crashes_and_p1_is_a_probability(counts):
    res = classify_counts(counts)
    assert 0.0 <= res.p1 <= 1.0
    assert 0.0 <= res.overlap <= 1.0


# ---------------------------------------------------------------------------
# retention


def test_zero_loss_full_retention(cesium, smoke_trap):
    _, pot, rep = smoke_trap
    res = simulate_retention(200, [0.5, 1, 2, 4], pot, rep, LossModel(0.0, recoil_heating_on=False), 1,
                             species=cesium, fit=False)
    assert np.all(res.survival == 1.0)
    with pytest.raises(FitError):
        simulate_retention(200, [0.5, 1, 2, 4], pot, rep, LossModel(0.0, recoil_heating_on=False), 1,
                           species=cesium)


@pytest.mark.parametrize("tau", [1.0, 3.8, 6.0, 10.0])
def test_retention_fit_recovers_lifetime(cesium, smoke_trap, tau):
    _, pot, rep = smoke_trap
    loss = LossModel(background_rate_dark=1 / tau, recoil_heating_on=False)
    hold = np.linspace(0.1, 2.5, 12) * tau
    res = simulate_retention(1000, hold, pot, rep, loss, 17, species=cesium)
    assert res.fit.tau == pytest.approx(tau, rel=0.1)


def test_heating_only_shortens_lifetime(cesium, smoke_trap):
    _, pot, rep = smoke_trap
    hold = [0.5, 1, 2, 4, 8]
    curves = []
    for mult in (0.0, 1.0, 10.0):
        loss = LossModel(heating_multiplier=mult)
        curves.append(simulate_retention(300, hold, pot, rep, loss, 8, species=cesium, fit=False).survival)
    assert np.all(curves[1] <= curves[0]) and np.all(curves[2] <= curves[1])


def test_bright_trap_loses_faster(cesium, smoke_trap):
    _, pot, rep = smoke_trap
    hold = [0.5, 1, 2, 4, 8]
    dark = simulate_retention(500, hold, pot, rep, LossModel(readout_on=False), 3, species=cesium)
    bright = simulate_retention(500, hold, pot, rep, LossModel(readout_on=True), 3, species=cesium)
    assert bright.fit.tau < dark.fit.tau


def test_loss_model_invariants():
    with pytest.raises(PhysicsError):
        LossModel(background_rate_dark=-1.0)
    with pytest.raises(PhysicsError):
        LossModel(bright_excess_factor=0.5)
    assert LossModel(readout_on=True).loss_rate == pytest.approx(1 / 3.8)
    assert bright_excess_factor(0.015, 1 + (6.0 / 3.8 - 1) / 0.015) == pytest.approx(6.0 / 3.8)
