"""Monte Carlo single-atom loading, trapped motion, heating and loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy import constants as csts
from scipy import special, stats

from . import rng as rngmod
from .errors import FitError, GridError, PhysicsError, StabilityError
from .fitting import ExpFit, fit_exponential
from .interp import lookup, order_of
from .trap import KB, HBAR, AtomSpecies, PotentialGrid, TrapReport, scattering_coefficient


@dataclass
class AtomState:
    position: np.ndarray
    velocity: np.ndarray
    alive: bool = True
    energy_cache: float = float("nan")


@dataclass(frozen=True)
class LossModel:
    background_rate_dark: float = 1.0 / 6.0
    bright_excess_factor: float = 6.0 / 3.8
    readout_on: bool = False
    recoil_heating_on: bool = True
    # scales the photon scattering rate; 0 disables recoil heating
    heating_multiplier: float = 1.0
    # one-sided relative intensity noise PSD at twice the trap frequency (1/Hz); no default value is known
    intensity_noise_psd: float = 0.0

    def __post_init__(self):
        if self.background_rate_dark < 0 or self.heating_multiplier < 0 or self.intensity_noise_psd < 0:
            raise PhysicsError("loss and heating rates must be non-negative")
        if self.bright_excess_factor < 1:
            raise PhysicsError("bright_excess_factor must be >= 1")

    @property
    def loss_rate(self) -> float:
        return self.background_rate_dark * (self.bright_excess_factor if self.readout_on else 1.0)


def bright_excess_factor(excited_fraction: float, cross_section_ratio: float) -> float:
    """Loss-rate ratio bright/dark when a fraction of atoms sits in the excited state.

    ``cross_section_ratio`` is sigma(excited-ground) / sigma(ground-ground)
    for collisions with background Cs.
    """
    return 1.0 + excited_fraction * (cross_section_ratio - 1.0)


@dataclass(frozen=True)
class CounterModel:
    atom_count_rate: float = 600.0
    background_count_rate: float = 100.0
    integration_time: float = 0.1

    def __post_init__(self):
        if min(self.atom_count_rate, self.background_count_rate) < 0 or self.integration_time <= 0:
            raise PhysicsError("count rates must be >= 0 and integration time > 0")


@dataclass(frozen=True)
class RegionSpec:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    kind: str = "uniform"
    # Gaussian cloud rms widths, centred on the box centre
    sigma: tuple[float, float, float] | None = None

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise PhysicsError("empty sampling region")
        if self.kind not in ("uniform", "gaussian"):
            raise PhysicsError(f"unknown region kind {self.kind!r}")
        if self.kind == "gaussian" and self.sigma is None:
            raise PhysicsError("gaussian region needs sigma")

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    @classmethod
    def of_grid(cls, pot: PotentialGrid) -> "RegionSpec":
        b = pot.bounds()
        return cls(tuple(b[:, 0]), tuple(b[:, 1]))


# ---------------------------------------------------------------------------
# sampling


def thermal_arrays(n: int, temperature: float, region: RegionSpec, gen: np.random.Generator, mass: float):
    """Positions and Maxwell-Boltzmann velocities as (n, 3) arrays."""
    if not temperature > 0:
        raise PhysicsError("temperature must be positive")
    lo, hi = np.asarray(region.lo), np.asarray(region.hi)
    if region.kind == "uniform":
        pos = lo + (hi - lo) * gen.random((n, 3))
    else:
        centre = 0.5 * (lo + hi)
        pos = centre + np.asarray(region.sigma) * gen.standard_normal((n, 3))
    vel = math.sqrt(KB * temperature / mass) * gen.standard_normal((n, 3))
    return pos, vel


def sample_thermal(n: int, temperature: float, spatial_region: RegionSpec, rng_seed: int,
                   mass: float = 2.20694650e-25) -> list[AtomState]:
    gen = rngmod.stream(rng_seed, rngmod.THERMAL)
    pos, vel = thermal_arrays(n, temperature, spatial_region, gen, mass)
    return [AtomState(p.copy(), v.copy()) for p, v in zip(pos, vel)]


def sample_trapped(n: int, temperature: float, pot: PotentialGrid, report: TrapReport,
                   rng_seed: int, mass: float, max_energy_kT: float = 20.0):
    """Canonical ensemble in the trap: positions ~ exp(-U/kT) by rejection, MB velocities.

    Proposals are uniform over the bounding box of the connected region
    with U - U_min < ``max_energy_kT`` kT.
    """
    from scipy import ndimage

    kT = KB * temperature
    U = pot.values
    ci = pot.nearest_index(report.minimum_position)
    cut = min(report.minimum_energy + max_energy_kT * kT, report.barrier_energy)
    labels, _ = ndimage.label(U < cut, structure=ndimage.generate_binary_structure(3, 1))
    if labels[ci] == 0:
        raise PhysicsError("trap minimum not below the sampling cut")
    idx = np.argwhere(labels == labels[ci])
    lo = pot.position(idx.min(axis=0) - 1)
    hi = pot.position(idx.max(axis=0) + 1)
    gen = rngmod.stream(rng_seed, rngmod.THERMAL, 1)
    out = np.empty((0, 3))
    umin = report.minimum_energy
    while len(out) < n:
        prop = lo + (hi - lo) * gen.random((max(4 * n, 1024) * 16, 3))
        u, inside = pot.sample(prop)
        acc = inside & (u < report.barrier_energy) & (gen.random(len(prop)) < np.exp(-(u - umin) / kT))
        out = np.vstack([out, prop[acc]])
    pos = out[:n]
    vel = math.sqrt(kT / mass) * gen.standard_normal((n, 3))
    return pos, vel


# ---------------------------------------------------------------------------
# trajectories


def omega_max_estimate(pot: PotentialGrid, mass: float) -> float:
    """Upper bound on the local oscillation frequency from the largest grid curvature."""
    best = 0.0
    for ax, d in enumerate(pot.pitches):
        if pot.dims[ax] >= 3:
            curv = np.max(np.abs(np.diff(pot.values, 2, axis=ax))) / d**2
            best = max(best, curv)
    return math.sqrt(best / mass)


@nb.njit(cache=True)
def _verlet_kernel(values, ox, oy, oz, dx, dy, dz, pos, vel, inv_mass, dt, steps, record_every,
                   loss_time, rate_per_joule, hazard_targets, kick_dirs, kick_dv, snap_steps, order):
    """Velocity Verlet on the interpolated potential (``order`` 1 trilinear, 3 tricubic).

    Recoil kicks fire when the accumulated hazard integral of
    ``rate_per_joule * U`` passes the next unit-exponential target.  The
    running trapezoid integral of U dt is sampled at ``snap_steps``.
    Returns fate code 0 alive, 1 background loss, 2 left grid, 3 kick buffer exhausted.
    """
    nrec = steps // record_every + 1
    rec = np.zeros((nrec, 7))
    snaps = np.zeros(snap_steps.shape[0])
    buf = np.zeros(4)
    x, y, z = pos[0], pos[1], pos[2]
    vx, vy, vz = vel[0], vel[1], vel[2]
    if not lookup(order, values, ox, oy, oz, dx, dy, dz, x, y, z, buf):
        return rec[:0], snaps, 2, 0, 0, np.array([x, y, z, vx, vy, vz])
    u = buf[0]
    ax, ay, az = -buf[1] * inv_mass, -buf[2] * inv_mass, -buf[3] * inv_mass
    rec[0, 0] = 0.0
    rec[0, 1], rec[0, 2], rec[0, 3] = x, y, z
    rec[0, 4], rec[0, 5], rec[0, 6] = vx, vy, vz
    r = 1
    hazard = 0.0
    nk = 0
    uint = 0.0
    s = 0
    while s < snap_steps.shape[0] and snap_steps[s] == 0:
        snaps[s] = 0.0
        s += 1
    fate = 0
    step = 0
    for step in range(1, steps + 1):
        t = step * dt
        vx += 0.5 * dt * ax
        vy += 0.5 * dt * ay
        vz += 0.5 * dt * az
        x += dt * vx
        y += dt * vy
        z += dt * vz
        u_old = u
        if not lookup(order, values, ox, oy, oz, dx, dy, dz, x, y, z, buf):
            fate = 2
            break
        u = buf[0]
        ax, ay, az = -buf[1] * inv_mass, -buf[2] * inv_mass, -buf[3] * inv_mass
        vx += 0.5 * dt * ax
        vy += 0.5 * dt * ay
        vz += 0.5 * dt * az
        uint += 0.5 * (u_old + u) * dt
        while s < snap_steps.shape[0] and snap_steps[s] == step:
            snaps[s] = uint
            s += 1
        if rate_per_joule > 0.0:
            hazard += rate_per_joule * 0.5 * (u_old + u) * dt
            while nk < hazard_targets.shape[0] and hazard >= hazard_targets[nk]:
                vx += kick_dv * kick_dirs[nk, 0]
                vy += kick_dv * kick_dirs[nk, 1]
                vz += kick_dv * kick_dirs[nk, 2]
                nk += 1
            if nk >= hazard_targets.shape[0]:
                fate = 3
                break
        if step % record_every == 0:
            rec[r, 0] = t
            rec[r, 1], rec[r, 2], rec[r, 3] = x, y, z
            rec[r, 4], rec[r, 5], rec[r, 6] = vx, vy, vz
            r += 1
        if t >= loss_time:
            fate = 1
            break
    return rec[:r], snaps, fate, step, nk, np.array([x, y, z, vx, vy, vz])


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    potential: np.ndarray
    fate: str
    end_time: float
    n_kicks: int
    final: AtomState
    interpolation: str = "trilinear"
    # trapezoid integral of U dt at the requested snapshot times
    potential_integrals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def alive(self) -> bool:
        return self.fate == "alive"

    def energies(self, mass: float) -> np.ndarray:
        return 0.5 * mass * np.sum(self.velocities**2, axis=1) + self.potential


_FATES = {0: "alive", 1: "lost", 2: "escaped", 3: "kick-buffer"}


def integrate_trajectory(atom: AtomState, pot: PotentialGrid, dt: float, steps: int,
                         loss: LossModel, rng_stream: np.random.Generator, *,
                         species: AtomSpecies, record_every: int = 1, omega_max: float | None = None,
                         snapshot_times=None, interpolation: str = "trilinear") -> TrajectoryRecord:
    """Velocity-Verlet trajectory with stochastic recoil heating and background loss.

    Scattering events follow an inhomogeneous Poisson process with rate
    ``scattering_rate(I(r(t)))``; each event adds one effective kick of
    sqrt(2) hbar k in a random direction (absorption plus emission lumped
    together).  Background loss is a homogeneous Poisson process, sampled as
    a single exponential loss time, which is equivalent to a per-step test.
    ``interpolation="tricubic"`` trades speed for a continuous force.
    """
    order = order_of(interpolation)
    mass = species.mass
    if omega_max is None:
        omega_max = omega_max_estimate(pot, mass)
    if dt * omega_max >= 0.1:
        raise StabilityError(
            f"dt={dt:.3g} s violates dt < 1/(10 omega_max) with omega_max={omega_max:.4g} rad/s"
        )
    gen = rng_stream
    rate = loss.loss_rate
    loss_time = gen.exponential(1.0 / rate) if rate > 0 else np.inf
    rate_per_joule = 0.0
    if loss.recoil_heating_on and loss.heating_multiplier > 0:
        rate_per_joule = loss.heating_multiplier * scattering_coefficient(species, pot.wavelength) / pot.intensity_coefficient
    k = 2 * math.pi / pot.wavelength
    kick_dv = math.sqrt(2.0) * HBAR * k / mass
    if rate_per_joule > 0:
        u_scale = float(np.max(pot.values))
        expected = rate_per_joule * u_scale * dt * steps
        nbuf = int(expected + 10 * math.sqrt(expected + 1) + 64)
    else:
        nbuf = 1
    targets = np.cumsum(gen.exponential(1.0, nbuf))
    dirs = gen.standard_normal((nbuf, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    if snapshot_times is None:
        snap = np.zeros(0, dtype=np.int64)
    else:
        snap = np.rint(np.asarray(snapshot_times) / dt).astype(np.int64)
        if np.any(np.diff(snap) < 0):
            raise PhysicsError("snapshot times must be sorted")
    rec, snaps, fate, last, nk, fin = _verlet_kernel(
        pot.values, *pot.origin, *pot.pitches,
        np.asarray(atom.position, float), np.asarray(atom.velocity, float),
        1.0 / mass, float(dt), int(steps), int(record_every), float(loss_time), float(rate_per_joule),
        targets, dirs, kick_dv, snap, order,
    )
    u, _ = pot.sample(rec[:, 1:4], interpolation=interpolation) if len(rec) else (np.zeros(0), None)
    fate_s = _FATES[int(fate)]
    if fate_s == "kick-buffer":
        raise PhysicsError("recoil kick buffer exhausted; heating rate far above estimate")
    final_u, inside = pot.sample(fin[:3], interpolation=interpolation)
    final = AtomState(fin[:3].copy(), fin[3:].copy(), fate_s == "alive",
                      float(0.5 * mass * fin[3:] @ fin[3:] + final_u[0]) if inside[0] else float("nan"))
    return TrajectoryRecord(rec[:, 0], rec[:, 1:4], rec[:, 4:7], u, fate_s, last * dt, int(nk), final,
                            interpolation, snaps)


# ---------------------------------------------------------------------------
# loading


@dataclass(frozen=True)
class LoadingParams:
    mot_density: float = 1e17  # atoms / m^3
    temperature: float = 20e-6
    blockade_p1: float = 0.526
    # divide blockade_p1 by P(N >= 1) so the unconditional P(1) equals blockade_p1
    normalize: bool = True

    def __post_init__(self):
        if not 0 <= self.blockade_p1 <= 1:
            raise PhysicsError("blockade_p1 must lie in [0, 1]")
        if self.mot_density < 0 or self.temperature <= 0:
            raise PhysicsError("density must be >= 0 and temperature > 0")


def expected_capture(params: LoadingParams, pot: PotentialGrid, report: TrapReport) -> float:
    """Mean number of MOT atoms inside the sub-barrier region with E below the barrier."""
    kT = KB * params.temperature
    U = pot.values[report.region]
    margin = np.clip((report.barrier_energy - U) / kT, 0, None)
    p_below = special.gammainc(1.5, margin)
    return float(params.mot_density * np.prod(pot.pitches) * np.sum(p_below))


@dataclass
class LoadingOutcome:
    occupancy: np.ndarray
    captured: np.ndarray
    expected_capture: float
    p_collapse: float

    @property
    def p1(self) -> float:
        return float(np.mean(self.occupancy == 1))


def simulate_loading(params: LoadingParams, trap: PotentialGrid, report: TrapReport,
                     n_trials: int, rng_seed: int, mass: float = 2.20694650e-25) -> LoadingOutcome:
    """Trap switch-on followed by collisional-blockade collapse, repeated ``n_trials`` times.

    Physical stage: MOT atoms uniform over the grid at the MOT density and
    temperature are captured when they sit in the sub-barrier region with
    total energy below the barrier (the drop phase discards the rest).
    Blockade stage: any non-zero capture collapses to exactly one atom with
    probability ``p_collapse`` and to zero otherwise.
    """
    region = RegionSpec.of_grid(trap)
    mean_n = params.mot_density * region.volume
    mu = expected_capture(params, trap, report)
    p_any = -math.expm1(-mu)
    p = params.blockade_p1
    if params.normalize and p_any > 0:
        p = min(1.0, p / p_any)
    occ = np.zeros(n_trials, dtype=np.int64)
    captured = np.zeros(n_trials, dtype=np.int64)
    for trial in range(n_trials):
        gen = rngmod.stream(rng_seed, rngmod.LOADING, trial)
        n = gen.poisson(mean_n)
        if n:
            pos, vel = thermal_arrays(n, params.temperature, region, gen, mass)
            u, inside = trap.sample(pos)
            idx = np.rint((pos - np.asarray(trap.origin)) / np.asarray(trap.pitches)).astype(int)
            idx = np.clip(idx, 0, np.asarray(trap.dims) - 1)
            in_region = report.region[idx[:, 0], idx[:, 1], idx[:, 2]]
            energy = 0.5 * mass * np.sum(vel**2, axis=1) + u
            captured[trial] = int(np.count_nonzero(inside & in_region & (energy < report.barrier_energy)))
        if captured[trial] >= 1:
            occ[trial] = int(gen.random() < p)
    return LoadingOutcome(occ, captured, mu, p)


# ---------------------------------------------------------------------------
# photon counting


@dataclass
class HistogramResult:
    counts: np.ndarray
    bins: np.ndarray
    frequency: np.ndarray
    threshold: float
    p1: float
    bimodal: bool
    mode_means: tuple[float, float]
    overlap: float
    distinguishable: bool


def _otsu(counts: np.ndarray) -> float:
    vals = np.unique(counts)
    best_t, best_var = vals[0], -1.0
    n = len(counts)
    for t in vals[:-1]:
        lo = counts <= t
        w0 = lo.mean()
        w1 = 1 - w0
        m0 = counts[lo].mean()
        m1 = counts[~lo].mean()
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best_var:
            best_t, best_var = t, var
    return float(best_t)


def classify_counts(counts, max_overlap: float = 1e-2) -> HistogramResult:
    """Two-level threshold classifier placed at the histogram valley between modes."""
    counts = np.asarray(counts, dtype=np.int64)
    edges = np.arange(counts.min(), counts.max() + 2)
    freq, _ = np.histogram(counts, bins=edges)
    bins = edges[:-1]
    if counts.min() == counts.max():
        m = float(counts[0])
        return HistogramResult(counts, bins, freq, m, 0.0, False, (m, m), 1.0, False)
    t = _otsu(counts)
    m0 = float(counts[counts <= t].mean())
    m1 = float(counts[counts > t].mean())
    bimodal = (m1 - m0) > 3.0 * (math.sqrt(max(m0, 1.0)) + math.sqrt(max(m1, 1.0)))
    if bimodal:
        lo, hi = int(math.ceil(m0)), int(math.floor(m1))
        window = (bins >= lo) & (bins <= hi)
        smooth = np.convolve(freq, np.ones(3) / 3, mode="same")
        sub = smooth[window]
        ties = np.flatnonzero(sub == sub.min())
        t = float(bins[window][ties[len(ties) // 2]])
    p1 = float(np.mean(counts > t)) if bimodal else 0.0
    overlap = float((1 - p1) * stats.poisson.sf(t, m0) + p1 * stats.poisson.cdf(t, m1)) if bimodal else 1.0
    return HistogramResult(counts, bins, freq, t, p1, bool(bimodal), (m0, m1), overlap,
                           bool(bimodal and overlap < max_overlap))


def simulate_count_histogram(n_cycles: int, occupancy, counter: CounterModel, rng_seed: int,
                             max_overlap: float = 1e-2) -> HistogramResult:
    """Poisson photon counts per cycle and the threshold classification of them.

    ``occupancy`` is either an array of 0/1 outcomes (one per cycle) or a
    single-atom probability to draw them from.
    """
    if n_cycles < 1:
        raise PhysicsError("need at least one cycle")
    if np.isscalar(occupancy):
        gen = rngmod.stream(rng_seed, rngmod.COUNTS, 0)
        occ = (gen.random(n_cycles) < float(occupancy)).astype(np.int64)
    else:
        occ = np.asarray(occupancy, dtype=np.int64)[:n_cycles]
        if len(occ) != n_cycles:
            raise PhysicsError("occupancy array shorter than n_cycles")
    gen = rngmod.stream(rng_seed, rngmod.COUNTS, 1)
    mean = (counter.background_count_rate + occ * counter.atom_count_rate) * counter.integration_time
    counts = gen.poisson(mean)
    return classify_counts(counts, max_overlap)


# ---------------------------------------------------------------------------
# retention


@dataclass
class RetentionResult:
    hold_times: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    n_atoms: int
    fit: ExpFit | None


def _binomial_stderr(k, n):
    # Agresti-Coull style shrinkage keeps the error finite at 0 and 1
    p = (k + 1.0) / (n + 2.0)
    return np.sqrt(p * (1 - p) / n)


def trapped_lifetimes(n_atoms: int, pot: PotentialGrid, report: TrapReport, loss: LossModel,
                      species: AtomSpecies, temperature: float, gen: np.random.Generator) -> np.ndarray:
    """Per-atom lifetimes: first of background loss or heating over the barrier.

    Heating uses the harmonic virial estimate <U> = E/2, so the time-averaged
    scattering rate is ``s E / (2 kappa)`` and each event adds 2 E_rec on
    average, giving exponential energy growth E(t) = E0 exp(g t) with
    g = s E_rec / kappa.
    """
    depth = report.depth
    kT = KB * temperature
    # thermal 3D-harmonic energies, truncated below the barrier
    cdf_cut = special.gammainc(3.0, depth / kT)
    e0 = kT * special.gammaincinv(3.0, gen.random(n_atoms) * cdf_cut)
    rate = loss.loss_rate
    t_loss = gen.exponential(1.0 / rate, n_atoms) if rate > 0 else np.full(n_atoms, np.inf)
    g = 0.0
    if loss.recoil_heating_on and loss.heating_multiplier > 0:
        k = 2 * math.pi / pot.wavelength
        e_rec = (HBAR * k) ** 2 / (2 * species.mass)
        s = scattering_coefficient(species, pot.wavelength)
        g = loss.heating_multiplier * s * e_rec / pot.intensity_coefficient
    if loss.intensity_noise_psd > 0:
        # parametric heating, dE/dt = pi^2 nu^2 S(2 nu) E, averaged over the three axes
        nu = np.nan_to_num(np.asarray(report.trap_frequencies, dtype=float)) / (2 * math.pi)
        g += float(np.mean(math.pi**2 * nu**2 * loss.intensity_noise_psd))
    if g > 0:
        t_heat = np.log(depth / np.maximum(e0, 1e-300)) / g
    else:
        t_heat = np.full(n_atoms, np.inf)
    return np.minimum(t_loss, t_heat)


def simulate_retention(n_atoms: int, hold_times, trap: PotentialGrid, report: TrapReport,
                       loss: LossModel, rng_seed: int, *, species: AtomSpecies,
                       temperature: float = 20e-6, fit: bool = True) -> RetentionResult:
    """Survival fraction after each hold time, with an independent atom sample per point.

    Raises :class:`FitError` on degenerate survival data when ``fit`` is set.
    """
    if n_atoms < 1:
        raise PhysicsError("n_atoms must be >= 1")
    hold = np.asarray(hold_times, dtype=float)
    surv = np.empty(len(hold))
    err = np.empty(len(hold))
    for i, t in enumerate(hold):
        gen = rngmod.stream(rng_seed, rngmod.RETENTION, i)
        life = trapped_lifetimes(n_atoms, trap, report, loss, species, temperature, gen)
        k = int(np.count_nonzero(life > t))
        surv[i] = k / n_atoms
        err[i] = _binomial_stderr(k, n_atoms)
    result = RetentionResult(hold, surv, err, n_atoms, None)
    if fit:
        result.fit = fit_exponential(hold, surv, err)
    return result
