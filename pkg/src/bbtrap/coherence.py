"""Clock-state qubit: Rabi, Ramsey and echo sequences under motional and magnetic dephasing.

Basis ordering is (|0>, |1>) = (|f=3,m=0>, |f=4,m=0>).  A segment with Rabi
frequency Omega, detuning Delta and drive phase phi evolves under

    H / hbar = 1/2 [[-Delta, Omega e^{-i phi}], [Omega e^{i phi}, Delta]],

whose propagator is a rotation by the generalized Rabi angle
sqrt(Omega^2 + Delta^2) t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import rng as rngmod
from .dynamics import LossModel, AtomState, integrate_trajectory, sample_trapped
from .errors import FitError, PhysicsError
from .fitting import ExpFit, fit_exponential
from .trap import HBAR, AtomSpecies, PotentialGrid, TrapReport

MAX_RABI = 2 * math.pi * 1e6
PHASE_STEPS = 16


@dataclass
class QubitState:
    c0: complex
    c1: complex

    def __post_init__(self):
        norm = abs(self.c0) ** 2 + abs(self.c1) ** 2
        if abs(norm - 1.0) > 1e-12:
            raise PhysicsError(f"qubit state not normalized (norm {norm!r})")

    @classmethod
    def one(cls) -> "QubitState":
        return cls(0j, 1 + 0j)

    @classmethod
    def zero(cls) -> "QubitState":
        return cls(1 + 0j, 0j)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.c0, self.c1], dtype=complex)

    @property
    def p0(self) -> float:
        return abs(self.c0) ** 2

    @property
    def p1(self) -> float:
        return abs(self.c1) ** 2


@dataclass(frozen=True)
class Segment:
    type: str
    duration: float
    rabi_frequency: float = 0.0
    detuning: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.type not in ("pulse", "delay"):
            raise PhysicsError(f"segment type must be 'pulse' or 'delay', got {self.type!r}")
        if self.duration < 0:
            raise PhysicsError("segment duration must be >= 0")
        if self.type == "delay" and self.rabi_frequency != 0:
            raise PhysicsError("delay segments carry no drive")


def pi_pulse(rabi_frequency: float, fraction: float = 1.0, phase: float = 0.0) -> Segment:
    """Resonant pulse of area ``fraction * pi``."""
    return Segment("pulse", fraction * math.pi / rabi_frequency, rabi_frequency, 0.0, phase)


def rotation(omega, delta, phase, duration):
    """Batched two-level propagators, shape ``broadcast(...) + (2, 2)``."""
    omega, delta, phase, duration = np.broadcast_arrays(
        np.asarray(omega, float), np.asarray(delta, float), np.asarray(phase, float), np.asarray(duration, float)
    )
    w = np.hypot(omega, delta)
    half = 0.5 * w * duration
    c = np.cos(half)
    # sin(half)/w -> duration/2 as w -> 0
    s_over_w = np.where(w > 0, np.sin(half) / np.where(w > 0, w, 1.0), 0.5 * duration)
    nx, ny, nz = omega * np.cos(phase), omega * np.sin(phase), -delta
    U = np.empty(omega.shape + (2, 2), dtype=complex)
    U[..., 0, 0] = c - 1j * s_over_w * nz
    U[..., 1, 1] = c + 1j * s_over_w * nz
    U[..., 0, 1] = -1j * s_over_w * (nx - 1j * ny)
    U[..., 1, 0] = -1j * s_over_w * (nx + 1j * ny)
    return U


def evolve_pulse(state: QubitState, segment: Segment, extra_detuning: float = 0.0) -> QubitState:
    """Exact evolution through one constant segment."""
    U = rotation(segment.rabi_frequency, segment.detuning + extra_detuning, segment.phase, segment.duration)
    v = U @ state.vector
    return QubitState(complex(v[0]), complex(v[1]))


def run_sequence(state: QubitState, sequence, extra_detuning: float = 0.0) -> QubitState:
    """Apply segments in order; ``extra_detuning`` only acts during delays."""
    for seg in sequence:
        state = evolve_pulse(state, seg, extra_detuning if seg.type == "delay" else 0.0)
    return state


def validate_sequence(sequence, max_rabi: float = MAX_RABI):
    for seg in sequence:
        if seg.rabi_frequency > max_rabi * (1 + 1e-12):
            raise PhysicsError(
                f"Rabi frequency {seg.rabi_frequency / (2 * math.pi):.4g} Hz exceeds the 1 MHz limit"
            )
    return list(sequence)


@dataclass(frozen=True)
class DephasingModel:
    eta_differential: float = 9.192631770e9 / 210e12
    bias_field: float = 1.5e-4
    field_noise_rms: float = 1e-6
    noise_model: str = "quasi-static-gaussian"
    correlation_time: float = 1e-3
    # visual estimate of the zero-delay fringe contrast
    raman_contrast_c0: float = 0.9
    rabi_frequency: float = 2 * math.pi * 1e6

    def __post_init__(self):
        if not 0 <= self.eta_differential < 1:
            raise PhysicsError("eta_differential must lie in [0, 1)")
        if self.bias_field < 0 or self.field_noise_rms < 0:
            raise PhysicsError("fields must be non-negative")
        if not 0 < self.raman_contrast_c0 <= 1:
            raise PhysicsError("raman_contrast_c0 must lie in (0, 1]")
        if self.noise_model not in ("quasi-static-gaussian", "ou-process"):
            raise PhysicsError(f"unknown noise model {self.noise_model!r}")
        if self.correlation_time <= 0:
            raise PhysicsError("correlation_time must be positive")
        if not 0 < self.rabi_frequency <= MAX_RABI * (1 + 1e-12):
            raise PhysicsError("rabi_frequency must lie in (0, 2 pi x 1 MHz]")


def zeeman_detuning(bias, field_sample, species: AtomSpecies):
    """Quadratic Zeeman shift of the clock transition relative to the bare bias (rad/s)."""
    bias = np.asarray(bias, dtype=float)
    total = bias + np.asarray(field_sample, dtype=float)
    out = 2 * math.pi * species.quadratic_zeeman_coeff * (total**2 - bias**2)
    return float(out) if out.ndim == 0 else out


def motional_phase(record, pot: PotentialGrid, model: DephasingModel) -> float:
    """Differential light-shift phase eta/hbar * integral U(r(t)) dt (trapezoid rule)."""
    u, inside = pot.sample(record.positions, interpolation=record.interpolation)
    if not np.all(inside):
        raise PhysicsError("trajectory leaves the potential grid")
    return float(model.eta_differential / HBAR * np.trapezoid(u, record.times))


# ---------------------------------------------------------------------------
# ensembles


def default_dt(report: TrapReport, species: AtomSpecies | None = None) -> float:
    w = np.nanmax(report.trap_frequencies) if np.any(np.isfinite(report.trap_frequencies)) else np.nan
    if not np.isfinite(w) or w <= 0:
        raise PhysicsError("trap frequencies unavailable; pass dt explicitly")
    return 1.0 / (50.0 * w)


@dataclass
class MotionalTable:
    """Per-atom integral of U dt, sampled at ``times``."""

    times: np.ndarray
    integrals: np.ndarray
    temperature: float
    dt: float

    def phases(self, eta: float) -> np.ndarray:
        return eta / HBAR * self.integrals

    def at(self, t) -> np.ndarray:
        j = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=0.5 * self.dt))
        if len(j) == 0:
            raise PhysicsError(f"time {t} not tabulated")
        return self.integrals[:, j[0]]


def motional_table(pot: PotentialGrid, report: TrapReport, species: AtomSpecies, temperature: float,
                   n_atoms: int, times, rng_seed: int, dt: float | None = None) -> MotionalTable:
    """Thermal trajectories (no loss, no heating) with U dt integrated up to each time.

    Uses the tricubic interpolant: trilinear forces jump at cell faces and
    drift the energy by several percent over a 100 ms delay.
    """
    times = np.unique(np.asarray(times, dtype=float))
    dt = dt or default_dt(report)
    steps = int(math.ceil(times.max() / dt)) if times.max() > 0 else 0
    pos, vel = sample_trapped(n_atoms, temperature, pot, report, rng_seed, species.mass)
    quiet = LossModel(background_rate_dark=0.0, recoil_heating_on=False)
    omega = float(np.nanmax(report.trap_frequencies))
    out = np.zeros((n_atoms, len(times)))
    for i in range(n_atoms):
        gen = rngmod.stream(rng_seed, rngmod.TRAJECTORY, i)
        rec = integrate_trajectory(
            AtomState(pos[i], vel[i]), pot, dt, steps, quiet, gen, species=species,
            record_every=max(steps, 1), omega_max=omega, snapshot_times=times, interpolation="tricubic",
        )
        if not rec.alive:
            raise PhysicsError(f"atom {i} left the trap during a dephasing run ({rec.fate})")
        out[i] = rec.potential_integrals
    return MotionalTable(times, out, temperature, dt)


def _ramsey_final(eps, phi_total, phase_l, rabi, echo_split=None):
    """P(|1>) after pi/2 - delay - [pi - delay] - pi/2(phase_l) from |1>, all batched.

    ``eps`` is the per-shot relative Rabi-frequency error on the pi/2 pulses.

    Shapes: eps (n,), phi_total (n,) or (n, 2) for echo, phase_l (m,).
    Returns (n, m).
    """
    n = len(eps)
    om = rabi * (1 + eps)
    t_half = (math.pi / 2) / rabi
    p1 = rotation(om, 0.0, 0.0, t_half)  # (n,2,2)
    if echo_split is None:
        d = _phase_gate(phi_total)
        mid = d @ p1
    else:
        d1 = _phase_gate(phi_total[:, 0])
        d2 = _phase_gate(phi_total[:, 1])
        # the refocusing pulse is taken as ideal; jitter only shapes the pi/2 pulses
        pi_ = rotation(rabi, 0.0, 0.0, 2 * t_half)
        mid = d2 @ pi_ @ d1 @ p1
    p2 = rotation(om[:, None], 0.0, phase_l[None, :], t_half)  # (n,m,2,2)
    full = p2 @ mid[:, None]
    # initial |1> -> column 1
    return np.abs(full[..., 1, 1]) ** 2


def _phase_gate(phi):
    phi = np.asarray(phi, dtype=float)
    U = np.zeros(phi.shape + (2, 2), dtype=complex)
    U[..., 0, 0] = np.exp(0.5j * phi)
    U[..., 1, 1] = np.exp(-0.5j * phi)
    return U


def _fringe(p):
    """Per-row cosine/sine fringe coefficients of samples at PHASE_STEPS equal phases."""
    m = p.shape[-1]
    ph = 2 * math.pi * np.arange(m) / m
    b = 2.0 / m * p @ np.cos(ph)
    c = 2.0 / m * p @ np.sin(ph)
    return b, c


def rabi_jitter_for_contrast(c0: float, rabi: float) -> float:
    """Relative rms Rabi-frequency jitter that leaves a zero-delay Ramsey contrast ``c0``."""
    if c0 >= 1.0:
        return 0.0
    x, w = np.polynomial.hermite_e.hermegauss(81)
    w = w / w.sum()
    phases = 2 * math.pi * np.arange(PHASE_STEPS) / PHASE_STEPS

    def contrast(sigma):
        p = _ramsey_final(sigma * x, np.zeros_like(x), phases, rabi)
        b, c = _fringe(p)
        return 2 * math.hypot(w @ b, w @ c)

    if contrast(3.0) > c0:
        raise PhysicsError(f"contrast {c0} unreachable through Rabi jitter")
    return optimize.brentq(lambda s: contrast(s) - c0, 0.0, 3.0, xtol=1e-14)


def _ou_integral(gen, n, times, model: DephasingModel, species: AtomSpecies, dt_noise=None):
    """Cumulative Zeeman phase for OU field noise, shape (n, len(times))."""
    tmax = float(np.max(times))
    dt_noise = dt_noise or min(model.correlation_time / 20.0, max(tmax, 1e-9) / 2000.0)
    steps = int(math.ceil(tmax / dt_noise)) if tmax > 0 else 1
    grid = np.arange(steps + 1) * dt_noise
    a = math.exp(-dt_noise / model.correlation_time)
    b = model.field_noise_rms * math.sqrt(1 - a * a)
    x = np.empty((n, steps + 1))
    x[:, 0] = model.field_noise_rms * gen.standard_normal(n)
    kicks = gen.standard_normal((n, steps))
    for j in range(steps):
        x[:, j + 1] = a * x[:, j] + b * kicks[:, j]
    dw = zeeman_detuning(model.bias_field, x, species)
    cum = np.concatenate([np.zeros((n, 1)), np.cumsum(0.5 * (dw[:, 1:] + dw[:, :-1]) * dt_noise, axis=1)], axis=1)
    return np.stack([np.interp(times, grid, row) for row in cum])


@dataclass
class ContrastResult:
    td: np.ndarray
    contrast: np.ndarray
    stderr: np.ndarray
    fit: ExpFit | None
    t_1e: float
    sequence: str
    n_atoms: int
    metadata: dict = field(default_factory=dict)

    @property
    def flat(self) -> bool:
        return bool(np.ptp(self.contrast) <= 1e-12)

    @property
    def t2(self) -> float:
        if self.fit is not None:
            return self.fit.tau
        return float("inf") if self.flat else float("nan")


def _one_over_e(td, contrast):
    ref = contrast[0]
    if ref <= 0:
        return float("nan")
    r = contrast / ref
    below = np.flatnonzero(r <= math.exp(-1))
    if len(below) == 0:
        return float("inf")
    j = below[0]
    if j == 0:
        return float(td[0])
    t0, t1, r0, r1 = td[j - 1], td[j], r[j - 1], r[j]
    return float(t0 + (r0 - math.exp(-1)) * (t1 - t0) / (r0 - r1))


def coherence_scan(td_values, n_atoms: int, pot: PotentialGrid | None, report: TrapReport | None,
                   species: AtomSpecies, dephasing: DephasingModel, temperature: float, rng_seed: int,
                   *, echo: bool = False, motional: MotionalTable | None = None, fit: bool = True,
                   dt_noise: float | None = None) -> ContrastResult:
    """Ramsey (or echo) fringe contrast versus delay, one independent shot per atom.

    Each shot carries its own thermal trajectory (motional phase), its own
    magnetic-field realization and its own Rabi-frequency jitter.  The
    final pi/2 phase is scanned over ``PHASE_STEPS`` values and the fringe
    amplitude of the shot-averaged signal is the contrast.
    """
    td = np.asarray(td_values, dtype=float)
    if n_atoms < 1:
        raise PhysicsError("n_atoms must be >= 1")
    rabi = dephasing.rabi_frequency
    sigma_j = rabi_jitter_for_contrast(dephasing.raman_contrast_c0, rabi)
    gen_j = rngmod.stream(rng_seed, rngmod.RABI_JITTER)
    eps = sigma_j * gen_j.standard_normal(n_atoms)

    needed = np.unique(np.concatenate([td, 0.5 * td])) if echo else np.unique(td)
    mot = np.zeros((n_atoms, len(needed)))
    if dephasing.eta_differential > 0:
        if motional is None:
            if pot is None or report is None:
                raise PhysicsError("motional dephasing needs a potential and trap report")
            motional = motional_table(pot, report, species, temperature, n_atoms, needed, rng_seed)
        mot = np.stack([motional.at(t)[:n_atoms] for t in needed], axis=1) * dephasing.eta_differential / HBAR

    gen_b = rngmod.stream(rng_seed, rngmod.FIELD_NOISE)
    if dephasing.field_noise_rms == 0:
        mag = np.zeros((n_atoms, len(needed)))
    elif dephasing.noise_model == "quasi-static-gaussian":
        db = dephasing.field_noise_rms * gen_b.standard_normal(n_atoms)
        mag = zeeman_detuning(dephasing.bias_field, db, species)[:, None] * needed[None, :]
    else:
        mag = _ou_integral(gen_b, n_atoms, needed, dephasing, species, dt_noise)
    cum = mot + mag

    def col(t):
        return cum[:, int(np.searchsorted(needed, t))]

    phases = 2 * math.pi * np.arange(PHASE_STEPS) / PHASE_STEPS
    contrast = np.empty(len(td))
    stderr = np.empty(len(td))
    for i, t in enumerate(td):
        if echo:
            first = col(0.5 * t)
            second = col(t) - first
            p = _ramsey_final(eps, np.stack([first, second], axis=1), phases, rabi, echo_split=True)
        else:
            p = _ramsey_final(eps, col(t), phases, rabi)
        b, c = _fringe(p)
        mb, mc = b.mean(), c.mean()
        amp = math.hypot(mb, mc)
        contrast[i] = 2 * amp
        if amp > 0:
            proj = (b * mb + c * mc) / amp
        else:
            proj = np.hypot(b, c)
        stderr[i] = 2 * proj.std(ddof=1) / math.sqrt(n_atoms) if n_atoms > 1 else 0.0
    result = ContrastResult(td, contrast, stderr, None, _one_over_e(td, contrast),
                            "echo" if echo else "ramsey", n_atoms,
                            {"rabi_jitter_rel": sigma_j, "temperature_K": temperature})
    if fit and not result.flat:
        sig = np.maximum(stderr, 1e-4)
        result.fit = fit_exponential(td, contrast, sig)
    return result


def ramsey_scan(td_values, n_atoms, pot, report, species, dephasing, temperature, rng_seed, **kw):
    return coherence_scan(td_values, n_atoms, pot, report, species, dephasing, temperature, rng_seed,
                          echo=False, **kw)


def echo_scan(td_values, n_atoms, pot, report, species, dephasing, temperature, rng_seed, **kw):
    return coherence_scan(td_values, n_atoms, pot, report, species, dephasing, temperature, rng_seed,
                          echo=True, **kw)


def rabi_scan(durations, n_atoms: int, dephasing: DephasingModel, rng_seed: int,
              detuning: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Shot-averaged P(|0>) after a single pulse of each duration, starting from |1>."""
    t = np.asarray(durations, dtype=float)
    rabi = dephasing.rabi_frequency
    sigma_j = rabi_jitter_for_contrast(dephasing.raman_contrast_c0, rabi)
    eps = sigma_j * rngmod.stream(rng_seed, rngmod.RABI_JITTER).standard_normal(n_atoms)
    U = rotation(rabi * (1 + eps)[:, None], detuning, 0.0, t[None, :])
    p0 = np.abs(U[..., 0, 1]) ** 2
    return t, p0.mean(axis=0)
