"""Dipole potential, escape barrier and trap geometry for ground-state Cs.

The scalar polarizability is a sum over lines including counter-rotating
terms,

    alpha(w) = sum_k  w_k * 6 pi eps0 c^3 Gamma_k / (w_k^2 (w_k^2 - w^2)),

and the potential is U = -alpha I / (2 eps0 c).  At 532 nm the ground-state
alpha is negative, so U >= 0 and atoms sit at intensity minima.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from scipy import constants as csts
from scipy import ndimage

from . import interp
from .errors import ConfigError, ConvergenceError, GridError, PhysicsError, ResonanceError
from .optics import BeamSpec, IntensityVolume, VolumeSpec, crossed_bbt_intensity, save_ivol, load_ivol

KB = csts.k
HBAR = csts.hbar
EPS0 = csts.epsilon_0
C = csts.c

SPECIES_SCHEMA_VERSION = 1
RESONANCE_GUARD_HZ = 10e9
BISECTION_DEPTH = 20
_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class AtomLine:
    name: str
    transition_wavelength: float
    linewidth_Gamma: float
    degeneracy_weight: float

    @property
    def omega(self) -> float:
        return 2 * math.pi * C / self.transition_wavelength


@dataclass(frozen=True)
class AtomSpecies:
    mass: float
    lines: tuple[AtomLine, ...]
    hyperfine_splitting: float
    quadratic_zeeman_coeff: float
    excited_fraction_bright: float = 0.015
    d2_detuning: float = 210e12
    name: str = "custom"
    # bypasses the line model when set (SI units, C m^2 / V)
    polarizability_override: float | None = None

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError("species mass must be positive")
        if any(not l.linewidth_Gamma > 0 for l in self.lines):
            raise ConfigError("every line needs a positive linewidth")
        if not self.hyperfine_splitting > 0:
            raise ConfigError("hyperfine splitting must be positive")

    @property
    def eta_default(self) -> float:
        """Differential-to-total light shift ratio omega_hf / Delta_D2."""
        return self.hyperfine_splitting / self.d2_detuning


def load_species(source: str | Path = "cesium") -> AtomSpecies:
    """Read a species data file; bare names refer to the bundled files."""
    if isinstance(source, str) and not source.endswith((".yaml", ".yml")):
        text = resources.files("bbtrap.data").joinpath(f"{source}.yaml").read_text()
    else:
        text = Path(source).read_text()
    raw = yaml.safe_load(text)
    if raw.get("schema_version") != SPECIES_SCHEMA_VERSION:
        raise ConfigError(f"unsupported species schema version {raw.get('schema_version')!r}")
    lines = tuple(
        AtomLine(l["name"], float(l["transition_wavelength_m"]),
                 float(l["linewidth_Gamma_rad_s"]), float(l["degeneracy_weight"]))
        for l in raw["lines"]
    )
    return AtomSpecies(
        mass=float(raw["mass_kg"]),
        lines=lines,
        hyperfine_splitting=float(raw["hyperfine_splitting_Hz"]),
        quadratic_zeeman_coeff=float(raw["quadratic_zeeman_coeff_Hz_T2"]),
        excited_fraction_bright=float(raw.get("excited_fraction_bright", 0.0)),
        d2_detuning=float(raw.get("d2_detuning_Hz", 210e12)),
        name=raw.get("name", "custom"),
        polarizability_override=raw.get("polarizability_override_SI"),
    )


def _guard(species: AtomSpecies, wavelength: float):
    nu = C / wavelength
    for line in species.lines:
        if abs(nu - C / line.transition_wavelength) < RESONANCE_GUARD_HZ:
            raise ResonanceError(
                f"trap wavelength {wavelength * 1e9:.4f} nm within 10 GHz of {line.name}"
            )


def polarizability(species: AtomSpecies, wavelength: float) -> float:
    """Ground-state scalar polarizability in SI units (C m^2 / V)."""
    if species.polarizability_override is not None:
        return float(species.polarizability_override)
    _guard(species, wavelength)
    w = 2 * math.pi * C / wavelength
    total = 0.0
    for line in species.lines:
        wk = line.omega
        total += line.degeneracy_weight * 6 * math.pi * EPS0 * C**3 * line.linewidth_Gamma / (
            wk**2 * (wk**2 - w**2)
        )
    return total


def potential_coefficient(species: AtomSpecies, wavelength: float) -> float:
    """U / I in J per (W/m^2)."""
    return -polarizability(species, wavelength) / (2 * EPS0 * C)


def scattering_coefficient(species: AtomSpecies, wavelength: float) -> float:
    """Photon scattering rate per unit intensity, 1/s per (W/m^2)."""
    _guard(species, wavelength)
    w = 2 * math.pi * C / wavelength
    total = 0.0
    for line in species.lines:
        wk = line.omega
        g = line.linewidth_Gamma
        total += line.degeneracy_weight * (3 * math.pi * C**2 / (2 * HBAR * wk**3)) * (w / wk) ** 3 * (
            g / (wk - w) + g / (wk + w)
        ) ** 2
    return total


def scattering_rate(intensity, species: AtomSpecies, wavelength: float = 532e-9):
    """Total photon scattering rate (events/s) at ``intensity`` (W/m^2)."""
    intensity = np.asarray(intensity, dtype=float)
    if np.any(intensity < 0):
        raise PhysicsError("intensity must be non-negative")
    out = scattering_coefficient(species, wavelength) * intensity
    return float(out) if out.ndim == 0 else out


@dataclass
class PotentialGrid:
    """Trap potential (J) on the grid of its source intensity volume."""

    values: np.ndarray
    pitches: tuple[float, float, float]
    origin: tuple[float, float, float]
    wavelength: float = 532e-9
    # J per W/m^2; recovers the intensity as values / intensity_coefficient
    intensity_coefficient: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.pitches = tuple(float(p) for p in self.pitches)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self):
        return self.values.shape

    @property
    def values_uK(self) -> np.ndarray:
        return self.values / KB * 1e6

    def axes(self):
        return tuple(o + np.arange(n) * d for o, n, d in zip(self.origin, self.dims, self.pitches))

    def intensity(self) -> np.ndarray:
        return self.values / self.intensity_coefficient

    def position(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.pitches)

    def nearest_index(self, position) -> tuple[int, int, int]:
        f = (np.asarray(position, dtype=float) - np.asarray(self.origin)) / np.asarray(self.pitches)
        idx = np.rint(f).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            raise GridError(f"position {tuple(position)} outside the potential grid")
        return tuple(int(i) for i in idx)

    def sample(self, points, with_grad=False, interpolation="trilinear"):
        return interp.sample(self.values, self.origin, self.pitches, points, with_grad, interpolation)

    def bounds(self):
        ax = self.axes()
        return np.array([[a[0], a[-1]] for a in ax])

    def scaled(self, factor: float) -> "PotentialGrid":
        return replace(self, values=self.values * factor,
                       intensity_coefficient=self.intensity_coefficient)

    def content_hash(self) -> str:
        """Git-style blob hash of the raw float64 payload."""
        import hashlib

        payload = np.ascontiguousarray(self.values, dtype="<f8").tobytes(order="F")
        h = hashlib.sha1(b"blob %d\0" % len(payload))
        h.update(payload)
        return h.hexdigest()

    def save(self, path):
        meta = dict(self.metadata, wavelength_m=self.wavelength,
                    intensity_coefficient_J_per_W_m2=self.intensity_coefficient)
        save_ivol(path, self.values, self.pitches, self.origin,
                  quantity="potential", units="J", metadata=meta)

    @classmethod
    def load(cls, path) -> "PotentialGrid":
        values, header = load_ivol(path)
        if header["quantity"] != "potential":
            raise GridError(f"{path} holds {header['quantity']!r}, not potential")
        meta = dict(header.get("metadata", {}))
        wl = meta.pop("wavelength_m", 532e-9)
        coeff = meta.pop("intensity_coefficient_J_per_W_m2", 1.0)
        return cls(values, header["pitches_m"], header["origin_m"], wl, coeff, meta)


def potential_from_intensity(vol: IntensityVolume, species: AtomSpecies,
                             wavelength: float | None = None) -> PotentialGrid:
    if wavelength is None:
        beams = vol.metadata.get("beams") or [{}]
        wavelength = beams[0].get("wavelength_m", 532e-9)
    coeff = potential_coefficient(species, wavelength)
    values = coeff * vol.values
    return PotentialGrid(values, vol.pitches, vol.origin, wavelength, coeff,
                         {"source": vol.metadata, "species": species.name})


# ---------------------------------------------------------------------------
# minimum search


def find_minimum(pot: PotentialGrid, seed, max_iter: int = 2000):
    """Local minimum of the trilinear interpolant reachable by descent from ``seed``.

    A discrete steepest descent over the 26 neighbours brings the search to a
    grid-local minimum; a backtracking gradient descent in index units then
    refines it on the interpolant.  Returns ``(position, energy)``.
    """
    U = pot.values
    idx = np.array(pot.nearest_index(seed))
    shape = np.array(U.shape)
    offsets = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
                        if (a, b, c) != (0, 0, 0)])
    for _ in range(int(shape.sum()) * 4):
        nb_idx = idx + offsets
        ok = np.all((nb_idx >= 0) & (nb_idx < shape), axis=1)
        cand = nb_idx[ok]
        vals = U[cand[:, 0], cand[:, 1], cand[:, 2]]
        j = int(np.argmin(vals))
        if vals[j] >= U[tuple(idx)]:
            break
        idx = cand[j]
    else:
        raise ConvergenceError("discrete descent did not settle")

    pitches = np.asarray(pot.pitches)
    origin = np.asarray(pot.origin)
    f = idx.astype(float)
    hi = shape - 1.0

    def ev(fi):
        u, g, inside = pot.sample(origin + fi * pitches, with_grad=True)
        return u[0], g[0] * pitches

    u, g = ev(f)
    for _ in range(max_iter):
        gnorm = np.linalg.norm(g)
        if gnorm == 0:
            break
        step = 0.5
        while step > 1e-9:
            trial = np.clip(f - step * g / gnorm, 0.0, hi)
            ut, gt = ev(trial)
            if ut < u:
                break
            step *= 0.5
        else:
            break
        moved = np.linalg.norm(trial - f)
        f, u, g = trial, ut, gt
        if moved < 1e-9:
            break
    else:
        raise ConvergenceError(f"minimum search did not converge in {max_iter} iterations")
    return origin + f * pitches, float(u)


# ---------------------------------------------------------------------------
# escape barrier


@dataclass
class BarrierResult:
    barrier_energy: float
    saddle_position: np.ndarray | None
    saddle_index: tuple[int, int, int] | None
    enclosed: bool
    # connected sub-barrier region containing the centre
    region: np.ndarray
    center_index: tuple[int, int, int]
    bisection_interval: tuple[float, float]


class _Flood:
    def __init__(self, U, center):
        self.U = U
        self.center = center

    def region(self, threshold):
        mask = self.U < threshold
        if not mask[self.center]:
            return np.zeros_like(mask)
        labels, _ = ndimage.label(mask, structure=_SIX_CONNECTED)
        return labels == labels[self.center]

    def escapes(self, threshold) -> bool:
        mask = self.U < threshold
        if not mask[self.center]:
            return False
        labels, _ = ndimage.label(mask, structure=_SIX_CONNECTED)
        lab = labels[self.center]
        faces = (labels[0], labels[-1], labels[:, 0], labels[:, -1], labels[:, :, 0], labels[:, :, -1])
        return any(np.any(face == lab) for face in faces)


def escape_barrier(pot: PotentialGrid | np.ndarray, center, *, depth: int = BISECTION_DEPTH) -> BarrierResult:
    """Lowest potential an atom starting at ``center`` must cross to reach the grid boundary.

    Bisects a threshold t: the 6-connected component of {U < t} holding the
    centre either touches the boundary or not.  The final bracket is then
    resolved exactly over the few cells whose potential falls inside it, so
    the result equals the minimax path value on the grid.  ``center`` is a
    position (m) for a :class:`PotentialGrid` or an index for a bare array.
    """
    if isinstance(pot, PotentialGrid):
        U = pot.values
        ci = pot.nearest_index(center)
    else:
        U = np.asarray(pot, dtype=float)
        ci = tuple(int(i) for i in center)
    flood = _Flood(U, ci)
    u0 = U[ci]
    just_above = np.nextafter(u0, np.inf)

    def position(index):
        if isinstance(pot, PotentialGrid):
            return pot.position(index)
        return np.asarray(index, dtype=float)

    if flood.escapes(just_above):
        return BarrierResult(float(u0), position(ci), ci, False, flood.region(just_above), ci, (u0, u0))

    lo, hi = float(u0), float(np.nextafter(U.max(), np.inf))
    for _ in range(depth):
        mid = 0.5 * (lo + hi)
        if flood.escapes(mid):
            hi = mid
        else:
            lo = mid

    # resolve the bracket [lo, hi) exactly: the critical value is one of the cell values inside it
    region_hi = flood.region(hi)
    cand = np.flatnonzero(region_hi & (U >= lo))
    cand = cand[np.lexsort((cand, U.ravel()[cand]))]
    saddle = None
    for flat in cand:
        u = U.flat[flat]
        if flood.escapes(np.nextafter(u, np.inf)):
            saddle = np.unravel_index(flat, U.shape)
            break
    if saddle is None:
        raise ConvergenceError("barrier bisection bracket contained no critical cell")
    barrier = float(U[saddle])
    saddle = tuple(int(s) for s in saddle)
    return BarrierResult(barrier, position(saddle), saddle, True, flood.region(barrier), ci, (lo, hi))


# ---------------------------------------------------------------------------
# frequencies and geometry


FIT_FRACTIONS = (0.1, 0.2, 0.35, 0.5)


@dataclass
class FrequencyResult:
    omegas: np.ndarray
    axes: np.ndarray
    residual: float
    anharmonic: bool
    n_samples: int
    level_fraction: float = 0.1


def trap_frequencies(pot: PotentialGrid, center, species: AtomSpecies,
                     barrier_energy: float | None = None) -> FrequencyResult:
    """Harmonic frequencies from a least-squares quadric fit around ``center``.

    Fits a full second-order polynomial to the grid nodes connected to the
    centre with U - U_min < (barrier - U_min)/10 (widened on coarse grids); the eigen-decomposition of
    its Hessian gives the principal axes and omega_i = sqrt(k_i / m).
    """
    ci = pot.nearest_index(center)
    U = pot.values
    if barrier_energy is None:
        barrier_energy = escape_barrier(pot, center).barrier_energy
    umin = U[ci]
    if not barrier_energy > umin:
        raise PhysicsError("trap is not enclosed; no harmonic region")
    # coarse grids widen the fit region until every axis holds 5 samples
    for fraction in FIT_FRACTIONS:
        level = umin + (barrier_energy - umin) * fraction
        labels, _ = ndimage.label(U < level, structure=_SIX_CONNECTED)
        region = labels == labels[ci]
        spans = []
        for ax in range(3):
            line = [slice(None) if a == ax else ci[a] for a in range(3)]
            spans.append(int(np.count_nonzero(region[tuple(line)])))
        if min(spans) >= 5:
            break
    else:
        ax = int(np.argmin(spans))
        raise GridError(
            f"harmonic region spans only {spans[ax]} samples along axis {'xyz'[ax]} even at "
            f"{FIT_FRACTIONS[-1]:g} of the depth; need 5"
        )
    idx = np.argwhere(region)
    # fit in cell units; metres would make the normal equations singular
    x, y, z = (idx - np.asarray(ci)).T.astype(float)
    A = np.column_stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z])
    b = U[region] - umin
    scale = np.sqrt(np.mean(b**2))
    if scale == 0:
        raise PhysicsError("flat potential around the centre")
    coef, *_ = np.linalg.lstsq(A, b / scale, rcond=None)
    resid = A @ coef - b / scale
    residual = float(np.sqrt(np.mean(resid**2)))
    coef = coef * scale
    hess_cells = np.array([
        [2 * coef[4], coef[7], coef[8]],
        [coef[7], 2 * coef[5], coef[9]],
        [coef[8], coef[9], 2 * coef[6]],
    ])
    inv_p = 1.0 / np.asarray(pot.pitches)
    hess = hess_cells * np.outer(inv_p, inv_p)
    k, vecs = np.linalg.eigh(hess)
    # order principal axes by their dominant lab component
    order = np.argsort([int(np.argmax(np.abs(vecs[:, i]))) for i in range(3)], kind="stable")
    k, vecs = k[order], vecs[:, order]
    anharmonic = residual > 0.2 or np.any(k <= 0)
    omegas = np.sqrt(np.clip(k, 0, None) / species.mass)
    if anharmonic:
        omegas = np.full(3, np.nan)
    return FrequencyResult(omegas, vecs, residual, bool(anharmonic), len(b), fraction)


def region_extents(pot: PotentialGrid, region: np.ndarray, level: float) -> np.ndarray:
    """Sub-voxel extent of ``region`` along x, y, z at the contour U = level.

    On each axis the outermost region cells are pushed outwards by the
    linearly interpolated distance to where U crosses ``level``.
    """
    U = pot.values
    out = np.zeros(3)
    idx = np.argwhere(region)
    for ax in range(3):
        d = pot.pitches[ax]
        edges = []
        for side in (-1, 1):
            coord = idx[:, ax]
            extreme = coord.min() if side < 0 else coord.max()
            cells = idx[coord == extreme]
            best = None
            for c in cells:
                inner = U[tuple(c)]
                nb_ = c.copy()
                nb_[ax] += side
                if 0 <= nb_[ax] < U.shape[ax]:
                    outer = U[tuple(nb_)]
                    frac = (level - inner) / (outer - inner) if outer > inner else 0.0
                    frac = min(max(frac, 0.0), 1.0)
                else:
                    frac = 0.0
                pos = pot.origin[ax] + (extreme + side * frac) * d
                best = pos if best is None else (min(best, pos) if side < 0 else max(best, pos))
            edges.append(best)
        out[ax] = edges[1] - edges[0]
    return out


@dataclass
class TrapReport:
    minimum_position: np.ndarray
    minimum_energy: float
    barrier_energy: float
    saddle_position: np.ndarray
    trap_frequencies: np.ndarray
    size_transverse: float
    size_axial: float
    extents: np.ndarray
    enclosed: bool = True
    anharmonic: bool = False
    principal_axes: np.ndarray | None = None
    region: np.ndarray | None = field(default=None, repr=False)
    size_contour: str = "barrier"

    @property
    def depth(self) -> float:
        return self.barrier_energy - self.minimum_energy

    def to_json(self) -> dict:
        def uk(e):
            return e / KB * 1e6

        return {
            "minimum_position_m": [float(v) for v in self.minimum_position],
            "minimum_energy_J": float(self.minimum_energy),
            "minimum_energy_uK": float(uk(self.minimum_energy)),
            "barrier_energy_J": float(self.barrier_energy),
            "barrier_energy_uK": float(uk(self.barrier_energy)),
            "depth_uK": float(uk(self.depth)),
            "saddle_position_m": [float(v) for v in self.saddle_position],
            "trap_frequencies_rad_s": [None if not np.isfinite(w) else float(w) for w in self.trap_frequencies],
            "trap_frequencies_Hz": [None if not np.isfinite(w) else float(w / (2 * math.pi)) for w in self.trap_frequencies],
            "size_transverse_m": float(self.size_transverse),
            "size_axial_m": float(self.size_axial),
            "extents_m": [float(v) for v in self.extents],
            "size_contour": self.size_contour,
            "enclosed": bool(self.enclosed),
            "anharmonic": bool(self.anharmonic),
        }


def analyze_trap(pot: PotentialGrid, species: AtomSpecies, seed=(0.0, 0.0, 0.0)) -> TrapReport:
    """Minimum, escape barrier, frequencies and size of the trap nearest ``seed``."""
    pos, energy = find_minimum(pot, seed)
    barrier = escape_barrier(pot, pos)
    if not barrier.enclosed:
        return TrapReport(pos, energy, barrier.barrier_energy, barrier.saddle_position,
                          np.zeros(3), 0.0, 0.0, np.zeros(3), enclosed=False, region=barrier.region)
    freq = trap_frequencies(pot, pos, species, barrier.barrier_energy)
    ext = region_extents(pot, barrier.region, barrier.barrier_energy)
    return TrapReport(
        minimum_position=pos,
        minimum_energy=energy,
        barrier_energy=barrier.barrier_energy,
        saddle_position=barrier.saddle_position,
        trap_frequencies=freq.omegas,
        size_transverse=0.5 * (ext[0] + ext[1]),
        size_axial=float(ext[2]),
        extents=ext,
        anharmonic=freq.anharmonic,
        principal_axes=freq.axes,
        region=barrier.region,
    )


def build_trap(beam_a: BeamSpec, beam_b: BeamSpec, volume: VolumeSpec, species: AtomSpecies,
               *, model: str = "lg", threads: int = 1):
    """Intensity volume -> potential -> report in one call."""
    vol = crossed_bbt_intensity(beam_a, beam_b, volume, model=model, threads=threads)
    pot = potential_from_intensity(vol, species, beam_a.wavelength)
    return vol, pot, analyze_trap(pot, species)


@dataclass
class CalibrationResult:
    waist: float
    size_transverse: float
    converged: bool
    history: list = field(default_factory=list)


def calibrate_waist(beam_a: BeamSpec, beam_b: BeamSpec, volume: VolumeSpec, species: AtomSpecies,
                    target: float = 3.3e-6, waist_range=(1.5e-6, 3.5e-6), rel_tol: float = 0.05,
                    max_iter: int = 12, threads: int = 1) -> CalibrationResult:
    """Bisect the common waist until the sub-barrier transverse size hits ``target``.

    Both beams share the waist; angle, power and everything else stay fixed.
    When the target lies outside what the range can produce the closest end
    point is returned with ``converged=False``.
    """
    history = []

    def size(w):
        a, b = replace(beam_a, waist_w0=w), replace(beam_b, waist_w0=w)
        _, _, rep = build_trap(a, b, volume, species, threads=threads)
        s = rep.size_transverse if rep.enclosed else 0.0
        history.append({"waist_m": w, "size_transverse_m": s, "size_axial_m": rep.size_axial,
                        "barrier_uK": rep.barrier_energy / KB * 1e6})
        return s

    lo, hi = waist_range
    s_lo, s_hi = size(lo), size(hi)
    for w, s in ((lo, s_lo), (hi, s_hi)):
        if abs(s - target) <= rel_tol * target:
            return CalibrationResult(w, s, True, history)
    if not (s_lo < target < s_hi):
        w, s = (lo, s_lo) if abs(s_lo - target) < abs(s_hi - target) else (hi, s_hi)
        return CalibrationResult(w, s, False, history)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        s = size(mid)
        if abs(s - target) <= rel_tol * target:
            return CalibrationResult(mid, s, True, history)
        if s < target:
            lo = mid
        else:
            hi = mid
    return CalibrationResult(mid, s, False, history)
