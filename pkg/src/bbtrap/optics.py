"""Vortex beam synthesis, angular-spectrum propagation and the crossed BBT intensity.

Field normalization
-------------------
Complex amplitudes are stored in units of sqrt(W/m^2), so the local intensity
is simply ``|a|**2`` and a sampled field carries power
``sum(|a|**2) * pitch**2``.  Every :class:`ScalarField` produced by a
synthesis routine is rescaled so that this discrete sum equals the beam power
exactly.  Nothing downstream ever sees an electric field in V/m; the trap
module consumes intensities in W/m^2 only.

Frames
------
Each beam lives in its own local frame (x', y, z') with z' along the beam
axis.  A beam with half angle theta is tilted about the lab y axis::

    x' = (x - x0) cos(theta) - (z - z0) sin(theta)
    z' = (x - x0) sin(theta) + (z - z0) cos(theta)

so beam +theta propagates towards +x and beam -theta towards -x; both pass
through their focus offset (x0, y0, z0), which is the lab origin by default.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GridError, PhysicsError

IVOL_FORMAT_VERSION = 1
MIN_SAMPLES_PER_WAIST = 8


class EvanescentWarning(UserWarning):
    """Significant power was found outside the propagating cone."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class BeamSpec:
    """One vortex beam of the crossed pair."""

    waist_w0: float
    power: float
    wavelength: float = 532e-9
    charge_l: int = 1
    half_angle_theta: float = 0.0
    polarization_tag: str = "H"
    focus_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.wavelength > 0:
            raise PhysicsError(f"wavelength must be positive, got {self.wavelength!r}")
        if not self.waist_w0 > 0:
            raise PhysicsError(f"waist_w0 must be positive, got {self.waist_w0!r}")
        if not self.power >= 0:
            raise PhysicsError(f"power must be non-negative, got {self.power!r}")
        if abs(self.half_angle_theta) >= 0.3:
            raise PhysicsError("|half_angle_theta| must stay below 0.3 rad for the paraxial model")
        if self.polarization_tag not in ("H", "V"):
            raise PhysicsError(f"polarization_tag must be 'H' or 'V', got {self.polarization_tag!r}")
        object.__setattr__(self, "charge_l", int(self.charge_l))
        object.__setattr__(self, "focus_offset", tuple(float(v) for v in self.focus_offset))

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength

    @property
    def rayleigh_range(self) -> float:
        return math.pi * self.waist_w0**2 / self.wavelength

    def waist_at(self, z):
        return self.waist_w0 * np.sqrt(1.0 + (np.asarray(z) / self.rayleigh_range) ** 2)


@dataclass(frozen=True)
class GridSpec:
    """Uniform transverse grid; sample i sits at ``(i - n//2) * pitch``."""

    nx: int = 256
    ny: int = 256
    pitch: float = 50e-9

    def __post_init__(self):
        if not (_is_pow2(self.nx) and _is_pow2(self.ny)):
            raise GridError(f"grid dimensions must be powers of two, got {self.nx}x{self.ny}")
        if not self.pitch > 0:
            raise GridError("pitch must be positive")

    def axes(self):
        x = (np.arange(self.nx) - self.nx // 2) * self.pitch
        y = (np.arange(self.ny) - self.ny // 2) * self.pitch
        return x, y

    def mesh(self):
        x, y = self.axes()
        return np.meshgrid(x, y, indexing="ij")


@dataclass(frozen=True)
class VolumeSpec:
    """Uniform 3D sampling volume; the lab origin is the node ``(nx//2, ny//2, nz//2)``."""

    nx: int = 256
    ny: int = 256
    nz: int = 128
    dx: float = 50e-9
    dy: float = 50e-9
    dz: float = 0.5e-6

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 2:
            raise GridError("volume needs at least two samples per axis")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise GridError("volume pitches must be positive")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def pitches(self):
        return (self.dx, self.dy, self.dz)

    @property
    def origin(self):
        return tuple(-(n // 2) * d for n, d in zip(self.shape, self.pitches))

    def axes(self):
        return tuple(o + np.arange(n) * d for o, n, d in zip(self.origin, self.shape, self.pitches))


@dataclass
class ScalarField:
    """Complex amplitude in sqrt(W/m^2) on one transverse plane."""

    amplitude: np.ndarray
    pitch: float
    z_plane: float = 0.0
    wavelength: float = 532e-9

    @property
    def grid_nx(self) -> int:
        return self.amplitude.shape[0]

    @property
    def grid_ny(self) -> int:
        return self.amplitude.shape[1]

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_nx, self.grid_ny, self.pitch)

    def intensity(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2

    def power(self) -> float:
        return float(np.sum(np.abs(self.amplitude) ** 2) * self.pitch**2)


@dataclass
class IntensityVolume:
    """Real intensity samples (W/m^2) indexed ``values[ix, iy, iz]``."""

    values: np.ndarray
    pitches: tuple[float, float, float]
    origin: tuple[float, float, float]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise GridError("IntensityVolume needs a 3D array")
        self.pitches = tuple(float(p) for p in self.pitches)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self):
        return self.values.shape

    def axes(self):
        return tuple(o + np.arange(n) * d for o, n, d in zip(self.origin, self.dims, self.pitches))

    def save(self, path):
        save_ivol(path, self.values, self.pitches, self.origin,
                  quantity="intensity", units="W/m^2", metadata=self.metadata)

    @classmethod
    def load(cls, path) -> "IntensityVolume":
        values, header = load_ivol(path)
        if header["quantity"] != "intensity":
            raise GridError(f"{path} holds {header['quantity']!r}, not intensity")
        return cls(values, header["pitches_m"], header["origin_m"], header.get("metadata", {}))


# ---------------------------------------------------------------------------
# field synthesis


def _check_sampling(spec: BeamSpec, pitch: float):
    if spec.waist_w0 / pitch < MIN_SAMPLES_PER_WAIST:
        raise GridError(
            f"grid too coarse: {spec.waist_w0 / pitch:.2f} samples across w0, "
            f"need at least {MIN_SAMPLES_PER_WAIST}"
        )


def _normalize(amplitude: np.ndarray, pitch: float, power: float) -> np.ndarray:
    if power == 0:
        return np.zeros_like(amplitude)
    current = np.sum(np.abs(amplitude) ** 2) * pitch**2
    if current == 0:
        raise GridError("beam falls entirely outside the grid window")
    return amplitude * math.sqrt(power / current)


def lg_intensity(spec: BeamSpec, xl, yl, zl):
    """Closed-form LG(p=0, l) intensity in the beam's local frame (W/m^2).

    Continuous normalization: integrates to ``spec.power`` over the plane.
    """
    l = abs(spec.charge_l)
    w2 = spec.waist_w0**2 * (1.0 + (zl / spec.rayleigh_range) ** 2)
    s = 2.0 * (xl * xl + yl * yl) / w2
    peak = 2.0 * spec.power / (math.pi * math.factorial(l) * w2)
    if l == 0:
        return peak * np.exp(-s)
    return peak * s**l * np.exp(-s)


def lg_amplitude(spec: BeamSpec, xl, yl, zl):
    """Closed-form LG(p=0, l) complex amplitude including the e^{ikz} carrier."""
    l = spec.charge_l
    al = abs(l)
    k = spec.wavenumber
    zr = spec.rayleigh_range
    w = spec.waist_w0 * np.sqrt(1.0 + (zl / zr) ** 2)
    r2 = xl * xl + yl * yl
    inv_r = zl / (zl * zl + zr * zr)
    gouy = (1 + al) * np.arctan2(zl, zr)
    norm = np.sqrt(2.0 * spec.power / (math.pi * math.factorial(al))) / w
    radial = (np.sqrt(2.0 * r2) / w) ** al * np.exp(-r2 / w**2)
    phase = k * zl + 0.5 * k * r2 * inv_r - gouy + l * np.arctan2(yl, xl)
    return norm * radial * np.exp(1j * phase)


def lg_field(spec: BeamSpec, grid: GridSpec, z: float) -> ScalarField:
    """Analytic LG(p=0, l) field of ``spec`` on ``grid``, a distance ``z`` from its waist."""
    _check_sampling(spec, grid.pitch)
    x, y = grid.mesh()
    amp = lg_amplitude(spec, x, y, float(z))
    return ScalarField(_normalize(amp, grid.pitch, spec.power), grid.pitch, float(z), spec.wavelength)


def gaussian_field(spec: BeamSpec, grid: GridSpec, z: float = 0.0) -> ScalarField:
    """TEM00 field with the waist and power of ``spec`` (charge ignored)."""
    _check_sampling(spec, grid.pitch)
    plain = BeamSpec(spec.waist_w0, spec.power, spec.wavelength, 0)
    x, y = grid.mesh()
    amp = lg_amplitude(plain, x, y, float(z))
    return ScalarField(_normalize(amp, grid.pitch, spec.power), grid.pitch, float(z), spec.wavelength)


def spp_apply(field: ScalarField, charge_l: int) -> ScalarField:
    """Imprint the spiral phase exp(i l atan2(y, x)) of an ideal phase plate."""
    if not np.all(np.isfinite(field.amplitude)):
        raise PhysicsError("input field contains non-finite samples")
    if charge_l == 0:
        return ScalarField(field.amplitude.copy(), field.pitch, field.z_plane, field.wavelength)
    x, y = field.grid.mesh()
    amp = field.amplitude * np.exp(1j * charge_l * np.arctan2(y, x))
    return ScalarField(amp, field.pitch, field.z_plane, field.wavelength)


def _transfer(field: ScalarField, dz: float):
    k = 2.0 * math.pi / field.wavelength
    fx = 2.0 * math.pi * np.fft.fftfreq(field.grid_nx, field.pitch)
    fy = 2.0 * math.pi * np.fft.fftfreq(field.grid_ny, field.pitch)
    kt2 = fx[:, None] ** 2 + fy[None, :] ** 2
    arg = k * k - kt2
    propagating = arg >= 0
    kz = np.sqrt(np.abs(arg))
    # evanescent waves decay for either sign of dz
    h = np.where(propagating, np.exp(1j * kz * dz), np.exp(-kz * abs(dz)))
    return h, propagating


def propagate(field: ScalarField, dz: float) -> ScalarField:
    """Exact scalar angular-spectrum propagation over ``dz`` (either sign)."""
    if dz == 0:
        return ScalarField(field.amplitude.copy(), field.pitch, field.z_plane, field.wavelength)
    spectrum = np.fft.fft2(field.amplitude)
    h, propagating = _transfer(field, dz)
    total = np.sum(np.abs(spectrum) ** 2)
    if total > 0:
        evanescent = np.sum(np.abs(spectrum[~propagating]) ** 2) / total
        if evanescent > 1e-3:
            warnings.warn(
                f"{evanescent:.2%} of the power lies in evanescent components",
                EvanescentWarning,
                stacklevel=2,
            )
    amp = np.fft.ifft2(spectrum * h)
    return ScalarField(amp, field.pitch, field.z_plane + dz, field.wavelength)


def spp_beam_stack(spec: BeamSpec, grid: GridSpec, z_planes) -> np.ndarray:
    """Intensity of an SPP-imprinted, lens-focused Gaussian on a stack of local z' planes.

    The phase plate sits in the collimated beam before the lens, so the
    plate's output (Gaussian times the spiral phase) is the angular spectrum
    at focus.  The Gaussian's width is chosen so that without the plate the
    focus would have waist ``w0``.  Each requested plane is reached from the
    focal plane with the angular-spectrum transfer function.
    """
    _check_sampling(spec, grid.pitch)
    kx = 2.0 * math.pi * np.fft.fftfreq(grid.nx, grid.pitch)
    ky = 2.0 * math.pi * np.fft.fftfreq(grid.ny, grid.pitch)
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    spectrum = np.exp(-(KX**2 + KY**2) * spec.waist_w0**2 / 4.0) * np.exp(1j * spec.charge_l * np.arctan2(KY, KX))
    if spec.charge_l != 0:
        # the plate's singular point carries no power
        spectrum[0, 0] = 0.0
    probe = ScalarField(np.zeros((grid.nx, grid.ny), dtype=complex), grid.pitch, 0.0, spec.wavelength)
    focus = np.fft.ifft2(spectrum)
    scale = spec.power / (np.sum(np.abs(focus) ** 2) * grid.pitch**2)
    out = np.empty((grid.nx, grid.ny, len(z_planes)))
    for i, z in enumerate(z_planes):
        h, _ = _transfer(probe, float(z))
        out[:, :, i] = np.fft.fftshift(np.abs(np.fft.ifft2(spectrum * h)) ** 2) * scale
    return out


# ---------------------------------------------------------------------------
# crossed bottle beam


def local_coordinates(spec: BeamSpec, x, y, z):
    """Lab coordinates -> the beam's local (x', y', z') frame."""
    c, s = math.cos(spec.half_angle_theta), math.sin(spec.half_angle_theta)
    x0, y0, z0 = spec.focus_offset
    xr, yr, zr = x - x0, y - y0, z - z0
    return c * xr - s * zr, yr, s * xr + c * zr


class _SPPSampler:
    def __init__(self, spec: BeamSpec, volume: VolumeSpec, grid: GridSpec | None):
        self.spec = spec
        if grid is None:
            pitch = min(volume.dx, volume.dy, spec.waist_w0 / MIN_SAMPLES_PER_WAIST)
            grid = GridSpec(256, 256, pitch)
        self.grid = grid
        corners = [
            local_coordinates(spec, x, y, z)[2]
            for x in (volume.axes()[0][0], volume.axes()[0][-1])
            for y in (0.0,)
            for z in (volume.axes()[2][0], volume.axes()[2][-1])
        ]
        dzl = volume.dz
        lo, hi = min(corners) - dzl, max(corners) + dzl
        n = int(math.ceil((hi - lo) / dzl)) + 1
        self.z0 = lo
        self.dzl = dzl
        self.stack = spp_beam_stack(spec, grid, lo + np.arange(n) * dzl)

    def __call__(self, xl, yl, zl):
        g = self.grid
        coords = np.stack([
            xl / g.pitch + g.nx // 2,
            yl / g.pitch + g.ny // 2,
            (zl - self.z0) / self.dzl,
        ])
        return ndimage.map_coordinates(self.stack, coords, order=1, mode="constant", cval=0.0)


def crossed_bbt_intensity(
    beam_a: BeamSpec,
    beam_b: BeamSpec,
    volume: VolumeSpec,
    *,
    model: str = "lg",
    threads: int = 1,
    spp_grid: GridSpec | None = None,
) -> IntensityVolume:
    """Incoherent sum of two orthogonally polarized vortex beams on ``volume``.

    ``model="lg"`` evaluates the closed-form LG intensity in each beam's
    rotated frame.  ``model="spp"`` instead propagates an SPP-imprinted
    Gaussian with the angular-spectrum method and interpolates it into the
    lab frame.  Work is split over z-slabs; the result does not depend on
    ``threads``.
    """
    if beam_a.polarization_tag == beam_b.polarization_tag:
        raise PhysicsError(
            "beams share a polarization tag; co-polarized interference is not modeled"
        )
    if model == "lg":
        samplers = [lambda xl, yl, zl, s=s: lg_intensity(s, xl, yl, zl) for s in (beam_a, beam_b)]
    elif model == "spp":
        samplers = [_SPPSampler(s, volume, spp_grid) for s in (beam_a, beam_b)]
    else:
        raise PhysicsError(f"unknown field model {model!r}")

    x, y, z = volume.axes()
    values = np.empty(volume.shape)
    X, Y = np.meshgrid(x, y, indexing="ij")

    def slab(iz0, iz1):
        Z = z[None, None, iz0:iz1]
        Xs, Ys = X[:, :, None], Y[:, :, None]
        parts = []
        for spec, sampler in zip((beam_a, beam_b), samplers):
            xl, yl, zl = local_coordinates(spec, Xs, Ys, Z)
            xl, yl, zl = np.broadcast_arrays(xl, yl, zl)
            parts.append(sampler(xl, yl, zl))
        values[:, :, iz0:iz1] = parts[0] + parts[1]

    step = 8
    bounds = [(i, min(i + step, volume.nz)) for i in range(0, volume.nz, step)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: slab(*b), bounds))
    else:
        for b in bounds:
            slab(*b)

    meta = {
        "model": model,
        "beams": [beam_metadata(beam_a), beam_metadata(beam_b)],
    }
    return IntensityVolume(values, volume.pitches, volume.origin, meta)


def beam_metadata(spec: BeamSpec) -> dict:
    return {
        "wavelength_m": spec.wavelength,
        "waist_m": spec.waist_w0,
        "power_W": spec.power,
        "charge": spec.charge_l,
        "half_angle_rad": spec.half_angle_theta,
        "polarization": spec.polarization_tag,
        "focus_offset_m": list(spec.focus_offset),
    }


# ---------------------------------------------------------------------------
# slices and file formats

_PLANES = {"yz": 0, "xz": 1, "xy": 2}
_AXIS_NAMES = "xyz"


@dataclass
class Slice:
    values: np.ndarray
    plane: str
    axis_names: tuple[str, str]
    axis_coords: tuple[np.ndarray, np.ndarray]
    coordinate: float
    index: int


def slice_extract(vol: IntensityVolume, plane: str, coordinate: float) -> Slice:
    """Nearest-plane 2D cut through ``vol``; no interpolation across the cut axis."""
    if plane not in _PLANES:
        raise GridError(f"plane must be one of {sorted(_PLANES)}, got {plane!r}")
    ax = _PLANES[plane]
    coords = vol.axes()[ax]
    pitch = vol.pitches[ax]
    if not (coords[0] - pitch / 2 <= coordinate <= coords[-1] + pitch / 2):
        raise GridError(
            f"{_AXIS_NAMES[ax]}={coordinate:g} m lies outside [{coords[0]:g}, {coords[-1]:g}] m"
        )
    idx = int(np.clip(np.rint((coordinate - coords[0]) / pitch), 0, len(coords) - 1))
    values = np.take(vol.values, idx, axis=ax)
    keep = [i for i in range(3) if i != ax]
    return Slice(
        values=values,
        plane=plane,
        axis_names=(_AXIS_NAMES[keep[0]], _AXIS_NAMES[keep[1]]),
        axis_coords=(vol.axes()[keep[0]], vol.axes()[keep[1]]),
        coordinate=float(coords[idx]),
        index=idx,
    )


def write_slice_csv(path, sl: Slice):
    a, b = sl.axis_names
    A, B = np.meshgrid(*sl.axis_coords, indexing="ij")
    table = np.column_stack([A.ravel(), B.ravel(), sl.values.ravel()])
    header = f"{a}_m, {b}_m, intensity_W_m2"
    np.savetxt(path, table, delimiter=",", header=header, comments="# ", fmt="%.17g")


def save_ivol(path, values, pitches, origin, *, quantity, units, metadata=None):
    """Write a volume as one JSON header line followed by little-endian float64 data.

    The payload is x-fastest (Fortran) order.
    """
    values = np.asarray(values, dtype="<f8")
    header = {
        "format": "ivol",
        "version": IVOL_FORMAT_VERSION,
        "quantity": quantity,
        "units": units,
        "dims": list(values.shape),
        "pitches_m": [float(p) for p in pitches],
        "origin_m": [float(o) for o in origin],
        "order": "x-fastest",
        "dtype": "<f8",
        "metadata": metadata or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(values.ravel(order="F").tobytes())


def load_ivol(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        header = json.loads(line)
        if header.get("format") != "ivol":
            raise GridError(f"{path} is not an .ivol file")
        payload = fh.read()
    dims = tuple(header["dims"])
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != int(np.prod(dims)):
        raise GridError(f"{path}: payload has {flat.size} values, header declares {dims}")
    values = flat.reshape(dims, order="F").astype(np.float64)
    return values, header


def ring_radius(intensity: np.ndarray, pitch: float, nbins: int | None = None) -> float:
    """Radius of the azimuthally averaged intensity maximum, refined parabolically."""
    nx, ny = intensity.shape
    x = (np.arange(nx) - nx // 2) * pitch
    y = (np.arange(ny) - ny // 2) * pitch
    r = np.hypot(x[:, None], y[None, :])
    nbins = nbins or min(nx, ny) // 2
    edges = np.arange(nbins + 1) * pitch
    idx = np.digitize(r.ravel(), edges) - 1
    ok = (idx >= 0) & (idx < nbins)
    sums = np.bincount(idx[ok], weights=intensity.ravel()[ok], minlength=nbins)
    counts = np.bincount(idx[ok], minlength=nbins)
    prof = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    rmean = np.bincount(idx[ok], weights=r.ravel()[ok], minlength=nbins) / np.maximum(counts, 1)
    i = int(np.argmax(prof))
    if 0 < i < nbins - 1:
        y0, y1, y2 = prof[i - 1], prof[i], prof[i + 1]
        denom = y0 - 2 * y1 + y2
        frac = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        return float(rmean[i] + frac * pitch)
    return float(rmean[i])
