"""Command-line entry point: ``bbtrap <subcommand> [--config FILE] [--preset NAME] ...``.

Each subcommand writes data files (CSV / JSON / .ivol) into ``--out``
together with ``<subcommand>.manifest.json``; ``bbtrap replay`` re-runs a
manifest and checks that every artifact comes out byte-identical.
"""

from __future__ import annotations

import json
import math
import sys
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import click
import numpy as np

from . import coherence, config as cfgmod, dynamics, optics, trap
from .errors import BBTError, ConfigError, FitError, PhysicsError
from .manifest import RunManifest, sha256_file

EXIT_OK, EXIT_CONFIG, EXIT_PHYSICS, EXIT_FIT = 0, 2, 3, 4

PLOT_TEMPLATE = '''"""Plot {name}. Usage: python {script}"""
import matplotlib.pyplot as plt
import numpy as np

data = np.loadtxt("{name}", delimiter=",", comments="#", ndmin=2)
labels = {labels!r}
fig, ax = plt.subplots()
{body}
ax.set_xlabel(labels[0])
ax.set_ylabel(labels[1])
fig.savefig("{stem}.png", dpi=150)
'''

LINE_BODY = '''if data.shape[1] > 2:
    ax.errorbar(data[:, 0], data[:, 1], yerr=data[:, 2], fmt="o")
else:
    ax.plot(data[:, 0], data[:, 1], "o-")'''

MAP_BODY = '''a, b = np.unique(data[:, 0]), np.unique(data[:, 1])
img = data[:, 2].reshape(len(a), len(b))
m = ax.pcolormesh(b * 1e6, a * 1e6, img, shading="auto")
fig.colorbar(m, ax=ax, label=labels[2])'''


def write_csv(path: Path, header: list[str], columns) -> None:
    table = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, table, delimiter=",", header=", ".join(header), comments="# ", fmt="%.17g")


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _num(v):
    return float(v) if v is not None and np.isfinite(v) else None


@dataclass
class RunContext:
    command: str
    cfg: cfgmod.SimConfig
    out: Path
    threads: int
    options: dict
    manifest: RunManifest
    species: trap.AtomSpecies = field(init=False)

    def __post_init__(self):
        try:
            self.species = trap.load_species(self.cfg.species)
        except (OSError, KeyError) as exc:
            raise ConfigError(f"species {self.cfg.species!r} could not be loaded: {exc}") from exc

    def emit(self, path: Path) -> Path:
        self.manifest.add_artifact(path, self.out)
        return path

    def emit_csv(self, name: str, header: list[str], columns, kind: str = "line") -> None:
        path = self.out / name
        write_csv(path, header, columns)
        self.emit(path)
        stem = path.stem
        script = self.out / f"{stem}_plot.py"
        script.write_text(PLOT_TEMPLATE.format(name=name, script=script.name, stem=stem, labels=header,
                                               body=MAP_BODY if kind == "map" else LINE_BODY))
        self.emit(script)

    def emit_json(self, name: str, payload: dict) -> None:
        path = self.out / name
        write_json(path, payload)
        self.emit(path)

    def beams(self):
        return self.cfg.beam_a.spec(), self.cfg.beam_b.spec()

    def intensity(self) -> optics.IntensityVolume:
        a, b = self.beams()
        return optics.crossed_bbt_intensity(a, b, self.cfg.volume.spec(), model=self.cfg.field_model,
                                            threads=self.threads)

    def trap(self):
        """Potential and report, from ``--ivol`` when given, else built from the config."""
        src = self.options.get("ivol")
        if src:
            self.manifest.add_input(src)
            values, header = optics.load_ivol(src)
            if header["quantity"] == "potential":
                pot = trap.PotentialGrid.load(src)
            elif header["quantity"] == "intensity":
                vol = optics.IntensityVolume.load(src)
                pot = trap.potential_from_intensity(vol, self.species)
            else:
                raise PhysicsError(f"{src}: cannot build a trap from {header['quantity']!r}")
        else:
            pot = trap.potential_from_intensity(self.intensity(), self.species, self.cfg.beam_a.wavelength)
        self.manifest.potential_hash = pot.content_hash()
        report = trap.analyze_trap(pot, self.species)
        if not report.enclosed:
            raise PhysicsError("potential does not enclose a trap around its minimum")
        return pot, report


COMMANDS = {}


def _register(name):
    def deco(fn):
        COMMANDS[name] = fn
        return fn

    return deco


@_register("fieldmap")
def _fieldmap(ctx: RunContext):
    vol = ctx.intensity()
    ipath = ctx.out / "intensity.ivol"
    vol.save(ipath)
    ctx.emit(ipath)
    pot = trap.potential_from_intensity(vol, ctx.species, ctx.cfg.beam_a.wavelength)
    ppath = ctx.out / "potential.ivol"
    pot.save(ppath)
    ctx.emit(ppath)
    ctx.manifest.potential_hash = pot.content_hash()
    for plane in ("xy", "xz", "yz"):
        sl = optics.slice_extract(vol, plane, 0.0)
        a, b = sl.axis_names
        A, B = np.meshgrid(*sl.axis_coords, indexing="ij")
        ctx.emit_csv(f"fieldmap_{plane}.csv", [f"{a}_m", f"{b}_m", "intensity_W_m2"],
                     [A.ravel(), B.ravel(), sl.values.ravel()], kind="map")


@_register("trapreport")
def _trapreport(ctx: RunContext):
    pot, report = ctx.trap()
    payload = report.to_json()
    payload["potential_content_hash"] = pot.content_hash()
    payload["species"] = ctx.species.name
    ctx.emit_json("trap_report.json", payload)


@_register("calibrate-waist")
def _calibrate(ctx: RunContext):
    a, b = ctx.beams()
    c = ctx.cfg.calibration
    res = trap.calibrate_waist(a, b, ctx.cfg.volume.spec(), ctx.species, c.target_transverse,
                               (c.waist_min, c.waist_max), c.rel_tol, c.max_iter, threads=ctx.threads)
    ctx.emit_json("calibration.json", {
        "waist_m": res.waist,
        "size_transverse_m": res.size_transverse,
        "target_transverse_m": c.target_transverse,
        "converged": res.converged,
        "history": res.history,
    })


@_register("load-hist")
def _load_hist(ctx: RunContext):
    pot, report = ctx.trap()
    lc = ctx.cfg.loading
    outcome = dynamics.simulate_loading(lc.params(), pot, report, lc.n_cycles, ctx.cfg.seed, ctx.species.mass)
    hist = dynamics.simulate_count_histogram(lc.n_cycles, outcome.occupancy, ctx.cfg.counter.model(),
                                             ctx.cfg.seed, lc.max_overlap)
    ctx.emit_csv("load_hist.csv", ["counts", "frequency"], [hist.bins, hist.frequency])
    ctx.emit_json("load_hist.json", {
        "n_cycles": lc.n_cycles,
        "p1_classified": hist.p1,
        "p1_true": outcome.p1,
        "multi_atom_events": int(np.count_nonzero(outcome.occupancy >= 2)),
        "threshold_counts": hist.threshold,
        "bimodal": hist.bimodal,
        "mode_means": list(hist.mode_means),
        "overlap": hist.overlap,
        "distinguishable": hist.distinguishable,
        "expected_capture": outcome.expected_capture,
        "p_collapse": outcome.p_collapse,
    })


@_register("retention")
def _retention(ctx: RunContext):
    pot, report = ctx.trap()
    rc = ctx.cfg.retention
    loss = ctx.cfg.loss.model()
    res = dynamics.simulate_retention(rc.n_atoms, rc.hold_times, pot, report, loss, ctx.cfg.seed,
                                      species=ctx.species, temperature=rc.temperature, fit=False)
    ctx.emit_csv("retention.csv", ["hold_time_s", "survival", "stderr"], [res.hold_times, res.survival, res.stderr])
    fit = dynamics.fit_exponential(res.hold_times, res.survival, res.stderr)
    ctx.emit_json("retention_fit.json", dict(fit.to_json(), readout_on=loss.readout_on,
                                             loss_rate_per_s=loss.loss_rate, n_atoms=rc.n_atoms))


@_register("rabi")
def _rabi(ctx: RunContext):
    cc = ctx.cfg.coherence
    model = ctx.cfg.dephasing.model()
    t, p0 = coherence.rabi_scan(cc.rabi_durations, cc.n_atoms, model, ctx.cfg.seed, cc.rabi_detuning)
    ctx.emit_csv("rabi.csv", ["duration_s", "p0"], [t, p0])
    if ctx.cfg.sequence:
        segs = coherence.validate_sequence(cfgmod.segments(ctx.cfg))
        state = coherence.QubitState.one()
        rows = [(0, state.p0, state.p1)]
        for i, seg in enumerate(segs, 1):
            state = coherence.evolve_pulse(state, seg)
            rows.append((i, state.p0, state.p1))
        ctx.emit_csv("sequence.csv", ["segment", "p0", "p1"], np.array(rows).T)


def _contrast(ctx: RunContext, echo: bool):
    cc = ctx.cfg.coherence
    model = ctx.cfg.dephasing.model()
    pot = report = None
    if model.eta_differential > 0:
        pot, report = ctx.trap()
    res = coherence.coherence_scan(cc.delays, cc.n_atoms, pot, report, ctx.species, model, cc.temperature,
                                   ctx.cfg.seed, echo=echo)
    name = "echo" if echo else "ramsey"
    ctx.emit_csv(f"{name}.csv", ["td_s", "contrast", "stderr"], [res.td, res.contrast, res.stderr])
    fit = res.fit.to_json() if res.fit is not None else None
    tmax = float(np.max(res.td))
    ctx.emit_json(f"{name}_fit.json", {
        "sequence": name,
        "fit": fit,
        "t2_s": _num(res.t2),
        "decay_detected": bool(np.isfinite(res.t2) and res.t2 <= 10 * tmax),
        "t_1e_s": _num(res.t_1e),
        "temperature_K": cc.temperature,
        "n_atoms": cc.n_atoms,
        "rabi_jitter_rel": res.metadata["rabi_jitter_rel"],
    })


@_register("ramsey")
def _ramsey(ctx: RunContext):
    _contrast(ctx, echo=False)


@_register("echo")
def _echo(ctx: RunContext):
    _contrast(ctx, echo=True)


def run(command: str, cfg: cfgmod.SimConfig, out, *, threads: int = 1, options: dict | None = None,
        stderr=None) -> tuple[int, RunManifest | None]:
    """Execute ``command`` and return (exit status, manifest).

    Module errors map to exit codes: configuration 2, physics model 3,
    fit failure 4.  The error chain is printed to ``stderr``.
    """
    stderr = stderr or sys.stderr
    options = dict(options or {})
    if command not in COMMANDS:
        print(f"error: unknown command {command!r}", file=stderr)
        return EXIT_CONFIG, None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command, options, cfgmod.to_dict(cfg), cfgmod.config_hash(cfg), cfg.seed)
    try:
        ctx = RunContext(command, cfg, out, max(1, int(threads)), options, manifest)
        COMMANDS[command](ctx)
    except BBTError as exc:
        code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_FIT if isinstance(exc, FitError) else EXIT_PHYSICS
        print(f"error [{command}]: {_chain(exc)}", file=stderr)
        return code, manifest
    manifest.write(out / f"{command}.manifest.json")
    return EXIT_OK, manifest


def _chain(exc: BaseException) -> str:
    parts = []
    while exc is not None:
        parts.append(f"{type(exc).__name__}: {exc}")
        exc = exc.__cause__
    return " <- ".join(parts)


def load_config(config_path, preset, seed, out) -> cfgmod.SimConfig:
    if config_path:
        cfg = cfgmod.parse_config(config_path)
        if preset and preset != cfg.preset:
            raise ConfigError(f"--preset {preset!r} conflicts with the config's preset {cfg.preset!r}")
    else:
        cfg = cfgmod.from_dict({"preset": preset or "paper-matched"})
    return cfgmod.with_overrides(cfg, seed=seed, output_dir=out)


# ---------------------------------------------------------------------------
# click wiring


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file.")(fn)
    fn = click.option("--preset", type=str, default=None, help="Preset name (paper-matched, ideal, smoke).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(fn)
    fn = click.option("--threads", type=int, default=1, show_default=True, help="Worker cap; results do not depend on it.")(fn)
    return fn


def _invoke(command, config_path, preset, seed, out, threads, **options):
    try:
        cfg = load_config(config_path, preset, seed, out)
    except ConfigError as exc:
        click.echo(f"error [{command}]: {_chain(exc)}", err=True)
        sys.exit(EXIT_CONFIG)
    options = {k: v for k, v in options.items() if v is not None}
    code, manifest = run(command, cfg, cfg.output_dir, threads=threads, options=options)
    if code == EXIT_OK:
        click.echo(f"{command}: wrote {len(manifest.artifacts)} artifacts to {cfg.output_dir}")
    sys.exit(code)


@click.group()
@click.version_option(package_name="artifact", prog_name="bbtrap")
def main():
    """Crossed-vortex bottle beam trap simulator."""


def _make(name, help_text, with_ivol=False):
    def cmd(**kw):
        _invoke(name, **kw)

    cmd.__doc__ = help_text
    cmd = _common(cmd)
    if with_ivol:
        cmd = click.option("--ivol", type=click.Path(exists=True, dir_okay=False), default=None,
                           help="Use this intensity or potential volume instead of building one.")(cmd)
    main.command(name)(cmd)


_make("fieldmap", "Intensity/potential volumes and central slices.")
_make("trapreport", "Minimum, escape barrier, frequencies and size of the trap.", with_ivol=True)
_make("calibrate-waist", "Bisect the beam waist to hit the target transverse trap size.")
_make("load-hist", "Loading cycles and the photon-count histogram.", with_ivol=True)
_make("retention", "Survival versus hold time with an exponential fit.", with_ivol=True)
_make("rabi", "Shot-averaged Rabi oscillation (and an optional configured sequence).")
_make("ramsey", "Ramsey contrast versus delay with a T2 fit.", with_ivol=True)
_make("echo", "Spin-echo contrast versus delay with a T2 fit.", with_ivol=True)


@main.command("replay")
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Fresh output directory.")
def replay(manifest_path, out):
    """Re-run a manifest and compare artifact hashes."""
    old = RunManifest.read(manifest_path)
    try:
        cfg = cfgmod.from_dict(old.config)
    except ConfigError as exc:
        click.echo(f"error [replay]: {_chain(exc)}", err=True)
        sys.exit(EXIT_CONFIG)
    for item in old.inputs:
        if sha256_file(item["path"]) != item["sha256"]:
            click.echo(f"error [replay]: input {item['path']} changed since the original run", err=True)
            sys.exit(EXIT_CONFIG)
    code, new = run(old.command, replace(cfg, output_dir=str(out)), out, options=old.options)
    if code != EXIT_OK:
        sys.exit(code)
    before = {a["path"]: a["sha256"] for a in old.artifacts}
    after = {a["path"]: a["sha256"] for a in new.artifacts}
    bad = sorted(p for p in before if before[p] != after.get(p))
    for p in bad:
        click.echo(f"mismatch: {p}", err=True)
    click.echo(f"replay: {len(before) - len(bad)}/{len(before)} artifacts identical")
    sys.exit(1 if bad else EXIT_OK)


if __name__ == "__main__":
    main()
