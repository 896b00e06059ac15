"""Ramsey dephasing time versus atom temperature in the default trap.

    python scripts/dephasing_vs_temperature.py --temps 2 4 8 16 --atoms 200
"""

import argparse
import csv
from dataclasses import replace

import numpy as np

from bbtrap import config as cfgmod
from bbtrap.coherence import coherence_scan, motional_table
from bbtrap.trap import build_trap, load_species


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="paper-matched")
    ap.add_argument("--temps", type=float, nargs="+", default=[2.0, 4.0, 8.0], help="microkelvin")
    ap.add_argument("--atoms", type=int, default=200)
    ap.add_argument("--field-noise", action="store_true", help="keep the configured magnetic-field noise on")
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    cfg = cfgmod.from_dict({"schema_version": 1, "preset": args.preset})
    species = load_species(cfg.species)
    _, pot, rep = build_trap(cfg.beam_a.spec(), cfg.beam_b.spec(), cfg.volume.spec(), species)
    model = cfg.dephasing.model()
    if not args.field_noise:
        model = replace(model, field_noise_rms=0.0)
    td = np.asarray(cfg.coherence.delays)
    rows = []
    print(f"{'T uK':>6} {'T2 ms':>8} {'1/e ms':>8}")
    for t_uk in args.temps:
        T = t_uk * 1e-6
        table = motional_table(pot, rep, species, T, args.atoms, td, cfg.seed)
        res = coherence_scan(td, args.atoms, pot, rep, species, model, T, cfg.seed, motional=table)
        rows.append((t_uk, res.t2 * 1e3, res.t_1e * 1e3))
        print(f"{t_uk:6.1f} {res.t2 * 1e3:8.1f} {res.t_1e * 1e3:8.1f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["temperature_uK", "t2_ms", "t_1e_ms"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
