"""Trap size and barrier height versus beam waist at fixed total power.

    python scripts/waist_scan.py --waists 2.5 3 3.5 4 --out waist_scan.csv
"""

import argparse
import csv
from dataclasses import replace

from scipy import constants

from bbtrap import config as cfgmod
from bbtrap.trap import build_trap, load_species


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="paper-matched")
    ap.add_argument("--waists", type=float, nargs="+", default=[2.5, 3.0, 3.5, 4.0, 4.5], help="micrometres")
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    cfg = cfgmod.from_dict({"schema_version": 1, "preset": args.preset})
    species = load_species(cfg.species)
    a0, b0 = cfg.beam_a.spec(), cfg.beam_b.spec()
    rows = []
    print(f"{'w0 um':>6} {'transverse um':>14} {'axial um':>9} {'barrier uK':>11}")
    for w in args.waists:
        a, b = replace(a0, waist_w0=w * 1e-6), replace(b0, waist_w0=w * 1e-6)
        _, _, rep = build_trap(a, b, cfg.volume.spec(), species)
        row = (w, rep.size_transverse * 1e6, rep.size_axial * 1e6, rep.barrier_energy / constants.k * 1e6)
        rows.append(row)
        print(f"{row[0]:6.2f} {row[1]:14.2f} {row[2]:9.1f} {row[3]:11.1f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["waist_um", "size_transverse_um", "size_axial_um", "barrier_uK"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
