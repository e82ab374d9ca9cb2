#!/usr/bin/env python3
"""Sweep attention cost across geometries and keep ratios.

Prints the flagship analytic comparison first (64x64 tokens, 256 channels,
6x6 windows), then sweeps the keep ratio, then measures small geometries
with the instrumented kernels so counted multiplies sit next to the
closed forms.
"""

import argparse
from pathlib import Path

from coarse2fine.complexity import cost_report, report_csv, report_table


def flagship_rows(swin):
    rows = [cost_report("msa", 64, 64, 256, measure=False, swin_convention=swin),
            cost_report("wmsa", 64, 64, 256, m=6, measure=False, swin_convention=swin)]
    for rho in (0.1, 0.25, 0.5, 0.75, 1.0):
        rows.append(cost_report("wssa", 64, 64, 256, m=6, rho=rho,
                                measure=False, swin_convention=swin))
    return rows


def measured_rows(swin, big):
    geoms = [(12, 12, 16, 3), (24, 24, 16, 4), (24, 24, 32, 6)]
    if big:
        geoms.append((48, 48, 16, 6))
    rows = []
    for h, w, c, m in geoms:
        rows.append(cost_report("msa", h, w, c, swin_convention=swin))
        rows.append(cost_report("wmsa", h, w, c, m=m, swin_convention=swin))
        for rho in (0.25, 0.5, 1.0):
            rows.append(cost_report("wssa", h, w, c, m=m, rho=rho, swin_convention=swin))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--swin-convention", action="store_true",
                    help="carry the channel factor in window attention terms")
    ap.add_argument("--big", action="store_true", help="include a 48x48 measured row")
    ap.add_argument("--csv", metavar="PATH", help="write the measured sweep as csv")
    args = ap.parse_args()

    print("analytic, flagship geometry")
    print(report_table(flagship_rows(args.swin_convention)))
    print()
    print("measured, small geometries (counted = multiplies observed in the kernel)")
    rows = measured_rows(args.swin_convention, args.big)
    print(report_table(rows))
    if args.csv:
        Path(args.csv).write_text(report_csv(rows))
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
