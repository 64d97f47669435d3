"""Run every shipped config through the CLI and report exit codes.

Each config is paired with the subcommand it was written for. Output goes
under ``out/`` unless ``PPDE_OUTPUT_DIR`` is set.
"""
import argparse
import os
import sys
import time

from ppde.cli import run

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

PLAN = [
    ("classical", "classical.ini", 0),
    ("converge", "heat_square.ini", 0),
    ("gridcheck", "heat_integral_square.ini", 0),
    ("modulus", "heat_abs_modulus.ini", 0),
    ("solve", "bsb.ini", 0),
    ("mc", "semilinear_mc.ini", 0),
    ("dupire", "heat_logcosh_dupire.ini", 0),
    ("solve", "bad_levels.ini", 2),
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--only", nargs="*", help="subset of config file names")
    args = ap.parse_args()
    bad = 0
    for cmd, name, want in PLAN:
        if args.only and name not in args.only:
            continue
        t0 = time.time()
        rc = run([cmd, os.path.join(ROOT, "configs", name)])
        ok = rc == want
        bad += not ok
        print(f"{'ok ' if ok else 'BAD'} {cmd:10s} {name:28s} rc={rc} ({time.time() - t0:.1f}s)", flush=True)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
