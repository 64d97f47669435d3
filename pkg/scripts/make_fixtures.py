"""Write the named reference paths to ``fixtures/*.path``."""
import argparse

from ppde.fixtures import FIXTURES, write_fixtures


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--horizon", type=float, default=1.0)
    args = ap.parse_args()
    for fn in write_fixtures(args.out, args.horizon):
        print(fn)
    print(f"{len(FIXTURES)} fixtures")


if __name__ == "__main__":
    main()
