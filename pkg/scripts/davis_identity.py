"""Score identity propagation (first mask copied forward) on DAVIS-2017 val.

    python3 scripts/davis_identity.py /data/DAVIS

The root must hold ``Annotations/480p/<sequence>/*.png`` and
``ImageSets/2017/val.txt``.  Reading palette PNGs needs Pillow.  Expected:
J-mean near 22.1 and F-mean near 23.6.
"""

import argparse
from pathlib import Path

from corrflow.experiments import davis_identity


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root", type=Path)
    ap.add_argument("--split", default="val")
    args = ap.parse_args()
    print(davis_identity(args.root, args.split).table())


if __name__ == "__main__":
    main()
