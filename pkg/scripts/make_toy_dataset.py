#!/usr/bin/env python3
"""
Write a synthetic separable scene as a dims/data/labels triplet

    python scripts/make_toy_dataset.py --out toy/ --classes 3 --bands 16
    python -m hsi_rcnet ingest --dims toy/dims.txt --data toy/data.csv \
        --labels toy/labels.csv --out toy/scene.hsicube
"""

import argparse
import logging
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np  # noqa: E402

from hsi_rcnet.data.hypercube import synthetic_scene  # noqa: E402

logger = logging.getLogger("make_toy_dataset")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--classes", type=int, default=3)
    parser.add_argument("--block", type=int, default=12, help="side of each class square")
    parser.add_argument("--gap", type=int, default=4, help="unlabeled columns between classes")
    parser.add_argument("--bands", type=int, default=16)
    parser.add_argument("--noise", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cube = synthetic_scene(
        num_classes=args.classes, block=args.block, gap=args.gap, bands=args.bands, noise=args.noise, seed=args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w, s = cube.radiance.shape
    (out / "dims.txt").write_text(
        f"{h} {w} {s} {cube.num_classes}\n" + "\n".join(cube.class_names) + "\n", encoding="utf-8"
    )
    np.savetxt(out / "data.csv", cube.radiance.data.reshape(h * w, s), delimiter=",", fmt="%.6f")
    np.savetxt(out / "labels.csv", cube.labels, delimiter=",", fmt="%d")
    logger.info(f"Wrote {h}x{w}x{s} scene with {cube.num_classes} classes to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
