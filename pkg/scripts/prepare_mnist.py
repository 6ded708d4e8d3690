"""Convert the digit JSON files of the npm ``mnist`` package to IDX files.

The package ships about 10,000 MNIST digits as one JSON file per class, each
holding a flat list of 784-pixel images scaled to [0, 1] with three decimals.
Multiplying by 255 and rounding recovers the original bytes.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/prepare_mnist.py package/src/digits data/mnist
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from eventscan.data import write_idx


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"], float)
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), digit, np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "images-idx3-ubyte", images[order])
    write_idx(args.out_dir / "labels-idx1-ubyte", labels[order])
    print(f"wrote {len(labels)} digits to {args.out_dir}")


if __name__ == "__main__":
    main()
