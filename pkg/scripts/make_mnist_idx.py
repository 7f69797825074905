"""Write the 5,000-image MNIST subset bundled with mlxtend as IDX files.

Usage: python scripts/make_mnist_idx.py OUT_DIR

Produces ``mnist5k-images-idx3-ubyte.gz`` and ``mnist5k-labels-idx1-ubyte.gz``.
Use this when the full MNIST IDX files are not available offline.
"""

import argparse
import gzip
import importlib.resources
from pathlib import Path

import numpy as np

from dsd.data import write_idx

IMAGES = "mnist5k-images-idx3-ubyte.gz"
LABELS = "mnist5k-labels-idx1-ubyte.gz"


def convert(out_dir) -> tuple[Path, Path]:
    src = importlib.resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(src, "rt") as f:
        raw = np.loadtxt(f, delimiter=",", dtype=np.int64)
    images = raw[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = raw[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images, labels, out / IMAGES, out / LABELS)
    return out / IMAGES, out / LABELS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir", type=Path)
    args = p.parse_args()
    for path in convert(args.out_dir):
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
