#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset shipped in the mlxtend wheel to IDX files.

The subset holds 500 training images per digit. The first 400 of each digit go
to the train files, the remaining 100 to the t10k files.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 tools/make_mnist5k.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def write_idx(out_dir: Path, prefix: str, images: np.ndarray, labels: np.ndarray) -> None:
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    wheel, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.TextIOWrapper(gzip.GzipFile(fileobj=io.BytesIO(raw))), delimiter=",")
    images, labels = table[:, :-1], table[:, -1].astype(int)
    train, test = [], []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        train.extend(idx[:400])
        test.extend(idx[400:])
    write_idx(out_dir, "train", images[train], labels[train])
    write_idx(out_dir, "t10k", images[test], labels[test])


if __name__ == "__main__":
    main()
