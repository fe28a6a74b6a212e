"""Convert mlxtend's 5000-digit MNIST sample to IDX files.

usage: python3 mnist_5k_to_idx.py mlxtend-0.24.0-py3-none-any.whl OUT_DIR

The first 400 digits of each class go to train-*, the other 100 per class to t10k-*.
"""

import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def main(wheel, out):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    a = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",").astype(np.uint8)
    x, y = a[:, :-1], a[:, -1]
    seen = np.zeros(10, int)
    train, held = [], []
    for i, c in enumerate(y):
        (train if seen[c] < 400 else held).append(i)
        seen[c] += 1
    for prefix, idx in (("train", train), ("t10k", held)):
        with open(f"{out}/{prefix}-images-idx3-ubyte", "wb") as f:
            f.write(struct.pack(">IIII", 0x803, len(idx), 28, 28))
            f.write(x[idx].tobytes())
        with open(f"{out}/{prefix}-labels-idx1-ubyte", "wb") as f:
            f.write(struct.pack(">II", 0x801, len(idx)))
            f.write(y[idx].tobytes())
    print(len(train), "train,", len(held), "held out")


if __name__ == "__main__":
    main(*sys.argv[1:3])
