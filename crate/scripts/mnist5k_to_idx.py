#!/usr/bin/env python3
"""Convert the 5,000-digit MNIST sample bundled with mlxtend into gzipped IDX files.

Usage: pip download --no-deps mlxtend && python3 mnist5k_to_idx.py mlxtend-*.whl OUT_DIR

Rows are shuffled with a fixed seed; the first 4,000 become the train split and
the last 1,000 the test split.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, magic, array):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    wheel, out = sys.argv[1], sys.argv[2]
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    pixels, labels = rows[:, :-1], rows[:, -1]
    assert pixels.shape == (5000, 784)
    # the bundled rows are grouped by class; shuffle before splitting
    order = np.random.RandomState(0).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]
    images = pixels.reshape(-1, 28, 28)
    write_idx(f"{out}/train-images-idx3-ubyte.gz", 2051, images[:4000])
    write_idx(f"{out}/train-labels-idx1-ubyte.gz", 2049, labels[:4000])
    write_idx(f"{out}/t10k-images-idx3-ubyte.gz", 2051, images[4000:])
    write_idx(f"{out}/t10k-labels-idx1-ubyte.gz", 2049, labels[4000:])


if __name__ == "__main__":
    main()
