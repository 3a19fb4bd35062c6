"""Convert the per-class JSON digit bundle shipped by the `mnist` npm package
into a pair of gzipped IDX files (images + labels).

Usage: python3 digits_json_to_idx.py <digits_dir> <out_dir>

Pixels in the bundle are stored as round(byte / 255, 3); multiplying by 255 and
rounding recovers the original byte exactly. Examples are shuffled with a fixed
seed so that any contiguous slice is class-balanced in expectation.
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def main(src, out):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        rows = np.rint(flat * 255.0).astype(np.uint8).reshape(-1, 784)
        images.append(rows)
        labels.append(np.full(len(rows), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    n = len(labels)
    os.makedirs(out, exist_ok=True)
    with gzip.GzipFile(os.path.join(out, "images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 2051, n, 28, 28))
        fh.write(images.tobytes())
    with gzip.GzipFile(os.path.join(out, "labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 2049, n))
        fh.write(labels.tobytes())
    print(n, np.bincount(labels).tolist())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
