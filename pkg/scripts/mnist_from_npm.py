"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The npm package (``npm pack mnist``) bundles 10,000 MNIST digits as
per-class JSON arrays with pixel values already divided by 255 and rounded
to three decimals. This script restores the 8-bit pixels, shuffles with a
fixed seed and writes gzipped IDX train/test splits.

    python scripts/mnist_from_npm.py package/src/digits data/mnist10k
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, array):
    codes = {np.dtype(np.uint8): 0x08}
    magic = (codes[array.dtype] << 8) | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.tobytes())


def main(src, dst, n_test=2000, seed=0):
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        arr = np.rint(np.asarray(flat, dtype=np.float64) * 255).clip(0, 255)
        arr = arr.astype(np.uint8).reshape(-1, 28, 28)
        images.append(arr)
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(images))
    images, labels = images[order], labels[order]

    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    write_idx(dst / "train-images-idx3-ubyte.gz", images[n_test:])
    write_idx(dst / "train-labels-idx1-ubyte.gz", labels[n_test:])
    write_idx(dst / "t10k-images-idx3-ubyte.gz", images[:n_test])
    write_idx(dst / "t10k-labels-idx1-ubyte.gz", labels[:n_test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
