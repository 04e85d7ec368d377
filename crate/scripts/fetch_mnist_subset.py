#!/usr/bin/env python3
"""Build a 4000/1000 MNIST train/test split in IDX format.

The 5000-sample MNIST subset bundled with the `mlxtend` wheel is used as the
source (500 images per digit, sorted by label). Samples are interleaved
round-robin by class so that any prefix is class-balanced; the first 400 of
each class form the training split and the last 100 the test split.

Usage: python3 scripts/fetch_mnist_subset.py [OUT_DIR]
"""
import glob
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def write_idx_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def interleave(rows_by_class):
    out = []
    for i in range(len(rows_by_class[0])):
        for rows in rows_by_class:
            out.append(rows[i])
    return np.stack(out)


def main():
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k"
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-q", "-d", tmp]
        )
        wheel = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.TextIOWrapper(gzip.GzipFile(fileobj=io.BytesIO(raw))), delimiter=",", dtype=np.int64)
    by_class = [table[table[:, -1] == k] for k in range(10)]
    train = interleave([rows[:400] for rows in by_class])
    test = interleave([rows[400:] for rows in by_class])
    write_idx_images(os.path.join(out_dir, "train-images-idx3-ubyte"), train[:, :-1])
    write_idx_labels(os.path.join(out_dir, "train-labels-idx1-ubyte"), train[:, -1])
    write_idx_images(os.path.join(out_dir, "t10k-images-idx3-ubyte"), test[:, :-1])
    write_idx_labels(os.path.join(out_dir, "t10k-labels-idx1-ubyte"), test[:, -1])
    print(f"wrote {train.shape[0]} train / {test.shape[0]} test samples to {out_dir}")


if __name__ == "__main__":
    main()
