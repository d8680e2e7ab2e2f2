#!/usr/bin/env python3
"""Write a 5k-sample MNIST subset as standard IDX files.

The samples come from the `mnist_5k.csv.gz` file bundled inside the mlxtend
wheel (500 images per digit, label in the last column). The set is shuffled
with a fixed seed and split stratified 400/100 per class into train/test.

Usage: python3 scripts/make_mnist_subset.py [OUT_DIR]   (default: data/mnist)
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


def load_csv():
    tmp = tempfile.mkdtemp()
    subprocess.check_call(
        [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-q", "-d", tmp]
    )
    whl = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]
    raw = zipfile.ZipFile(whl).read("mlxtend/data/data/mnist_5k.csv.gz")
    return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)


def write_idx(path, arr, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in arr.shape:
            f.write(struct.pack(">I", d))
        f.write(arr.astype(np.uint8).tobytes())


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    os.makedirs(out, exist_ok=True)
    d = load_csv()
    x, y = d[:, :-1], d[:, -1]
    rng = np.random.default_rng(0)
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        train.extend(idx[:400])
        test.extend(idx[400:])
    train = np.array(train)
    test = np.array(test)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, idx in (("train", train), ("t10k", test)):
        write_idx(os.path.join(out, f"{name}-images-idx3-ubyte"), x[idx].reshape(-1, 28, 28), 0x00000803)
        write_idx(os.path.join(out, f"{name}-labels-idx1-ubyte"), y[idx], 0x00000801)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main()
