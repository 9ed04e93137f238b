"""Build the desk-scale MNIST subset in IDX format.

Source: the 5000-example MNIST sample bundled with the `mlxtend` wheel
(500 images per digit, drawn from the official training set). The script
takes a seeded, stratified split of 200 train / 100 test images per digit
and writes the four IDX files next to this repository's data/ directory.

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 100
SEED = 20200731


def write_idx_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    wheel = sys.argv[1]
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    x, y = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.int64)

    rng = np.random.default_rng(SEED)
    train_idx, test_idx = [], []
    for label in range(10):
        pool = rng.permutation(np.flatnonzero(y == label))
        train_idx.extend(pool[:TRAIN_PER_CLASS])
        test_idx.extend(pool[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))

    out = Path(__file__).resolve().parent.parent / "data" / "mnist-subset"
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", x[train_idx])
    write_idx_labels(out / "train-labels-idx1-ubyte", y[train_idx])
    write_idx_images(out / "t10k-images-idx3-ubyte", x[test_idx])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", y[test_idx])


if __name__ == "__main__":
    main()
