"""Write a small MNIST train/test split as gzipped IDX files.

Uses the 5000-image MNIST sample bundled with mlxtend (500 per digit), so no
network access is needed. Each class is split 400 train / 100 test with a
fixed seed.

    python3 scripts/make_mnist_subset.py data/mnist-subset
"""

import argparse
import os

import numpy as np
from mlxtend.data import mnist_data

from incsim.datasets import write_idx


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--test-per-class", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    x, y = mnist_data()
    images = np.clip(np.rint(x), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
    labels = y.astype(np.uint8)
    gen = np.random.default_rng(args.seed)
    test_idx = np.sort(np.concatenate([
        gen.permutation(np.flatnonzero(labels == c))[: args.test_per_class] for c in range(10)
    ]))
    is_test = np.zeros(len(labels), dtype=bool)
    is_test[test_idx] = True

    os.makedirs(args.out_dir, exist_ok=True)
    for split, mask in (("train", ~is_test), ("test", is_test)):
        write_idx(os.path.join(args.out_dir, f"{split}-images-idx3-ubyte.gz"), images[mask])
        write_idx(os.path.join(args.out_dir, f"{split}-labels-idx1-ubyte.gz"), labels[mask])
        print(f"{split}: {mask.sum()} images")


if __name__ == "__main__":
    main()
