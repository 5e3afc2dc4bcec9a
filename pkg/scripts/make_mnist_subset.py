"""Write the 5,000-digit MNIST subset bundled with mlxtend as gzipped IDX files.

The subset is stored class-sorted, so it is shuffled with a fixed seed and
split 4,000 / 1,000 into train and test portions.

    python scripts/make_mnist_subset.py tests/data/mnist5k
"""

import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from antree.data import write_idx


def main(out_dir: str) -> None:
    X, y = mnist_data()
    perm = np.random.default_rng(0).permutation(len(y))
    X = X[perm].reshape(-1, 28, 28).astype(np.uint8)
    y = y[perm].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, 4000)), ("test", slice(4000, None))):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", X[sl])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", y[sl])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/mnist5k")
