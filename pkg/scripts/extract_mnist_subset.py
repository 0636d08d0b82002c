"""Write the 5,000-digit MNIST subset bundled with mlxtend as IDX files.

mlxtend ships ``mlxtend/data/data/mnist_5k.csv.gz`` (784 pixel columns plus a
label column, 500 digits per class).  Only the pixels are kept.  The rows are
shuffled with a fixed seed and split 4500 train / 500 test.

usage: python scripts/extract_mnist_subset.py path/to/mlxtend-*.whl tests/data
       (``pip download --no-deps mlxtend`` fetches the wheel)
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from ddflow.datasets import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    order = np.random.default_rng(0).permutation(len(images))
    images = images[order]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images[:4500], out / "mnist5k-train-images-idx3-ubyte.gz")
    write_idx(images[4500:], out / "mnist5k-test-images-idx3-ubyte.gz")


if __name__ == "__main__":
    main(*sys.argv[1:3])
