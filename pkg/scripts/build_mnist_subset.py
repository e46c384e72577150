"""Convert the digits bundled with the npm ``mnist`` package into IDX files.

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist-subset

The package ships 10,000 MNIST digits (MIT licensed) as per-class JSON arrays
of pixel intensities rounded to three decimals. Rounding ``v * 255`` recovers
the original bytes exactly. The images are shuffled with a fixed seed and
split 8,000 / 2,000 into train / test files.
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

N_TEST = 2000


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        arr = np.rint(np.asarray(data, dtype=np.float64) * 255.0).reshape(-1, 784)
        images.append(arr)
        labels.append(np.full(len(arr), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    dst.mkdir(parents=True, exist_ok=True)
    write_idx_images(dst / "train-images-idx3-ubyte.gz", images[N_TEST:])
    write_idx_labels(dst / "train-labels-idx1-ubyte.gz", labels[N_TEST:])
    write_idx_images(dst / "t10k-images-idx3-ubyte.gz", images[:N_TEST])
    write_idx_labels(dst / "t10k-labels-idx1-ubyte.gz", labels[:N_TEST])
    print(f"wrote {len(labels) - N_TEST} train / {N_TEST} test images to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
