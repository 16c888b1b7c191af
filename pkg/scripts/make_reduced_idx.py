"""Build the reduced MNIST / Fashion-MNIST IDX files shipped under data/.

Sources are the npm tarballs ``mnist-data`` (raw IDX files) and
``fashion-mnist`` (per-class JSON arrays of 0..255 pixels)::

    npm pack mnist-data fashion-mnist
    tar xzf mnist-data-*.tgz -C md && tar xzf fashion-mnist-*.tgz -C fm
    python scripts/make_reduced_idx.py md/package fm/package data/

Each output set holds N_TRAIN_PER_CLASS / N_TEST_PER_CLASS images per class,
written gzip-compressed in standard IDX layout.
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

N_TRAIN_PER_CLASS = 600
N_TEST_PER_CLASS = 100


def read_idx(path):
    raw = Path(path).read_bytes()
    magic, n = struct.unpack(">II", raw[:8])
    if magic == 0x803:
        rows, cols = struct.unpack(">II", raw[8:16])
        return np.frombuffer(raw, np.uint8, offset=16).reshape(n, rows, cols)
    return np.frombuffer(raw, np.uint8, offset=8)


def write_idx(out_dir, prefix, images, labels):
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(out_dir / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, n, 28, 28))
        fh.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(out_dir / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, n))
        fh.write(labels.astype(np.uint8).tobytes())


def take_per_class(images, labels, per_class, start=0):
    idx = np.concatenate(
        [np.flatnonzero(labels == c)[start:start + per_class] for c in range(10)]
    )
    idx.sort()
    return images[idx], labels[idx]


def main(mnist_pkg, fashion_pkg, out):
    out = Path(out)
    tr_x = read_idx(Path(mnist_pkg) / "data/train-images-idx3-ubyte")
    tr_y = read_idx(Path(mnist_pkg) / "data/train-labels-idx1-ubyte")
    te_x = read_idx(Path(mnist_pkg) / "data/t10k-images-idx3-ubyte")
    te_y = read_idx(Path(mnist_pkg) / "data/t10k-labels-idx1-ubyte")
    write_idx(out / "mnist", "train", *take_per_class(tr_x, tr_y, N_TRAIN_PER_CLASS))
    write_idx(out / "mnist", "t10k", *take_per_class(te_x, te_y, N_TEST_PER_CLASS))

    xs, ys = [], []
    for c in range(10):
        data = json.loads((Path(fashion_pkg) / f"src/clothes/{c}.json").read_text())["data"]
        arr = np.asarray(data[: N_TRAIN_PER_CLASS + N_TEST_PER_CLASS], dtype=np.uint8)
        xs.append(arr.reshape(-1, 28, 28))
        ys.append(np.full(len(arr), c, dtype=np.uint8))
    # interleave classes so the files are not sorted by label
    x = np.stack(xs, axis=1).reshape(-1, 28, 28)
    y = np.stack(ys, axis=1).reshape(-1)
    n_train = N_TRAIN_PER_CLASS * 10
    write_idx(out / "fashion-mnist", "train", x[:n_train], y[:n_train])
    write_idx(out / "fashion-mnist", "t10k", x[n_train:], y[n_train:])


if __name__ == "__main__":
    main(*sys.argv[1:4])
