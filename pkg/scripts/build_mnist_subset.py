"""Rebuild data/mnist10k-*-ubyte.gz from the digits bundled in the npm ``mnist`` package.

Usage: python scripts/build_mnist_subset.py path/to/mnist-1.1.0.tgz [out_dir]

The tarball is obtained with ``npm pack mnist``. Its JSON files store
pixel/255 rounded to three decimals; rounding back to bytes is lossless.
"""
import gzip
import json
import struct
import sys
import tarfile
from pathlib import Path

import numpy as np


def main(tgz: str, out_dir: str = "data") -> None:
    images, labels = [], []
    with tarfile.open(tgz) as tar:
        for k in range(10):
            member = tar.extractfile(f"package/src/digits/{k}.json")
            flat = np.asarray(json.load(member)["data"], dtype=np.float64)
            rows = np.rint(flat * 255).astype(np.uint8).reshape(-1, 784)
            images.append(rows)
            labels.append(np.full(len(rows), k, dtype=np.uint8))
    X = np.vstack(images)
    y = np.concatenate(labels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the gzip bytes reproducible
    with open(out / "mnist10k-images-idx3-ubyte.gz", "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(struct.pack(">IIII", 0x803, len(X), 28, 28))
            fh.write(X.tobytes())
    with open(out / "mnist10k-labels-idx1-ubyte.gz", "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(struct.pack(">II", 0x801, len(y)))
            fh.write(y.tobytes())
    print(f"wrote {len(X)} examples to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
