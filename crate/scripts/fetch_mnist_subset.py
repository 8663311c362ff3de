#!/usr/bin/env python3
"""Build the 10k-sample MNIST subset used by the desk-scale experiments.

The digits come from the `mnist` npm package (10,000 real MNIST samples,
stored as JSON floats in [0, 1]). They are re-quantized to bytes and written
in the standard IDX layout, gzip-compressed, in class-interleaved order.

Usage: python3 scripts/fetch_mnist_subset.py [out_dir]
"""
import gzip
import json
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"
SIDE = 28


def main() -> None:
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist-10k")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", PACKAGE], cwd=tmp, check=True, capture_output=True)
        tgz = next(Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tgz) as tar:
            tar.extractall(tmp)
        per_class = []
        for digit in range(10):
            raw = json.loads((Path(tmp) / "package/src/digits" / f"{digit}.json").read_text())["data"]
            n = len(raw) // (SIDE * SIDE)
            images = [
                bytes(round(v * 255) for v in raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE])
                for i in range(n)
            ]
            per_class.append(images)

    # Round-robin over classes so any prefix is roughly balanced.
    images, labels = [], []
    cursor = [0] * 10
    while any(cursor[d] < len(per_class[d]) for d in range(10)):
        for d in range(10):
            if cursor[d] < len(per_class[d]):
                images.append(per_class[d][cursor[d]])
                labels.append(d)
                cursor[d] += 1

    n = len(images)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIDE, SIDE))
        for img in images:
            f.write(img)
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
