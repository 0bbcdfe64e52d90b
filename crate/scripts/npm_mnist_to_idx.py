#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package (v1.1.0) into IDX files.

The package ships 10,000 MNIST digits as per-class arrays of 784 floats (pixel/255
rounded to three decimals). Rounding back to bytes recovers the original pixels
exactly. Samples are interleaved class by class in package order; shuffling is
left to the consumer.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/npm_mnist_to_idx.py package/src/digits data/mnist-desk
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    per_class = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        per_class.append([flat[i : i + 784] for i in range(0, len(flat), 784)])

    images, labels = [], []
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for digit, samples in enumerate(per_class):
            if i < len(samples):
                pixels = bytes(round(v * 255) for v in samples[i])
                images.append(pixels)
                labels.append(digit)

    dst.mkdir(parents=True, exist_ok=True)
    n = len(images)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(bytes(labels))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
