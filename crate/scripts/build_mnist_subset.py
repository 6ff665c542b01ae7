#!/usr/bin/env python3
"""Rebuild crates/core/testdata/mnist10k-images-idx3-ubyte.gz.

Source: the MIT-licensed `mnist` npm package (https://github.com/cazala/mnist),
which ships 10,000 MNIST digits as per-class JSON arrays of grey levels
quantized to 3 decimals. Grey levels are restored to bytes and written in the
standard IDX3 layout (big-endian header, row-major 28x28 images).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/build_mnist_subset.py package/src/digits crates/core/testdata
"""
import gzip
import json
import os
import struct
import sys


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            data = json.load(f)["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            px = data[i * 784:(i + 1) * 784]
            images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
            labels.append(digit)
    n = len(images)
    with gzip.GzipFile(os.path.join(dst, "mnist10k-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(os.path.join(dst, "mnist10k-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))
    print(f"wrote {n} images")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
