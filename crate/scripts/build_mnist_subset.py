#!/usr/bin/env python3
"""Build an IDX-format MNIST subset from the digits bundled in the npm package `mnist`.

The package redistributes 10,000 original MNIST digits as JSON with pixel values
in [0,1] rounded to 3 decimals. This script re-quantizes them to bytes and writes
the standard gzipped IDX pair that `load_idx` reads.

Usage:
  npm pack mnist && tar xzf mnist-*.tgz        # -> ./package
  python3 scripts/build_mnist_subset.py --npm-dir package --out data/mnist-subset
"""
import argparse
import gzip
import json
import os
import random
import struct


def write_idx(path_prefix, images, labels):
    n = len(images)
    with gzip.GzipFile(path_prefix + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(path_prefix + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))


def load_npm(npm_dir):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(npm_dir, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            px = flat[i * 784:(i + 1) * 784]
            images.append([min(255, max(0, round(v * 255))) for v in px])
            labels.append(digit)
    return images, labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--npm-dir", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = load_npm(args.npm_dir)

    # the package stores digits grouped by class; interleave them
    order = list(range(len(images)))
    random.Random(args.seed).shuffle(order)
    images = [images[i] for i in order]
    labels = [labels[i] for i in order]

    os.makedirs(args.out, exist_ok=True)
    write_idx(os.path.join(args.out, "train"), images, labels)
    print(f"wrote {len(images)} digits to {args.out}")


if __name__ == "__main__":
    main()
