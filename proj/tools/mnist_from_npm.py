#!/usr/bin/env python3
"""Build gzipped IDX files from the digit dumps in the `mnist` npm package.

The package ships about 10,000 real MNIST digits as JSON (one file per
class, 784 floats in [0, 1] per sample). This writes them as

    train-images-idx3-ubyte.gz  train-labels-idx1-ubyte.gz
    t10k-images-idx3-ubyte.gz   t10k-labels-idx1-ubyte.gz

after a seeded shuffle, so the C++ loaders read them like the original
distribution.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist
"""

import argparse
import gzip
import json
import random
import struct
from pathlib import Path


def read_digits(src: Path):
    samples = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        if len(flat) % 784:
            raise SystemExit(f"{label}.json: length {len(flat)} is not a multiple of 784")
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            samples.append((pixels, label))
    return samples


def write_idx(out: Path, prefix: str, samples):
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("digits", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test", type=int, default=2000, help="samples held out as the test split")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    samples = read_digits(args.digits)
    random.Random(args.seed).shuffle(samples)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out, "t10k", samples[: args.test])
    write_idx(args.out, "train", samples[args.test :])
    print(f"{len(samples) - args.test} train, {args.test} test samples written to {args.out}")


if __name__ == "__main__":
    main()
