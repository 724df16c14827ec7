#!/usr/bin/env python3
"""Build gzipped IDX files from the 10,000 MNIST digits bundled in the npm `mnist` package.

Usage: python3 scripts/mnist_from_npm.py [OUT_DIR]

Runs `npm pack mnist` in a temp directory, rounds the stored [0,1] floats back
to bytes and writes a seeded 8000/2000 train/test split in the standard IDX
layout (train-images-idx3-ubyte.gz, train-labels-idx1-ubyte.gz, t10k-*).
"""
import gzip
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

SIDE = 28
TRAIN = 8000
SEED = 20190101


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "data", "mnist")
    os.makedirs(out, exist_ok=True)
    samples = []
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            for digit in range(10):
                member = tar.extractfile(f"package/src/digits/{digit}.json")
                raw = json.load(member)["data"]
                n = len(raw) // (SIDE * SIDE)
                for k in range(n):
                    px = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
                    samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    random.Random(SEED).shuffle(samples)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte.gz"), [s[0] for s in train])
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte.gz"), [s[1] for s in train])
    write_idx_images(os.path.join(out, "t10k-images-idx3-ubyte.gz"), [s[0] for s in test])
    write_idx_labels(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {out}")


if __name__ == "__main__":
    main()
