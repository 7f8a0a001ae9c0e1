#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package into IDX files.

Usage: npm_mnist_to_idx.py <package-dir> <out-dir> [test-fraction]

The npm package ships ~10k real MNIST digits as JSON arrays of 28x28 floats.
The first (1 - test-fraction) of each class becomes the train split, the rest
the test split. Output files use the standard IDX names.
"""
import json
import os
import struct
import sys


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    test_frac = float(sys.argv[3]) if len(sys.argv) > 3 else 0.2
    os.makedirs(out, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        raw = json.load(open(os.path.join(pkg, "src", "digits", f"{digit}.json")))["data"]
        count = len(raw) // 784
        n_test = int(round(count * test_frac))
        for i in range(count):
            px = [min(255, max(0, int(round(v * 255)))) for v in raw[i * 784:(i + 1) * 784]]
            key = "train" if i < count - n_test else "t10k"
            splits[key][0].extend(px)
            splits[key][1].append(digit)
    for key, (images, labels) in splits.items():
        n = len(labels)
        write_idx(os.path.join(out, f"{key}-images-idx3-ubyte"), 0x803, [n, 28, 28], images)
        write_idx(os.path.join(out, f"{key}-labels-idx1-ubyte"), 0x801, [n], labels)
        print(key, n)


if __name__ == "__main__":
    main()
