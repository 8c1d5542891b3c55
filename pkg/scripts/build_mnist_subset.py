#!/usr/bin/env python3
"""Build the bundled 10k MNIST subset from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist, MIT licensed)
ships 10,000 real MNIST digits as JSON float arrays in [0, 1]. This
script converts them back to 8-bit IDX files: the first 100 examples of
each digit become the held-out test pair, the remaining 9,000 the
training pair. Output is gzipped and byte-deterministic.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist
"""

import gzip
import json
import os
import struct
import sys

import numpy as np

TEST_PER_CLASS = 100


def load_digit(digits_dir, digit):
    with open(os.path.join(digits_dir, f"{digit}.json")) as f:
        flat = np.array(json.load(f)["data"], dtype=np.float64)
    images = np.rint(flat.reshape(-1, 28, 28) * 255.0).astype(np.uint8)
    return images


def idx_images_bytes(images):
    return struct.pack(">IIII", 0x00000803, *images.shape) + images.tobytes()


def idx_labels_bytes(labels):
    return struct.pack(">II", 0x00000801, labels.shape[0]) + labels.tobytes()


def main(digits_dir, out_dir):
    train_images, train_labels = [], []
    test_images, test_labels = [], []
    for digit in range(10):
        images = load_digit(digits_dir, digit)
        test_images.append(images[:TEST_PER_CLASS])
        test_labels.append(np.full(TEST_PER_CLASS, digit, dtype=np.uint8))
        train_images.append(images[TEST_PER_CLASS:])
        train_labels.append(np.full(images.shape[0] - TEST_PER_CLASS, digit,
                                    dtype=np.uint8))

    def interleave(images, labels, seed):
        images = np.concatenate(images)
        labels = np.concatenate(labels)
        order = np.random.default_rng(seed).permutation(images.shape[0])
        return images[order], labels[order]

    train_x, train_y = interleave(train_images, train_labels, seed=0)
    test_x, test_y = interleave(test_images, test_labels, seed=1)

    os.makedirs(out_dir, exist_ok=True)
    outputs = {
        "train-images-idx3-ubyte.gz": idx_images_bytes(train_x),
        "train-labels-idx1-ubyte.gz": idx_labels_bytes(train_y),
        "test-images-idx3-ubyte.gz": idx_images_bytes(test_x),
        "test-labels-idx1-ubyte.gz": idx_labels_bytes(test_y),
    }
    for name, payload in outputs.items():
        path = os.path.join(out_dir, name)
        with open(path, "wb") as f:
            f.write(gzip.compress(payload, mtime=0))
        print(f"wrote {path} ({os.path.getsize(path)} bytes)")
    print(f"train {train_x.shape[0]} examples, test {test_x.shape[0]} examples")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
