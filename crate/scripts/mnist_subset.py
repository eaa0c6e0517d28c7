#!/usr/bin/env python3
"""Build a 10k-image MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON arrays of pixel/255 values
(three decimals), which round back to the original uint8 pixels exactly.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset.py package/src/digits data/mnist-10k
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(digits_dir: str, out_dir: str) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = json.loads(Path(digits_dir, f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for start in range(0, len(flat), 784):
            images.append(bytes(round(v * 255) for v in flat[start:start + 784]))
            labels.append(digit)
    # interleave classes so that prefixes are class-balanced
    order = list(range(len(labels)))
    random.Random(0).shuffle(order)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(order), 28, 28))
        for i in order:
            f.write(images[i])
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(order)))
        f.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
