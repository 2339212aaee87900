#!/usr/bin/env python3
"""Build the desk-scale MNIST subset (IDX, gzipped) from the `mnist` npm package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist-desk

Per class, samples [0, 200) go to train, [200, 250) to validation and
[250, 300) to test. Rows are interleaved by class so every prefix is balanced.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

SPLITS = [("train", 0, 200), ("val", 200, 250), ("test", 250, 300)]
SIDE = 28


def main(src: Path, dst: Path) -> None:
    digits = [json.loads((src / f"{d}.json").read_text())["data"] for d in range(10)]
    dst.mkdir(parents=True, exist_ok=True)
    for split, lo, hi in SPLITS:
        images, labels = bytearray(), bytearray()
        for i in range(lo, hi):
            for d, raw in enumerate(digits):
                px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
                images.extend(min(255, max(0, round(v * 255))) for v in px)
                labels.append(d)
        n = len(labels)
        with gzip.GzipFile(dst / f"{split}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, n, SIDE, SIDE) + bytes(images))
        with gzip.GzipFile(dst / f"{split}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, n) + bytes(labels))
        print(f"{split}: {n} samples")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
