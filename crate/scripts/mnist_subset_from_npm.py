"""Build a 10k-digit MNIST subset in IDX format from the `mnist` npm package.

Usage: python3 scripts/mnist_subset_from_npm.py <unpacked npm package dir> <out dir>

The npm package stores each digit class as a flat JSON array of pixel values
scaled to [0, 1] with three decimals. Pixels are mapped back to bytes and the
records are interleaved with a fixed permutation so the file is not sorted by
class.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIZE = 28 * 28


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    records = []
    for digit in range(10):
        data = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // SIZE):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[i * SIZE:(i + 1) * SIZE])
            records.append((px, digit))
    random.Random(20201231).shuffle(records)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(records), 28, 28))
        for px, _ in records:
            f.write(px)
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(records)))
        f.write(bytes(label for _, label in records))
    print(f"wrote {len(records)} records to {out}")


if __name__ == "__main__":
    main()
