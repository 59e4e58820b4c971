"""Convert the digit JSON files of the `mnist` npm package into gzipped IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python mnist_from_npm.py package/src/digits data/mnist

Each JSON file holds flattened 28x28 images scaled to [0, 1]; pixels are
mapped back to bytes with round(v * 255). Rows are interleaved in a fixed
pseudo-random order so that any prefix is class balanced in expectation.
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: str, dst: str) -> None:
    rows = []
    for digit in range(10):
        data = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        if len(data) % 784:
            raise SystemExit(f"{digit}.json: length {len(data)} is not a multiple of 784")
        for i in range(0, len(data), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in data[i : i + 784])
            rows.append((digit, pixels))
    random.Random(0).shuffle(rows)

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    n = len(rows)
    images = struct.pack(">IIII", 0x803, n, 28, 28) + b"".join(p for _, p in rows)
    labels = struct.pack(">II", 0x801, n) + bytes(d for d, _ in rows)
    for name, payload in [("images-idx3-ubyte.gz", images), ("labels-idx1-ubyte.gz", labels)]:
        with open(out / name, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
                gz.write(payload)
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    main(sys.argv[1], sys.argv[2])
