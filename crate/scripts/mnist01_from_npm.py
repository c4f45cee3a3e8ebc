"""Build the MNIST 0/1 desk fixture from the `mnist` npm package.

The package (MIT, github.com/cazala/mnist) ships 10k MNIST digits as JSON
arrays of pixel intensities rounded to three decimals. This script keeps the
zeros and ones, restores byte intensities, shuffles with a fixed seed and
writes gzipped IDX files: 2000 training images and the remainder as test.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist01_from_npm.py package/src/digits data/mnist01
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 2000


def dump(out, prefix, rows):
    imgs = out / f"{prefix}-images-idx3-ubyte.gz"
    labs = out / f"{prefix}-labels-idx1-ubyte.gz"
    with gzip.GzipFile(imgs, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))
    with gzip.GzipFile(labs, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(rows)))
        f.write(bytes(label for _, label in rows))


def main(src, dst):
    src, out = Path(src), Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for digit in (0, 1):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            rows.append((px, digit))
    random.Random(20240601).shuffle(rows)
    dump(out, "train", rows[:TRAIN])
    dump(out, "t10k", rows[TRAIN:])
    print(f"train={TRAIN} test={len(rows) - TRAIN}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
