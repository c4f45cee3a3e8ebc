"""Build the ten-class MNIST desk fixture from the `mnist` npm package.

Same source and encoding as mnist01_from_npm.py: every digit class, shuffled
with a fixed seed, 3000 training images and 500 test images.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist10_from_npm.py package/src/digits data/mnist10
"""
import json
import random
import sys
from pathlib import Path

from mnist01_from_npm import dump

TRAIN, TEST = 3000, 500


def main(src, dst):
    src, out = Path(src), Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            rows.append((px, digit))
    random.Random(20240602).shuffle(rows)
    dump(out, "train", rows[:TRAIN])
    dump(out, "t10k", rows[TRAIN:TRAIN + TEST])
    print(f"train={TRAIN} test={TEST} of {len(rows)}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
