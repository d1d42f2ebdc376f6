"""Build the 3/5/8 MNIST subset used by the desk-scale experiments.

Source: the `mnist` npm package (MIT, 10,000 MNIST digits stored as
per-class JSON arrays of pixel/255 values). Fetch it with `npm pack mnist`
and point this script at the unpacked `package/src/digits` directory.

Writes standard big-endian IDX files: 500 train + 200 test images per class,
taken in package order.
"""

import argparse
import json
import struct
from pathlib import Path

CLASSES = (3, 5, 8)
TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 200
PIXELS = 28 * 28


def load_class(digits_dir: Path, digit: int):
    flat = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
    n = len(flat) // PIXELS
    return [
        bytes(round(v * 255) for v in flat[i * PIXELS:(i + 1) * PIXELS])
        for i in range(n)
    ]


def write_idx(out: Path, prefix: str, images, labels):
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)

    per_class = {d: load_class(args.digits_dir, d) for d in CLASSES}
    for d, imgs in per_class.items():
        if len(imgs) < TRAIN_PER_CLASS + TEST_PER_CLASS:
            raise SystemExit(f"digit {d}: only {len(imgs)} samples")

    # interleave classes so that a prefix of the file is still balanced
    train_x, train_y, test_x, test_y = [], [], [], []
    for i in range(TRAIN_PER_CLASS):
        for d in CLASSES:
            train_x.append(per_class[d][i])
            train_y.append(d)
    for i in range(TEST_PER_CLASS):
        for d in CLASSES:
            test_x.append(per_class[d][TRAIN_PER_CLASS + i])
            test_y.append(d)

    write_idx(args.out_dir, "train", train_x, train_y)
    write_idx(args.out_dir, "t10k", test_x, test_y)
    print(f"train={len(train_x)} test={len(test_x)} -> {args.out_dir}")


if __name__ == "__main__":
    main()
