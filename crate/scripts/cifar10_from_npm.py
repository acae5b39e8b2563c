"""Rebuild the CIFAR-10 binary batches from the tfjs-cifar10 npm package.

The package stores each batch as a 10000x1024 RGB PNG (one row per image,
pixels in row-major order) plus JSON label lists. The binary format wants one
label byte followed by the red, green and blue planes of each image.

    npm pack tfjs-cifar10@1.1.1 && tar xzf tfjs-cifar10-1.1.1.tgz
    python3 scripts/cifar10_from_npm.py package /root/data/cifar-10-batches-bin
"""

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

IMAGES_PER_BATCH = 10000
PLANE = 32 * 32


def convert(png: Path, labels: list, out: Path) -> None:
    pixels = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
    if pixels.shape != (IMAGES_PER_BATCH, PLANE, 3):
        raise ValueError(f"{png}: unexpected shape {pixels.shape}")
    if len(labels) != IMAGES_PER_BATCH:
        raise ValueError(f"{png}: {len(labels)} labels")
    planes = pixels.transpose(0, 2, 1).reshape(IMAGES_PER_BATCH, 3 * PLANE)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    records.tofile(out)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("package", type=Path, help="unpacked npm package directory")
    parser.add_argument("out", type=Path, help="output directory for the .bin batches")
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    train = json.loads((args.package / "train_lables.json").read_text())
    test = json.loads((args.package / "test_lables.json").read_text())
    for i in range(5):
        chunk = train[i * IMAGES_PER_BATCH : (i + 1) * IMAGES_PER_BATCH]
        convert(args.package / f"data_batch_{i + 1}.png", chunk, args.out / f"data_batch_{i + 1}.bin")
    convert(args.package / "test_batch.png", test, args.out / "test_batch.bin")

    first = np.fromfile(args.out / "data_batch_1.bin", dtype=np.uint8).reshape(-1, 3 * PLANE + 1)
    means = first[:, 1:].reshape(-1, 3, PLANE).mean(axis=(0, 2)) / 255
    print("class counts", np.bincount(first[:, 0], minlength=10).tolist(), "channel means", means.round(3).tolist())


if __name__ == "__main__":
    main()
