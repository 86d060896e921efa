"""Build MNIST IDX files from the 10,000 digits bundled in the npm ``mnist`` package.

    python scripts/fetch_mnist.py --out data/mnist [--tarball mnist-1.1.0.tgz]

Without ``--tarball`` the package is fetched with ``npm pack mnist``. Pixel
intensities in the package are rounded to three decimals; they are mapped back
to bytes with ``round(v * 255)``.
"""

import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from bdfl.learning import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--tarball")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            name = subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                                  capture_output=True, text=True).stdout.strip().splitlines()[-1]
            tarball = Path(tmp) / name
        images, labels = [], []
        with tarfile.open(tarball) as tf:
            for digit in range(10):
                member = tf.extractfile(f"package/src/digits/{digit}.json")
                flat = np.asarray(json.load(member)["data"], dtype=np.float64)
                imgs = np.rint(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
                images.append(imgs)
                labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    # fixed interleaving so files do not come sorted by class
    order = np.random.default_rng(20240101).permutation(len(labels))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist-10k-images-idx3-ubyte.gz", images[order])
    write_idx(out / "mnist-10k-labels-idx1-ubyte.gz", labels[order])
    print(f"wrote {len(labels)} digits to {out}")


if __name__ == "__main__":
    main()
