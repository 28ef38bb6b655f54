"""Convert the 10,000 MNIST digits shipped in the npm ``mnist`` package to gzip IDX.

The JSON stores pixels as value/255 rounded to three decimals, fine enough to
recover the original bytes exactly. Digits are grouped by class in the source
and kept in that order.

Usage:
    curl -sO https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz
    python tools/make_mnist10k.py mnist-1.1.0.tgz
"""

import json
import sys
import tarfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from oscmask.data import write_idx  # noqa: E402

images, labels = [], []
with tarfile.open(sys.argv[1]) as tar:
    for digit in range(10):
        values = np.array(json.load(tar.extractfile(f"package/src/digits/{digit}.json"))["data"])
        values = values.reshape(-1, 28, 28)
        u8 = np.rint(values * 255).astype(np.uint8)
        assert np.array_equal(np.round(u8 / 255, 3), values), "lossy pixel encoding"
        images.append(u8)
        labels += [digit] * len(u8)
images = np.concatenate(images)
labels = np.array(labels, dtype=np.uint8)
out = Path(__file__).resolve().parents[1] / "src" / "oscmask" / "datasets"
write_idx(images, labels, out / "mnist10k-images-idx3-ubyte.gz", out / "mnist10k-labels-idx1-ubyte.gz")
print(images.shape, np.bincount(labels))
