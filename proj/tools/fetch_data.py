#!/usr/bin/env python3
"""Download datasets into the on-disk layout read by the amr loader.

    <root>/<name>/manifest.json
    <root>/<name>/{train,test}-{images,labels}.idx

This is the only component that touches the network. MNIST falls back to the
10k-digit copy bundled in the `mnist` npm package when the usual hosts are
unreachable (split 9000 train / 1000 test).
"""

import argparse
import gzip
import io
import json
import struct
import sys
import tarfile
import urllib.request
from pathlib import Path

import numpy as np

SOURCES = {
    "mnist": [
        "https://storage.googleapis.com/cvdf-datasets/mnist/",
        "https://ossci-datasets.s3.amazonaws.com/mnist/",
        "http://yann.lecun.com/exdb/mnist/",
    ],
    "kmnist": ["http://codh.rois.ac.jp/kmnist/dataset/kmnist/"],
}
IDX_FILES = {
    "train-images.idx": "train-images-idx3-ubyte.gz",
    "train-labels.idx": "train-labels-idx1-ubyte.gz",
    "test-images.idx": "t10k-images-idx3-ubyte.gz",
    "test-labels.idx": "t10k-labels-idx1-ubyte.gz",
}
SVHN = "http://ufldl.stanford.edu/housenumbers/"
MNIST_NPM = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"


def fetch(url, timeout=60):
    with urllib.request.urlopen(url, timeout=timeout) as r:
        return r.read()


def fnv1a64(path):
    h = 0xCBF29CE484222325
    data = Path(path).read_bytes()
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return "fnv1a64:%016x" % h


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.tobytes())


def write_manifest(out, name, shape, splits, note):
    channels, height, width = shape
    manifest = {
        "name": name,
        "format": "idx",
        "channels": channels,
        "height": height,
        "width": width,
        "num_classes": 10,
        "source": note,
        "splits": {},
        "checksums": {},
    }
    for split, (images, labels) in splits.items():
        img_file, lbl_file = f"{split}-images.idx", f"{split}-labels.idx"
        write_idx(out / img_file, images)
        write_idx(out / lbl_file, labels)
        manifest["splits"][split] = {"images": img_file, "labels": lbl_file, "count": int(len(labels))}
        for f in (img_file, lbl_file):
            manifest["checksums"][f] = fnv1a64(out / f)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def parse_idx(raw):
    magic, = struct.unpack(">I", raw[:4])
    ndim = magic & 0xFF
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    return np.frombuffer(raw[4 + 4 * ndim:], dtype=np.uint8).reshape(dims)


def fetch_idx_family(name, out):
    for base in SOURCES[name]:
        try:
            arrays = {k: parse_idx(gzip.decompress(fetch(base + v))) for k, v in IDX_FILES.items()}
        except Exception as e:  # noqa: BLE001 - try the next mirror
            print(f"  {base}: {e}", file=sys.stderr)
            continue
        splits = {
            "train": (arrays["train-images.idx"], arrays["train-labels.idx"]),
            "test": (arrays["test-images.idx"], arrays["test-labels.idx"]),
        }
        write_manifest(out, name, (1, 28, 28), splits, base)
        return True
    return False


def fetch_mnist_npm(out, seed=0):
    raw = fetch(MNIST_NPM, timeout=120)
    images, labels = [], []
    with tarfile.open(fileobj=io.BytesIO(raw), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            data = np.asarray(json.load(member)["data"], dtype=np.float64).reshape(-1, 28, 28)
            images.append(np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8))
            labels.append(np.full(len(data), digit, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_test = len(labels) // 10
    splits = {
        "train": (images[n_test:], labels[n_test:]),
        "test": (images[:n_test], labels[:n_test]),
    }
    write_manifest(out, "mnist", (1, 28, 28), splits, MNIST_NPM)


def fetch_svhn(out):
    from scipy.io import loadmat

    splits = {}
    for split, fname in (("train", "train_32x32.mat"), ("test", "test_32x32.mat")):
        mat = loadmat(io.BytesIO(fetch(SVHN + fname, timeout=600)))
        images = np.transpose(mat["X"], (3, 0, 1, 2))  # (N, H, W, C)
        labels = mat["y"].reshape(-1) % 10  # label 10 means digit 0
        splits[split] = (images, labels)
    write_manifest(out, "svhn", (3, 32, 32), splits, SVHN)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="data")
    ap.add_argument("--dataset", action="append", default=None,
                    help="mnist, kmnist or svhn (repeatable)")
    args = ap.parse_args()
    root = Path(args.root)
    failed = False
    for name in args.dataset or ["mnist"]:
        out = root / name
        out.mkdir(parents=True, exist_ok=True)
        print(f"fetching {name} -> {out}")
        try:
            if name == "mnist":
                if not fetch_idx_family("mnist", out):
                    print("  falling back to the npm copy (10k digits)")
                    fetch_mnist_npm(out)
            elif name == "kmnist":
                if not fetch_idx_family("kmnist", out):
                    raise RuntimeError("no kmnist mirror reachable")
            elif name == "svhn":
                fetch_svhn(out)
            elif name in ("spiral", "dsprites", "mnist_attr"):
                print(f"  {name} is synthesised at load time; nothing to fetch")
            else:
                raise RuntimeError(f"unknown dataset '{name}'")
        except Exception as e:  # noqa: BLE001
            print(f"  failed: {e}", file=sys.stderr)
            failed = True
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
