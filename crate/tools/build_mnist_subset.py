#!/usr/bin/env python3
"""Cut the bundled MNIST subsets out of the original IDX files.

The original IDX files ship inside the `mnist-data` npm package (1.2.6):

  npm pack mnist-data@1.2.6
  python3 tools/build_mnist_subset.py mnist-data-1.2.6.tgz data/mnist

Writes gzipped IDX files holding the first 10,000 training digits and the
full 10,000-digit test set. Headers are rewritten with the new counts; the
pixel and label bytes are copied unchanged.
"""
import gzip
import struct
import sys
import tarfile

TRAIN_COUNT = 10_000


def cut(tar, name, count, out_path):
    raw = tar.extractfile(f"package/data/{name}").read()
    magic, total = struct.unpack(">II", raw[:8])
    if magic == 0x00000803:
        rows, cols = struct.unpack(">II", raw[8:16])
        count = min(count, total)
        body = raw[16 : 16 + count * rows * cols]
        header = struct.pack(">IIII", magic, count, rows, cols)
    elif magic == 0x00000801:
        count = min(count, total)
        body = raw[8 : 8 + count]
        header = struct.pack(">II", magic, count)
    else:
        raise SystemExit(f"{name}: unexpected magic {magic:#010x}")
    with gzip.GzipFile(out_path, "wb", mtime=0) as f:
        f.write(header + body)
    print(f"{out_path}: {count} records")


def main(tgz, out_dir):
    with tarfile.open(tgz) as tar:
        cut(tar, "train-images-idx3-ubyte", TRAIN_COUNT, f"{out_dir}/train-images-idx3-ubyte.gz")
        cut(tar, "train-labels-idx1-ubyte", TRAIN_COUNT, f"{out_dir}/train-labels-idx1-ubyte.gz")
        cut(tar, "t10k-images-idx3-ubyte", 10_000, f"{out_dir}/t10k-images-idx3-ubyte.gz")
        cut(tar, "t10k-labels-idx1-ubyte", 10_000, f"{out_dir}/t10k-labels-idx1-ubyte.gz")


if __name__ == "__main__":
    main(*sys.argv[1:3])
