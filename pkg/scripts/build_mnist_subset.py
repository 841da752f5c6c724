"""Build the desk-scale MNIST subset under data/mnist/ as gzip IDX files.

The full MNIST archives are not always reachable. The mlxtend wheel on PyPI
ships 5000 genuine MNIST training digits (500 per class, sorted by label);
this script fetches that wheel with pip, interleaves the classes with a
fixed permutation and writes a stratified 4000/1000 train/test split.

    python scripts/build_mnist_subset.py [--out data/mnist]

If the real archives are available, drop them into the output directory
instead; the loader reads either.
"""

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from condlr.data import write_idx  # noqa: E402

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_csv(wheel=None):
    if wheel is None:
        tmp = Path(tempfile.mkdtemp())
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                        "-q", "-d", str(tmp), "mlxtend==0.24.0"], check=True)
        wheel = next(tmp.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "mnist"))
    ap.add_argument("--wheel", default=None, help="use a local mlxtend wheel")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=20231)
    args = ap.parse_args()

    x, y = fetch_csv(args.wheel)
    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[: args.test_per_class])
        train_idx.append(idx[args.test_per_class:])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, parts in (("train", train_idx), ("t10k", test_idx)):
        idx = rng.permutation(np.concatenate(parts))
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", x[idx].reshape(-1, 28, 28))
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", y[idx])
        print(f"{prefix}: {idx.size} samples -> {out}")


if __name__ == "__main__":
    main()
