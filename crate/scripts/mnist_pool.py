"""Write the 5000-image MNIST subset shipped with mlxtend as an image-pool CSV.

usage: python scripts/mnist_pool.py [out.csv]   (default data/mnist_pool.csv)
"""
import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist_pool.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    header = "label," + ",".join(f"f{j}" for j in range(x.shape[1]))
    rows = np.column_stack([y, x]).astype(np.int64)
    np.savetxt(out, rows, fmt="%d", delimiter=",", header=header, comments="")
    print(f"wrote {len(rows)} images to {out}")


if __name__ == "__main__":
    main()
