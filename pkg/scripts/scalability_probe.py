"""Time a fixed number of sweeps on random matrices of growing nnz."""

import argparse
import time

import numpy as np

from dcpf.element_dist import ElementDistribution, sample_element
from dcpf.inference import FitConfig, fit
from dcpf.sparse_data import SparseCountMatrix


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=2000)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--sweeps", type=int, default=5)
    ap.add_argument("--kind", default="geo")
    ap.add_argument("--nnz", default="10000,100000,1000000")
    args = ap.parse_args()

    prev = None
    for nnz in (int(x) for x in args.nnz.split(",")):
        rng = np.random.default_rng(0)
        cells = rng.choice(args.dim * args.dim, nnz, replace=False)
        y = sample_element(ElementDistribution.from_p("geo", 0.5), rng, size=nnz)
        data = SparseCountMatrix(args.dim, args.dim, cells // args.dim, cells % args.dim, y)
        t0 = time.perf_counter()
        fit(data, FitConfig(K=args.k, kind=args.kind, max_iters=args.sweeps, tol=0.0, burn_in=2))
        t = time.perf_counter() - t0
        growth = "" if prev is None else f"\tgrowth/linear={t / prev[1] / (nnz / prev[0]):.2f}"
        print(f"nnz={nnz}\t{t:.3f}s{growth}")
        prev = (nnz, t)


if __name__ == "__main__":
    main()
