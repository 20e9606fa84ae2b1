"""Time the compiled and numpy vote kernels on the same inputs.

Usage: python benchmarks/bench_kernels.py [--size 100] [--channels 4] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from htprior import hough, kernels


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=100)
    ap.add_argument("--channels", type=int, default=4)
    ap.add_argument("--density", type=float, default=0.1, help="fraction of nonzero pixels")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    mask = hough.vote_mask_for(args.size, args.size)
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(args.size, args.size, args.channels)).astype(np.float32)
    img[rng.uniform(size=img.shape) > args.density] = 0
    hmap = rng.uniform(size=(mask.grid.n_rho, mask.grid.n_theta, args.channels)).astype(np.float32)
    R = mask.grid.n_rho

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"{args.size}x{args.size}x{args.channels}, grid {R}x{mask.grid.n_theta}, "
          f"density {args.density}, best of {args.repeat}")
    print(f"{'kernel':8s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in [("scatter", lambda b: kernels.vote_scatter(img, mask.bin_of, R, 1.0, backend=b)),
                     ("gather", lambda b: kernels.vote_gather(hmap, mask.bin_of, 1.0, backend=b))]:
        times = [bench(lambda b=b: fn(b), args.repeat) for b in backends]
        row = f"{name:8s}" + "".join(f"{t:10.3f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)
    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the numpy backend was timed")


if __name__ == "__main__":
    main()
