"""Time the numpy and numba kernels on IE-sized batches.

    python3 benchmarks/bench_kernels.py [--batch 256] [--repeat 20]

Each kernel is run once untimed first so numba compilation is excluded.
Outputs of the two backends are compared before timing.
"""

import argparse
import timeit

import numpy as np

from immunekit import _kernels


def cases(batch, gen):
    x = gen.uniform(size=(batch, 784))
    c = np.clip(x + gen.normal(0, 0.1, x.shape), 0, 1)
    g = gen.normal(size=x.shape) * (gen.random(x.shape) < 0.7)
    h = gen.normal(size=x.shape)
    img = gen.uniform(size=(28, 28)) * (gen.random((28, 28)) > 0.7)
    img2 = np.clip(img + gen.normal(0, 0.1, img.shape), 0, 1)
    return {
        "clip_to_ball": (x, c, 64 / 255, 0.0, 1.0),
        "sign_step": (x, g, 48 / 255, c, 64 / 255, 0.0, 1.0),
        "compute_mask": (g, h),
        "uiqi": (img, img2, 8, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        print("numba not installed; nothing to compare")
        return
    gen = np.random.default_rng(0)
    print(f"{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  agree")
    for name, a in cases(args.batch, gen).items():
        fn_np, fn_nb = _kernels.NUMPY_IMPL[name], _kernels.NUMBA_IMPL[name]
        r_np, r_nb = fn_np(*a), fn_nb(*a)
        agree = np.allclose(r_np, r_nb, rtol=0, atol=1e-12)
        t_np = min(timeit.repeat(lambda: fn_np(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn_nb(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<14}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x  {agree}")


if __name__ == "__main__":
    main()
