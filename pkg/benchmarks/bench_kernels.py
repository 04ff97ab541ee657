"""Time the numba and numpy im2col/col2im kernels and one training epoch.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Outputs are checked for bit-for-bit agreement before anything is timed.
"""

import argparse
import json
import os
import timeit

import numpy as np

from sewlab import kernels
from sewlab.data import gen_synthetic
from sewlab.nn import TrainConfig, fit, make_cnn

SHAPES = [(32, 3, 16, 16), (32, 8, 16, 16), (128, 16, 16, 16)]


def best_of(fn, repeat):
    fn()  # warm-up (and numba compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat, k=3):
    rows = []
    rng = np.random.default_rng(0)
    for shape in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = kernels.im2col_numpy(x, k)
        if not np.array_equal(cols, kernels.im2col_numba(x, k)):
            raise SystemExit(f"im2col mismatch at {shape}")
        g = rng.standard_normal(cols.shape).astype(np.float32)
        if not np.array_equal(kernels.col2im_numpy(g, shape, k), kernels.col2im_numba(g, shape, k)):
            raise SystemExit(f"col2im mismatch at {shape}")
        for name, np_fn, nb_fn in (
            ("im2col", lambda: kernels.im2col_numpy(x, k), lambda: kernels.im2col_numba(x, k)),
            ("col2im", lambda: kernels.col2im_numpy(g, shape, k),
             lambda: kernels.col2im_numba(g, shape, k)),
        ):
            t_np, t_nb = best_of(np_fn, repeat), best_of(nb_fn, repeat)
            rows.append({"kernel": name, "shape": list(shape), "numpy_ms": 1e3 * t_np,
                         "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})
    return rows


def bench_epoch():
    ds = gen_synthetic(n_per_class=200, seed=0)
    out = {}
    params = {}
    for flag in ("0", "1"):
        os.environ["SEWLAB_NUMBA"] = flag
        net = make_cnn(ds.image_shape, ds.num_classes, (8, 16), seed=0)
        cfg = TrainConfig(epochs=1, batch_size=32, base_lr=0.01, seed=0)
        fit(net.clone(), ds.images[:64], ds.labels[:64], cfg)  # warm-up
        t = timeit.default_timer()
        fit(net, ds.images, ds.labels, cfg)
        out[kernels.backend_name()] = timeit.default_timer() - t
        params[flag] = [p.data.copy() for p in net.parameters()]
    same = all(np.array_equal(a, b) for a, b in zip(params["0"], params["1"]))
    return out, same


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = bench_kernels(args.repeat)
    print(f"{'kernel':8} {'shape':>18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:8} {str(tuple(r['shape'])):>18} {r['numpy_ms']:10.3f} "
              f"{r['numba_ms']:10.3f} {r['speedup']:8.2f}")
    epoch, same = bench_epoch()
    print(f"\none training epoch (800 images): numpy {epoch['numpy']:.2f}s, "
          f"numba {epoch['numba']:.2f}s; trained weights identical: {same}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "epoch_seconds": epoch, "identical": same}, fh, indent=2)


if __name__ == "__main__":
    main()
