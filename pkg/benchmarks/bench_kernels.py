"""Compare the compiled kernels with the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow the default model (batch 32, 4 heads, 69 tokens, d_model 64,
16 mixture components on an 8x8 grid). Prints one line per kernel with the
best-of-N time for each backend and the speed-up.
"""

import argparse
import timeit

import numpy as np

from vif.kernels import _pykernels as py

try:
    from vif.kernels import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    B, H, T, D, K = 32, 4, 69, 64, 16
    x = rng.normal(size=(B * H * T, T))
    mask = np.tril(np.ones((T, T), dtype=np.uint8))
    mask[:64, :64] = 1
    y, _ = py.masked_softmax_fwd(x, mask)
    g = rng.normal(size=x.shape)
    h = rng.normal(size=(B * T, D))
    gamma, beta = rng.normal(size=D), rng.normal(size=D)
    _, xhat, rstd = py.layer_norm_fwd(h, gamma, beta, 1e-5)
    P = y.reshape(B, H * T, T)
    bias = rng.random((B, T))
    vis = mask.astype(bool)
    out, rs, _ = py.inject_fwd(P, bias, 0.5, vis)
    centers, spreads = rng.random((B, K, 2)), rng.uniform(0.05, 0.5, (B, K))
    r, c = np.divmod(np.arange(64), 8)
    grid = np.stack([(r + 0.5) / 8, (c + 0.5) / 8], axis=1)
    resp = py.gmm_render_fwd(centers, spreads, grid)
    flat = rng.normal(size=B * T * 4 * D)
    _, t = py.gelu_fwd(flat)
    return {
        "masked_softmax_fwd": (x, mask),
        "softmax_bwd": (y, g),
        "layer_norm_fwd": (h, gamma, beta, 1e-5),
        "layer_norm_bwd": (rng.normal(size=h.shape), xhat, rstd, gamma),
        "inject_fwd": (P, bias, 0.5, vis),
        "inject_bwd": (rng.normal(size=P.shape), out, rs, bias, vis),
        "gmm_render_fwd": (centers, spreads, grid),
        "gmm_render_bwd": (rng.normal(size=resp.shape), resp, centers, spreads, grid),
        "gelu_fwd": (flat,),
        "gelu_bwd": (rng.normal(size=flat.shape), flat, t),
    }


def best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    opts = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'cython ms':>11}{'speed-up':>10}")
    for name, args in cases(rng).items():
        t_py = best(getattr(py, name), args, opts.repeat)
        if cy is None:
            print(f"{name:<20}{t_py * 1e3:>10.3f}{'n/a':>11}{'':>10}")
            continue
        t_cy = best(getattr(cy, name), args, opts.repeat)
        print(f"{name:<20}{t_py * 1e3:>10.3f}{t_cy * 1e3:>11.3f}{t_py / t_cy:>9.2f}x")


if __name__ == "__main__":
    main()
