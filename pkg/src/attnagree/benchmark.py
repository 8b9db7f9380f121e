"""Timing comparison between the compiled kernels and the numpy fallback.

Run as: python -m attnagree.benchmark [--repeats N]
"""

import argparse
import time

import numpy as np

from . import _kernels_py as kpy

try:
    from . import _kernels as kc
except ImportError:
    kc = None


def _time(fn, repeats: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(596, 64))
    gain = rng.normal(size=64)
    bias = rng.normal(size=64)
    gy = rng.normal(size=(596, 64))
    _, mean, inv_std = kpy.layer_norm_fwd(x, gain, bias, 1e-6)
    att = rng.normal(size=(8, 596, 596))
    gatt = rng.normal(size=(8, 596, 596))
    p = kpy.softmax_fwd(att)
    big = rng.normal(size=(256, 1024))
    gbig = rng.normal(size=(256, 1024))
    small = rng.normal(size=(52, 128))
    vol = rng.normal(size=(24, 48, 48))

    def adam_case(mod):
        param = big.copy()
        m = np.zeros_like(param)
        v = np.zeros_like(param)
        return lambda: mod.adam_update(param, gbig, m, v, 1, 1e-3, 0.9, 0.999, 1e-8, 1e-4)

    return [
        ("layer_norm_fwd 596x64", lambda mod: lambda: mod.layer_norm_fwd(x, gain, bias, 1e-6)),
        ("layer_norm_bwd 596x64", lambda mod: lambda: mod.layer_norm_bwd(gy, x, gain, mean, inv_std)),
        ("gelu_fwd 256x1024", lambda mod: lambda: mod.gelu_fwd(big)),
        ("gelu_bwd 256x1024", lambda mod: lambda: mod.gelu_bwd(gbig, big)),
        ("gelu_fwd 52x128", lambda mod: lambda: mod.gelu_fwd(small)),
        ("softmax_fwd 8x596x596", lambda mod: lambda: mod.softmax_fwd(att)),
        ("softmax_bwd 8x596x596", lambda mod: lambda: mod.softmax_bwd(gatt, p)),
        ("adam_update 256x1024", adam_case),
        ("trilinear 24x48x48 -> 16x32x32",
         lambda mod: lambda: mod.trilinear_resample(vol, 16, 32, 32, 1.5, 1.5, 1.5)),
    ]


def run(repeats: int = 20) -> list[dict]:
    rows = []
    for name, make in _cases():
        py_s = _time(make(kpy), repeats)
        row = {"kernel": name, "python_ms": py_s * 1e3}
        if kc is not None:
            c_s = _time(make(kc), repeats)
            row["compiled_ms"] = c_s * 1e3
            row["speedup"] = py_s / c_s
        rows.append(row)
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args(argv)

    rows = run(args.repeats)
    if kc is None:
        print("compiled extension not built; timing numpy fallback only")
    header = f"{'kernel':38s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for row in rows:
        comp = f"{row['compiled_ms']:12.3f}" if "compiled_ms" in row else " " * 12
        spd = f"{row['speedup']:7.2f}x" if "speedup" in row else " " * 8
        print(f"{row['kernel']:38s} {row['python_ms']:10.3f} {comp} {spd}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
