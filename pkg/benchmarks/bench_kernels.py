"""Compare the numba and pure-numpy paths of the pixel kernels.

    python benchmarks/bench_kernels.py [--repeats N]

Reports the median wall time per call for face rendering (ellipse
rasterization) and SSIM (separable Gaussian filtering), checks that both paths
agree bit for bit, and prints the speedup.  The first numba call is timed
separately because it includes compilation.
"""

import argparse
import os
import time

import numpy as np


def _timed(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times)), out


def _with_numba(enabled, fn, repeats):
    old = os.environ.get("TALKFACE_DISABLE_NUMBA")
    os.environ["TALKFACE_DISABLE_NUMBA"] = "0" if enabled else "1"
    try:
        return _timed(fn, repeats)
    finally:
        if old is None:
            del os.environ["TALKFACE_DISABLE_NUMBA"]
        else:
            os.environ["TALKFACE_DISABLE_NUMBA"] = old


def main():
    from talkface import metrics, render

    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    ident = render.make_identity(3)
    rng = np.random.default_rng(0)
    a = rng.random((96, 96, 3))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)

    cases = {
        "render_face": lambda: render.render_face(ident, 0.6, 1.5, -2.0, 4.0),
        "ssim_96x96x3": lambda: metrics.ssim(a, b),
    }
    t = time.perf_counter()
    for fn in cases.values():
        _with_numba(True, fn, 1)
    print(f"numba first-call (compile or cache load): {time.perf_counter() - t:.3f} s")
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  identical")
    for name, fn in cases.items():
        t_np, out_np = _with_numba(False, fn, args.repeats)
        t_nb, out_nb = _with_numba(True, fn, args.repeats)
        same = np.array_equal(np.asarray(out_np), np.asarray(out_nb))
        print(f"{name:<16}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
