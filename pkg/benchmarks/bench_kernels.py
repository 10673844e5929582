"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Shapes follow the default desk configuration (16 channels on a 40x96 grid).
Each kernel is also checked for agreement before it is timed.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from v2xfuse import kernels


def cases(rng):
    C, H, W = 16, 40, 96
    xp = np.pad(rng.normal(size=(C, H, W)), ((0, 0), (1, 1), (1, 1)))
    k = rng.normal(size=(C, 3, 3))
    g = rng.normal(size=(C, H, W))
    px = rng.uniform(-1, W, size=(H, W * 8))
    py = rng.uniform(-1, H, size=(H, W * 8))
    gs = rng.normal(size=(C, H, W * 8))
    cols = rng.normal(size=(C, 3, 3, H, W))

    def boxes(n):
        return np.column_stack([rng.uniform(-20, 20, (n, 2)), rng.uniform(1.5, 4.6, (n, 2)), rng.uniform(-3, 3, n)])

    a, b = boxes(60), boxes(60)
    return {
        "im2col 3x3": lambda be: kernels.im2col(xp, 3, 3, H, W, backend=be),
        "col2im 3x3": lambda be: kernels.col2im(cols, H + 2, W + 2, backend=be),
        "depthwise fwd": lambda be: kernels.depthwise_forward(xp, k, H, W, backend=be),
        "depthwise bwd": lambda be: kernels.depthwise_backward(xp, k, g, backend=be),
        "bilinear fwd": lambda be: kernels.bilinear_forward(g, px, py, backend=be),
        "bilinear bwd": lambda be: kernels.bilinear_backward(g, px, py, gs, backend=be),
        "rotated IoU 60x60": lambda be: kernels.rotated_iou_matrix(a, b, backend=be),
    }


def _same(x, y):
    if isinstance(x, tuple):
        return all(_same(p, q) for p, q in zip(x, y))
    return np.allclose(x, y, atol=1e-10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results here as well")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels unavailable; only the Python fallback can be timed", file=sys.stderr)
    results = []
    print(f"{'kernel':<20}" + "".join(f"{b + ' ms':>14}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        outs = {b: fn(b) for b in backends}
        if len(backends) > 1 and not _same(outs["cython"], outs["python"]):
            raise SystemExit(f"{name}: backends disagree")
        row = {"kernel": name}
        for b in backends:
            number = 1 if b == "python" and "IoU" in name else 3
            row[b] = min(timeit.repeat(lambda: fn(b), number=number, repeat=args.repeat)) / number * 1e3
        line = f"{name:<20}" + "".join(f"{row[b]:>14.3f}" for b in backends)
        if len(backends) > 1:
            row["speedup"] = row["python"] / row["cython"]
            line += f"{row['speedup']:>9.1f}x"
        print(line)
        results.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"backend_default": kernels.BACKEND, "results": results}, fh, indent=1)


if __name__ == "__main__":
    main()
