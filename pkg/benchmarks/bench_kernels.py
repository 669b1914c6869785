"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from drprobe import kernels


def cases(rng):
    hidden = rng.standard_normal((64, 256, 768)).astype(np.float32)
    lengths = rng.integers(1, 257, 64)
    mask = (np.arange(256)[None] < lengths[:, None]).astype(np.uint8)
    scores = rng.standard_normal(12 * (3072 + 768))
    counts = np.zeros(scores.size, dtype=np.int64)
    logits = rng.standard_normal((200_000, 5))
    labels = rng.integers(0, 5, 200_000)
    a, b = rng.integers(0, 2, (2, 1_000_000))
    return {
        "pool_hidden mean (64x256x768)": lambda m: m.pool_hidden(hidden, mask, kernels.MEAN),
        "pool_hidden last (64x256x768)": lambda m: m.pool_hidden(hidden, mask, kernels.LAST_TOKEN),
        "accumulate_active (46k scores)": lambda m: m.accumulate_active(scores, 0.1, counts),
        "argmax_correct (200k x 5)": lambda m: m.argmax_correct(logits, labels),
        "paired_moments (1M)": lambda m: m.paired_moments(a, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases(rng).items():
        times = []
        for b in backends:
            mod = kernels.get_backend(b)
            fn(mod)
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{name:34s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
