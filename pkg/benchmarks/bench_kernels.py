"""Time every kernel under the numpy fallback and the compiled extension.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from subforge import kernels


def cases():
    rng = np.random.default_rng(0)
    scores = rng.random((256, 688)).astype(np.float32)
    flat = scores.reshape(1, -1)
    blocks = scores.reshape(-1, 4)
    a = rng.integers(0, 256, 1 << 16, dtype=np.uint8).tobytes()
    b = rng.integers(0, 256, 1 << 16, dtype=np.uint8).tobytes()
    corpus = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    return {
        "splitmix64_stream 1M": lambda k: k.splitmix64_stream(42, 1 << 20),
        "fisher_yates_prefix 128/100k": lambda k: k.fisher_yates_prefix(100_000, 128, 7),
        "fnv1a64 1 MiB": lambda k: k.fnv1a64(corpus),
        "prune_lowest per_row 256x688": lambda k: k.prune_lowest(scores, 344),
        "prune_lowest per_layer 176k": lambda k: k.prune_lowest(flat, flat.shape[1] // 2),
        "prune_lowest 2:4 blocks": lambda k: k.prune_lowest(blocks, 2),
        "popcount_and_or 64 KiB": lambda k: k.popcount_and_or(a, b),
        "popcount_xor 64 KiB": lambda k: k.popcount_xor(a, b),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.available_backends()
    names = list(backends)
    print(f"{'kernel':<32}" + "".join(f"{n + ' ms':>12}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases().items():
        best = {}
        for name, mod in backends.items():
            number = 1
            while timeit.timeit(lambda: fn(mod), number=number) < 0.05:
                number *= 2
            best[name] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
        row = f"{label:<32}" + "".join(f"{best[n] * 1e3:>12.3f}" for n in names)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:>9.1f}x"
        print(row)
    if "cython" not in backends:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
