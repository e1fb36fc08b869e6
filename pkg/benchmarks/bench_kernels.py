"""Compare the numba and numpy kernel paths, plus one end-to-end training step.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Kernel timings call the ``_np`` and ``_nb`` functions directly. The training
step is timed in two subprocesses, one with ADVKWS_DISABLE_NUMBA=1.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from advkws import _kernels as K

STEP_SNIPPET = """
import timeit
import numpy as np
from advkws.datagen import CorpusSpec, MixtureWeights, collate, generate_corpus, sample_batch
from advkws.model import ModelConfig, init_params
from advkws.training import LossConfig, compute_gradients, init_head
import advkws._kernels as K
corpus = generate_corpus(CorpusSpec(counts=(32, 32, 32, 32)))
batch = collate(sample_batch(corpus, MixtureWeights(), 32, np.random.default_rng(0)))
cfg = ModelConfig()
params = init_params(cfg, 0)
head = init_head(sum(cfg.tap_dims().values()), np.random.default_rng(1), np.float32)
run = lambda: compute_gradients(params, head, batch, LossConfig(), config=cfg)
run()
print(K.USE_NUMBA, min(timeit.repeat(run, number=1, repeat={repeat})))
"""


def best(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def step_time(disable, repeat):
    env = dict(os.environ, ADVKWS_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True).stdout.split()
    return out[0] == "True", float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'case':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for B, L, N, T in [(32, 100, 16, 8), (32, 100, 256, 8), (32, 100, 192, 32), (1, 1000, 64, 32)]:
        s = rng.standard_normal((B, L, N)).astype(np.float32)
        g = rng.standard_normal((B, L, N)).astype(np.float32)
        b = rng.standard_normal((N, T)).astype(np.float32)
        np.testing.assert_allclose(K.time_filter_np(s, b), K.time_filter_nb(s, b), rtol=1e-4, atol=1e-4)
        for name, f_np, f_nb in [
            ("time_filter", lambda: K.time_filter_np(s, b), lambda: K.time_filter_nb(s, b)),
            ("time_filter_grad", lambda: K.time_filter_grad_np(g, s, b),
             lambda: K.time_filter_grad_nb(g, s, b)),
        ]:
            a, c = best(f_np, args.repeat), best(f_nb, args.repeat)
            print(f"{name + f' B={B} L={L} N={N} T={T}':40s} {a * 1e3:10.2f} {c * 1e3:10.2f} {a / c:8.2f}")

    x = rng.standard_normal((256, 400))
    start = rng.integers(0, 200, 256)
    stop = start + rng.integers(1, 200, 256)
    a = best(lambda: K.masked_argmax_np(x, start, stop), args.repeat)
    c = best(lambda: K.masked_argmax_nb(x, start, stop), args.repeat)
    print(f"{'masked_argmax 256x400':40s} {a * 1e3:10.2f} {c * 1e3:10.2f} {a / c:8.2f}")

    _, t_np = step_time(True, args.repeat)
    used, t_nb = step_time(False, args.repeat)
    label = "training step (default model, B=32)"
    print(f"{label:40s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}"
          + ("" if used else "  (numba path not active!)"))


if __name__ == "__main__":
    main()
