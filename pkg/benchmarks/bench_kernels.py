"""Benchmark the compiled kernel core against the numpy fallback.

Times the four hot kernels on attention-sized inputs, then a full packed
forward pass under each backend. Run after building the extension:

    python setup.py build_ext --inplace
    python benchmarks/bench_kernels.py
"""

import os
import subprocess
import sys
import time

import numpy as np

from nanonet._kernels import fallback

try:
    from nanonet._kernels import _core as compiled
except ImportError:
    compiled = None


def timeit(fn, *args, repeat=20):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels():
    rng = np.random.default_rng(0)
    t, d_head = 512, 16
    scores = rng.standard_normal((t, t))
    scores[rng.random((t, t)) < 0.3] = -np.inf
    probs_f = fallback.softmax_rows_fwd(scores)
    grad = rng.standard_normal((t, t))
    x_rope = rng.standard_normal((t, d_head))
    ang = rng.uniform(0, 7, (t, d_head // 2))
    cos, sin = np.cos(ang), np.sin(ang)
    x_gelu = rng.standard_normal((t, 4 * d_head))
    lengths = [64] * 8
    seq_ids = np.repeat(np.arange(8), lengths).astype(np.int64)
    positions = np.concatenate([np.arange(n) for n in lengths]).astype(np.int64)

    clean = rng.standard_normal((t, t))
    mask = np.where(rng.random((t, t)) < 0.3, -np.inf, 0.0)
    np.fill_diagonal(mask, 0.0)
    cases = [
        ("softmax_rows_fwd  512x512", "softmax_rows_fwd", (scores,)),
        ("masked_softmax    512x512", "masked_softmax_fwd", (clean, mask)),
        ("softmax_rows_bwd  512x512", "softmax_rows_bwd", (probs_f, grad)),
        ("gelu_fwd          512x64", "gelu_fwd", (x_gelu,)),
        ("gelu_bwd          512x64", "gelu_bwd", (x_gelu, x_gelu)),
        ("rope_fwd          512x16", "rope_fwd", (x_rope, cos, sin)),
        ("build_mask w=128  T=512", "build_mask", (seq_ids, positions, 128)),
    ]

    print(f"{'kernel':28s} {'fallback':>12s} {'compiled':>12s} {'speedup':>9s}")
    for label, name, args in cases:
        t_fallback = timeit(getattr(fallback, name), *args)
        if compiled is None:
            print(f"{label:28s} {t_fallback * 1e3:10.3f}ms {'n/a':>12s}")
            continue
        t_compiled = timeit(getattr(compiled, name), *args)
        print(
            f"{label:28s} {t_fallback * 1e3:10.3f}ms {t_compiled * 1e3:10.3f}ms "
            f"{t_fallback / t_compiled:8.2f}x"
        )


FORWARD_SNIPPET = r"""
import time
import numpy as np
from nanonet import encoder as E

cfg = E.EncoderConfig(n_layers=4, d_model=32, n_heads=2, d_ff=64, n_classes=4,
                      token_dropout=0.0, hidden_dropout=0.0)
model = E.EncoderModel.init(cfg, seed=0)
rng = np.random.default_rng(0)
seqs = [[256] + [int(v) for v in rng.integers(0, 256, 63)] for _ in range(8)]
batch = E.pack_sequences(seqs)
E.forward(model, batch)  # warm up
best = float("inf")
for _ in range(10):
    t0 = time.perf_counter()
    E.forward(model, batch)
    best = min(best, time.perf_counter() - t0)
print(f"{best * 1e3:.2f}")
"""


def bench_forward():
    print("\nfull packed forward (4 layers, d=32, 8x64 tokens), per backend:")
    for label, env_extra in (("fallback", {"NANONET_PURE": "1"}), ("compiled", {})):
        if label == "compiled" and compiled is None:
            print(f"  {label:9s} n/a (extension not built)")
            continue
        env = dict(os.environ, **env_extra)
        out = subprocess.run(
            [sys.executable, "-c", FORWARD_SNIPPET],
            capture_output=True, text=True, env=env,
        )
        print(f"  {label:9s} {out.stdout.strip()}ms")


if __name__ == "__main__":
    if compiled is None:
        print("note: compiled core not built; showing fallback only\n")
    bench_kernels()
    bench_forward()
