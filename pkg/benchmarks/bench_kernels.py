"""Compare the compiled and numpy kernel backends.

Times one forward/backward training step at the default model size, the
Beta log-density used by the mixture E-step, and a full training run in a
subprocess per backend. Usage::

    python3 benchmarks/bench_kernels.py [--repeat 200] [--skip-train]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from crowdloss import kernels

TRAIN_SNIPPET = """
import time
from crowdloss.synth import SynthConfig, generate_synthetic
from crowdloss.train import TrainConfig, train
ds = generate_synthetic(SynthConfig(num_samples=2000, seed=0))
t = time.perf_counter()
train(TrainConfig(mode="multitask_lc"), ds)
print(time.perf_counter() - t)
"""


def step_inputs(rng, B=64, D=8, H=32, A=8, M=2):
    return dict(
        X=rng.standard_normal((B, D)), W1=rng.standard_normal((D, H)) * 0.3,
        b1=rng.standard_normal(H) * 0.1, W2=rng.standard_normal((A, H, M)) * 0.3,
        b2=rng.standard_normal((A, M)) * 0.1, T=rng.dirichlet(np.ones(M), size=(B, A)),
    )


def training_step(k, X, W1, b1, W2, b2, T):
    Hh = k.dense_tanh_forward(X, W1, b1)
    P = k.heads_forward(Hh, W2, b2)
    _, dlogits = k.heads_objective(P, T, 0.1, 0.1)
    _, _, dH = k.heads_backward(Hh, W2, dlogits)
    return k.dense_tanh_backward(X, W1, Hh, dH)


def bench(fn, repeat):
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return float(np.median(times)) * 1e6


def train_seconds(backend):
    env = dict(os.environ, CROWDLOSS_PURE_PYTHON="1" if backend == "python" else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--skip-train", action="store_true")
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    inputs = step_inputs(rng)
    losses = rng.beta(2.0, 5.0, size=16000)
    backends = kernels.available_backends()

    results = {}
    for name in backends:
        k = kernels.get_backend(name)
        results[name] = {
            "training step (B=64, H=32, A=8)": bench(lambda: training_step(k, **inputs), args.repeat),
            "beta_log_pdf (n=16000)": bench(lambda: k.beta_log_pdf(losses, 2.0, 5.0), args.repeat),
        }
        if not args.skip_train:
            results[name]["train 5 epochs, N=2000 (s)"] = train_seconds(name) * 1e6

    print(f"{'kernel':<34}" + "".join(f"{b:>14}" for b in backends)
          + ("      speedup" if len(backends) == 2 else ""))
    for label in results[backends[0]]:
        vals = [results[b][label] for b in backends]
        unit = "s" if label.endswith("(s)") else "us"
        cells = "".join(f"{v / 1e6 if unit == 's' else v:>12.1f}{unit:>2}" for v in vals)
        speed = f"{vals[-1] / vals[0]:>12.2f}x" if len(vals) == 2 else ""
        print(f"{label:<34}{cells}{speed}")


if __name__ == "__main__":
    main()
