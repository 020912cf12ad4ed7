"""Iterations per second under memory parallelism k = 1, 2, 4 (process backend).

Each trainer processes the same local batch size, so ideal scaling keeps
iterations/sec constant while events/sec grows k-fold.
"""
import argparse
import os

from tgpar.config import TrainConfig
from tgpar.engine import run_training
from tgpar.synth import SynthConfig, generate


def measure(g, k, epochs, backend):
    cfg = TrainConfig(k=k, local_batch=200, d_mem=100, d_time=100, d_static=100,
                      epochs=epochs * k, backend=backend, lr_scaling="none")
    rec = run_training(cfg, g, evaluate=False)
    return rec.iters_per_sec * k * cfg.local_batch


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--events", type=int, default=20000)
    ap.add_argument("--epochs", type=float, default=1.0)
    ap.add_argument("--backend", default="process")
    args = ap.parse_args()
    print(f"cpus: {os.cpu_count()}")
    g = generate(SynthConfig(users=2000, items=500, events=args.events))
    base = None
    for k in (1, 2, 4):
        ev = measure(g, k, args.epochs, args.backend)
        base = base or ev
        print(f"k={k}: {ev:9.0f} events/s  efficiency {ev / base / k:.2f}")


if __name__ == "__main__":
    main()
