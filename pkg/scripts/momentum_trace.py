"""Per-epoch trace of the mean residual, its cosine activation and the momentum.

With a long enough score phase the momentum settles at cos(pi/2 * mu).
"""

import argparse

import numpy as np

from adacs.losses import cosine_activation
from adacs.synthetic import SynthConfig, generate_dataset
from adacs.training import TrainConfig, run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--count", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--warmup", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = generate_dataset(SynthConfig(size=args.size, amplitude=args.size / 12,
                                        nuisance_radius=max(1, args.size // 10), seed=args.seed), args.count)
    cfg = TrainConfig(epochs=args.epochs, warmup=args.warmup, width=4, depth=2, seed=args.seed)
    hist = run_training(cfg, data["train"], data["val"]).history
    mu, m = hist.column("mu"), hist.column("m")
    print(f"{'epoch':>5} {'mu':>10} {'cos':>10} {'m':>10}")
    for i in range(len(mu)):
        print(f"{i:5d} {mu[i]:10.6f} {cosine_activation(mu[i]):10.6f} {m[i]:10.6f}")
    tail = mu[-10:].mean()
    print(f"trailing mu {tail:.6f}: |m - cos| = {abs(m[-1] - cosine_activation(tail)):.2e}")
    return 0 if np.isfinite(m).all() else 2


if __name__ == "__main__":
    raise SystemExit(main())
