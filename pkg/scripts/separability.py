"""Backbone-only vs EIN accuracy on two synthetic regimes with weak stance features."""

import argparse

from ein.experiments import separability, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--count", type=int, default=2000)
    ap.add_argument("--sigma", type=float, default=0.3)
    ap.add_argument("--lam", type=float, default=0.5)
    args = ap.parse_args()

    results = []
    for seed in range(args.seeds):
        r = separability(seed, args.count, args.sigma, args.lam)
        results.append(r)
        print(f"seed {seed}: backbone {r.backbone_acc:.4f}  EIN {r.ein_acc:.4f}  ({r.seconds:.0f}s)", flush=True)
    bb = summarize([r.backbone_acc for r in results])
    ein = summarize([r.ein_acc for r in results])
    print(f"backbone {bb[0]:.4f} +- {bb[1]:.4f}")
    print(f"EIN      {ein[0]:.4f} +- {ein[1]:.4f}")
    print(f"margin   {100 * (ein[0] - bb[0]):+.2f} points")


if __name__ == "__main__":
    main()
