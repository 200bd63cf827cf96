"""Backbone-only accuracy across feature noise levels, used to pick sigma for the separability run."""

import argparse

from ein.experiments import separability


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.2, 0.3, 0.5, 1.0])
    ap.add_argument("--count", type=int, default=2000)
    args = ap.parse_args()
    for s in args.sigmas:
        r = separability(0, args.count, s)
        print(f"sigma {s:.2f}: backbone {r.backbone_acc:.4f}  EIN {r.ein_acc:.4f}", flush=True)


if __name__ == "__main__":
    main()
