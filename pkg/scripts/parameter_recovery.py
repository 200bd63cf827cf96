"""Fit the encoder on the state loss alone and compare alpha/(alpha+beta) with the generator's."""

import argparse
import json

from ein.experiments import parameter_recovery, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--alpha", type=float, default=0.2)
    ap.add_argument("--beta", type=float, default=0.6)
    args = ap.parse_args()

    target = args.alpha / (args.alpha + args.beta)
    results = [parameter_recovery(s, args.count, args.alpha, args.beta) for s in range(args.seeds)]
    for r in results:
        print(json.dumps(r.__dict__))
    mean, std = summarize([r.share for r in results])
    fitted, _ = summarize([r.predicted_share for r in results])
    print(f"target share {target:.3f}")
    print(f"learned rate share {mean:.3f} +- {std:.3f}  (|error| {abs(mean - target):.3f})")
    print(f"share implied by fitted stage distributions {fitted:.3f}")


if __name__ == "__main__":
    main()
