"""Train the compared configurations over several seeds and check the expected orderings.

    python3 scripts/model_orderings.py --seeds 0 1 2
    python3 scripts/model_orderings.py --noise-sigma 1.0 --interference-scale 1.0 --out runs/heavy
"""

import argparse
import json
import logging
from pathlib import Path

from rinq.experiments import ExperimentManifest, run_orderings

HERE = Path(__file__).parent


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--manifest", default=HERE / "manifests" / "orderings_desk.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--interference-scale", type=float)
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    m = ExperimentManifest.load(args.manifest)
    if args.epochs is not None:
        m.training.epochs = args.epochs
    if args.noise_sigma is not None:
        m.corruption.noise_sigma = args.noise_sigma
    if args.interference_scale is not None:
        m.corruption.interference_scale = args.interference_scale
    if args.out:
        m.output_dir = args.out

    summary = run_orderings(m, args.seeds)
    for name, vals in summary["losses"].items():
        print(f"{name:<14}" + "".join(f"{v:10.1f}" for v in vals))
    for o in summary["orderings"]:
        margins = ", ".join(f"{100 * x:+.1f}%" for x in o["margins"])
        print(f"{o['better']} < {o['worse']}: median margin {100 * o['median_margin']:+.1f}% ({margins}) "
              f"{'holds' if o['holds'] else 'FAILS'}")
    print(json.dumps({"manifest": summary["manifest"], "out": m.output_dir}))


if __name__ == "__main__":
    main()
