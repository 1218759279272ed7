"""Captured energy and winning-index agreement of SVD-compressed matching versus rank.

    python3 scripts/compression_sweep.py --n-reps 1000 --ranks 5 10 25 50 100
"""

import argparse

import numpy as np

from rinq.dictionary import (
    CompressionBasis,
    GridSpec,
    attach_compression,
    build_grid,
    generate_dictionary,
    match_batch,
    project,
)
from rinq.seqsim import make_schedule, simulate_batch


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n-reps", type=int, default=1000)
    p.add_argument("--ranks", type=int, nargs="+", default=[5, 10, 25, 50, 100])
    p.add_argument("--queries", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    sched = make_schedule(args.n_reps, seed=args.seed)
    d = generate_dictionary(build_grid(GridSpec()), sched)
    rng = np.random.default_rng(args.seed)
    t1 = np.exp(rng.uniform(np.log(20), np.log(4400), args.queries))
    t2 = np.minimum(np.exp(rng.uniform(np.log(3), np.log(2900), args.queries)), t1)
    queries = simulate_batch(t1, t2, sched)
    full, _ = match_batch(queries, d)

    _, s, vh = np.linalg.svd(d.entries, full_matrices=False)
    print(f"{'rank':>5} {'energy':>10} {'agreement':>10}")
    for r in args.ranks:
        basis = CompressionBasis(vh[:r].copy(), s)
        attach_compression(d, basis)
        idx, _ = match_batch(project(queries, basis), d)
        print(f"{r:5d} {basis.energy_fraction():10.6f} {100 * np.mean(idx == full):9.2f}%")


if __name__ == "__main__":
    main()
