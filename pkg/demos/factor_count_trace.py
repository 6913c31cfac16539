"""Follow the number of active factors per cluster through a chain.

Prints, at regular intervals, the active-column counts of the filled
clusters together with the prior means of the slab and spike column
variances. A chain whose slab mean falls below the spike mean has swapped
the roles of the two mixture parts; its active-column counts then read as
``H`` minus the number of real factors.

    python3 demos/factor_count_trace.py [p] [T] [iters] [seed]
"""

import sys

from mf2a.model import Hyperparams
from mf2a.sampler import ChainConfig, run_chain
from mf2a.simulate import gen_study1, standardize


def main(p=30, T=200, iters=2000, seed=2):
    data, _ = standardize(*gen_study1(p=p, T=T, seed=seed))
    hyper = Hyperparams(iters=iters, burnin=0, thin=1)
    trace, _ = run_chain(data, ChainConfig(hyper=hyper, seed=seed))
    print(f"{'iter':>6} {'K+':>3}  {'slab':>8} {'spike':>8}  active columns")
    for r in trace[:: max(1, iters // 30)]:
        slab, spike = r.b_theta / (hyper.a_theta - 1), r.b_0 / (hyper.a0 - 1)
        swapped = "  <- swapped" if slab < spike else ""
        print(f"{r.iter:6d} {r.K_plus:3d}  {slab:8.4f} {spike:8.4f}  "
              f"{r.indicator.sum(axis=1).tolist()}{swapped}")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:]))
