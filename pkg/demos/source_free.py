"""Source-free adaptation to a rotated and rescaled target domain.

The server pre-trains on labelled source data, using the feature moments
each client reports to restyle its batches.  Then the source data is
dropped and clients adapt on unlabelled inputs: confident pseudo-labels,
distillation towards a stochastic-weight-averaged teacher, and averaging of
the students across clients after every round.

    python demos/source_free.py [--seed 0] [--angle 0.9]
"""

import argparse

from adaptfed import Arch, SyntheticTaskSpec
from adaptfed import sfda

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--angle", type=float, default=0.9, help="rotation applied to feature pairs (radians)")
args = parser.parse_args()

cfg = sfda.SfdaConfig()
spec = SyntheticTaskSpec(seed=args.seed, num_clients=10, shift="none")
pool, clients, styles = sfda.make_sfda_task(spec, 2000, sfda.make_domain_shift(spec.input_dim, args.seed,
                                                                                args.angle))
pretrained = sfda.pretrain_source(pool, styles, Arch(), cfg, args.seed)
phase = sfda.start_adaptation(pretrained, Arch(), clients, cfg)
source_arrays = [pool.inputs, pool.labels]
del pool

kept = {}
phase = sfda.run_adaptation(phase, cfg, args.seed,
                            sink=lambda r: kept.setdefault(r["round"], []).append(r["pseudo_kept_frac"]))
print(f"pseudo-labels kept: round 1 {sum(kept[1]) / len(kept[1]):.2f}, "
      f"round {cfg.rounds} {sum(kept[cfg.rounds]) / len(kept[cfg.rounds]):.2f}")
for which in ("pretrained", "students", "teachers"):
    print(f"{which:10s} target accuracy {sfda.adaptation_accuracy(phase, which):.3f}")
print("adaptation state reaches source data:", sfda.holds_reference(phase, source_arrays))
