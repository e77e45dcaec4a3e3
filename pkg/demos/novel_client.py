"""A client that joins after training only has to learn a 32-number embedding.

We train adaptfed briefly, then for each label group build an unseen client
and fit its embedding with the generator and shared layers frozen.  The
starting point is the mean of the trained embedding table.

    python demos/novel_client.py [--seed 0] [--lr 1.0]
"""

import argparse

import numpy as np

from adaptfed import Arch, RoundConfig, SyntheticTaskSpec, adapt_new_client, init_server, make_synthetic, \
    run_experiment
from adaptfed.datagen import make_client
from adaptfed.federation import evaluate

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--lr", type=float, default=1.0)
args = parser.parse_args()

spec = SyntheticTaskSpec(seed=args.seed, num_clients=20)
clients = make_synthetic(spec)
server = init_server("adaptfed", Arch(), len(clients), args.seed)
server, _, _ = run_experiment(server, clients, RoundConfig(rounds=40, local_epochs=3, sample_frac=0.5,
                                                           seed=args.seed, eval_every=40))
accs = evaluate(server, clients).accs
for group in range(spec.groups):
    trained = np.mean([a for c, a in zip(clients, accs) if c.group == group])
    newcomer = make_client(spec, spec.num_clients + group, group, stream="task-novel")
    _, traj = adapt_new_client(server, newcomer, epochs=5, lr=args.lr, seed=args.seed)
    print(f"group {group}: trained clients {trained:.3f}; newcomer by epoch "
          + " ".join(f"{a:.3f}" for a in traj))
