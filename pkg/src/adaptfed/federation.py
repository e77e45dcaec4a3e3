"""Round-based federation: cohort sampling, local SGD, aggregation, generator updates.

Four strategies share one round loop:

``adaptfed``
    projections come from the server's hypernetwork; after local training the
    change in each client's projections is pulled back to the generator
    weights and that client's embedding.
``vanilla-tailored``
    every client keeps its own projections; only the shared part is averaged.
``fedavg``
    everything is averaged.
``local-only``
    no communication; each client trains its own copy.

Local training of a cohort runs as stacked (lock-step) SGD over fixed-size
chunks of clients, so results do not depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .datagen import ClientData
from .hypernet import HyperNet, cohort_weights, generate, init_hypernet, pullback, server_update
from .model import (Arch, Batch, ModelParams, SharedParams, evaluate_batch, init_params,
                    loss_and_grad, loss_and_grad_stacked, sgd_step, stack, unstack)
from .numcore import ConfigurationError, NonFiniteError, ProtocolError, make_rng

STRATEGIES = ("adaptfed", "vanilla-tailored", "fedavg", "local-only")
METRICS_SCHEMA_VERSION = 1


@dataclass
class RoundConfig:
    rounds: int = 200
    local_epochs: int = 5
    lr: float = 0.01
    global_lr: float = 0.3
    sample_frac: float = 0.2
    batch_size: int = 32
    weighting: str = "cohort"          # cohort | global
    generator_step: str = "descent"    # descent | literal
    eval_every: int = 10
    seed: int = 0
    workers: int = 1
    chunk: int = 16

    def __post_init__(self):
        if not 0 < self.sample_frac <= 1:
            raise ConfigurationError("sample_frac must lie in (0, 1]")
        if self.lr < 0 or self.global_lr < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigurationError("rounds and local_epochs must be non-negative")
        if self.batch_size < 1 or self.chunk < 1 or self.workers < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size, chunk, workers and eval_every must be >= 1")
        if self.weighting not in ("cohort", "global"):
            raise ConfigurationError(f"unknown weighting {self.weighting!r}")
        if self.generator_step not in ("descent", "literal"):
            raise ConfigurationError(f"unknown generator_step {self.generator_step!r}")


@dataclass
class ServerState:
    strategy: str
    arch: Arch
    xi: SharedParams
    round: int = 0
    shared_p: np.ndarray | None = None             # fedavg
    hypernet: HyperNet | None = None                # adaptfed
    embeddings: np.ndarray | None = None            # adaptfed, (N, D)
    personal_p: list[np.ndarray] | None = None      # vanilla-tailored
    local_models: list[ModelParams] | None = field(default=None, repr=False)  # local-only, client side

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def copy(self) -> "ServerState":
        return replace(
            self,
            xi=self.xi.copy(),
            shared_p=None if self.shared_p is None else self.shared_p.copy(),
            hypernet=None if self.hypernet is None else self.hypernet.copy(),
            embeddings=None if self.embeddings is None else self.embeddings.copy(),
            personal_p=None if self.personal_p is None else [p.copy() for p in self.personal_p],
            local_models=None if self.local_models is None else [m.copy() for m in self.local_models],
        )


def init_server(strategy: str, arch: Arch, num_clients: int, seed: int = 0, embed_dim: int = 32,
                hidden: int = 100, layers: int = 2, rank: int | None = None) -> ServerState:
    """Initial state; every strategy starts from the same model initialisation."""
    base = init_params(arch, make_rng(seed, "init-model"))
    state = ServerState(strategy, arch, base.xi)
    if strategy == "adaptfed":
        state.hypernet = init_hypernet(arch, make_rng(seed, "init-hypernet"), embed_dim, hidden, layers, rank,
                                       offset=base.p)
        state.embeddings = make_rng(seed, "init-embed").standard_normal((num_clients, embed_dim))
    elif strategy == "fedavg":
        state.shared_p = base.p
    elif strategy == "vanilla-tailored":
        state.personal_p = [base.p.copy() for _ in range(num_clients)]
    else:
        state.local_models = [base.copy() for _ in range(num_clients)]
    return state


def client_params(server: ServerState, i: int) -> ModelParams:
    """The model client ``i`` would train/evaluate with at the current round."""
    if server.strategy == "adaptfed":
        return ModelParams(generate(server.hypernet, server.embeddings[i]), server.xi.copy())
    if server.strategy == "fedavg":
        return ModelParams(server.shared_p.copy(), server.xi.copy())
    if server.strategy == "vanilla-tailored":
        return ModelParams(server.personal_p[i].copy(), server.xi.copy())
    return server.local_models[i].copy()


def sample_cohort(num_clients: int, frac: float, seed: int, round_index: int) -> list[int]:
    """``ceil(frac * N)`` distinct clients, uniformly, sorted by id."""
    k = min(num_clients, math.ceil(frac * num_clients - 1e-12))
    if k < 1:
        raise ProtocolError("empty cohort")
    rng = make_rng(seed, "cohort", round_index)
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


# --- local training ----------------------------------------------------------

def _train_chunk(arch: Arch, models: list[ModelParams], data: list[Batch], rngs, cfg: RoundConfig):
    """Lock-step SGD over a chunk of clients; padded samples carry zero weight."""
    S = len(models)
    params = stack(models)
    sizes = [len(b) for b in data]
    width = min(cfg.batch_size, max(sizes))
    steps = max(math.ceil(m / cfg.batch_size) for m in sizes)
    loss_sum = np.zeros(S)
    step_count = np.zeros(S)
    correct = np.zeros(S)
    seen = np.zeros(S)
    for _ in range(cfg.local_epochs):
        orders = [rng.permutation(m) for rng, m in zip(rngs, sizes)]
        for k in range(steps):
            x = np.zeros((S, width, arch.input_dim))
            y = np.zeros((S, width), dtype=np.int64)
            w = np.zeros((S, width))
            for s in range(S):
                idx = orders[s][k * cfg.batch_size:(k + 1) * cfg.batch_size]
                if idx.size:
                    x[s, :idx.size] = data[s].inputs[idx]
                    y[s, :idx.size] = data[s].labels[idx]
                    w[s, :idx.size] = 1.0 / idx.size
            loss, grad, logits = loss_and_grad_stacked(params, arch, x, y, w)
            active = w.sum(axis=1) > 0
            loss_sum += np.where(active, loss, 0.0)
            step_count += active
            correct += ((np.argmax(logits, axis=2) == y) * (w > 0)).sum(axis=1)
            seen += (w > 0).sum(axis=1)
            params = sgd_step(params, grad, cfg.lr)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_loss = np.where(step_count > 0, loss_sum / np.maximum(step_count, 1), np.nan)
        acc = np.where(seen > 0, correct / np.maximum(seen, 1), np.nan)
    return unstack(params), mean_loss, acc


def local_train(arch: Arch, start: dict[int, ModelParams], clients: list[ClientData],
                cfg: RoundConfig, round_index: int):
    """Train every client in ``start`` for ``cfg.local_epochs``; returns dicts keyed by id."""
    ids = sorted(start)
    chunks = [ids[k:k + cfg.chunk] for k in range(0, len(ids), cfg.chunk)]

    def job(chunk):
        return _train_chunk(arch, [start[i] for i in chunk], [clients[i].train for i in chunk],
                            [make_rng(cfg.seed, "batch", round_index, i) for i in chunk], cfg)

    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(job, chunks))
    else:
        results = [job(c) for c in chunks]
    final, losses, accs = {}, {}, {}
    for chunk, (models, loss, acc) in zip(chunks, results):
        for j, i in enumerate(chunk):
            if not np.isfinite(loss[j]) and cfg.local_epochs > 0:
                raise NonFiniteError(f"non-finite loss for client {i} in round {round_index}")
            final[i], losses[i], accs[i] = models[j], float(loss[j]), float(acc[j])
    return final, losses, accs


def _average(trees: dict[int, np.ndarray | SharedParams], weights: dict[int, float], anchor):
    """``anchor + sum_i w_i (tree_i - anchor)``, reduced in client-id order.

    With cohort weights (summing to one) this is the weighted mean of the
    trees; with global weights the missing mass stays on ``anchor``.  An
    unchanged cohort reproduces ``anchor`` bit for bit.
    """
    is_array = isinstance(anchor, np.ndarray)
    acc = np.zeros_like(anchor) if is_array else anchor.map(np.zeros_like)
    for i in sorted(trees):
        w = weights[i]
        if is_array:
            acc = acc + w * (trees[i] - anchor)
        else:
            acc = acc.map(lambda a, t, r, w=w: a + w * (t - r), trees[i], anchor)
    return anchor + acc if is_array else anchor.map(np.add, acc)


def traffic(server: ServerState) -> dict[str, int]:
    """Scalars exchanged with one participating client per round.

    ``personal_down`` is client-specific; ``shared_down`` is the same payload
    for every client (shared layers, plus the low-rank base).
    """
    a = server.arch
    xi = server.xi.size
    if server.strategy == "adaptfed":
        hn = server.hypernet
        shared = xi + (0 if hn.base is None else hn.base.size)
        return {"personal_down": hn.head_width, "shared_down": shared, "up": a.p_size + xi}
    if server.strategy == "fedavg":
        return {"personal_down": 0, "shared_down": a.p_size + xi, "up": a.p_size + xi}
    if server.strategy == "vanilla-tailored":
        return {"personal_down": 0, "shared_down": xi, "up": xi}
    return {"personal_down": 0, "shared_down": 0, "up": 0}


def run_round(server: ServerState, clients: list[ClientData], cfg: RoundConfig):
    """One communication round; returns ``(new_state, train_records)``.

    The input state is not modified.
    """
    n = len(clients)
    round_index = server.round + 1
    sizes = {c.id: c.m for c in clients}
    total = sum(sizes.values())
    cohort = sample_cohort(n, cfg.sample_frac, cfg.seed, round_index)
    new = server.copy()
    new.round = round_index
    start = {i: client_params(server, i) for i in cohort}
    final, losses, accs = local_train(server.arch, start, clients, cfg, round_index)

    if server.strategy != "local-only":
        w = cohort_weights(sizes, cohort, cfg.weighting, total)
        new.xi = _average({i: final[i].xi for i in cohort}, w, server.xi)
    if server.strategy == "fedavg":
        new.shared_p = _average({i: final[i].p for i in cohort}, w, server.shared_p)
    elif server.strategy == "vanilla-tailored":
        for i in cohort:
            new.personal_p[i] = final[i].p
    elif server.strategy == "local-only":
        for i in cohort:
            new.local_models[i] = final[i]
    else:
        sign = -1.0 if cfg.generator_step == "descent" else 1.0
        cot = {i: sign * (final[i].p - start[i].p) for i in cohort}
        new.hypernet, new.embeddings = server_update(
            server.hypernet, server.embeddings, cot, sizes, cfg.global_lr, cfg.weighting, total)

    tx = sum(traffic(server).values())
    records = [{"round": round_index, "client": i, "strategy": server.strategy, "split": "train",
                "loss": losses[i], "acc": accs[i], "tx_scalars": tx} for i in cohort]
    return new, records


# --- evaluation ----------------------------------------------------------------

@dataclass
class EvalResult:
    losses: np.ndarray
    accs: np.ndarray
    weights: np.ndarray

    @property
    def mean_acc(self) -> float:
        return float(self.weights @ self.accs)

    @property
    def mean_loss(self) -> float:
        return float(self.weights @ self.losses)


def evaluate(server: ServerState, clients: list[ClientData], split: str = "test") -> EvalResult:
    """Per-client loss/accuracy with each client's own model; weights ``m_i / S``."""
    losses, accs = [], []
    for c in clients:
        batch = getattr(c, split)
        loss, acc = evaluate_batch(client_params(server, c.id), server.arch, batch)
        losses.append(loss)
        accs.append(acc)
    m = np.array([c.m for c in clients], dtype=np.float64)
    return EvalResult(np.array(losses), np.array(accs), m / m.sum())


def eval_records(server: ServerState, clients: list[ClientData], result: EvalResult,
                 tx_totals: dict[int, int], split: str = "test") -> list[dict]:
    return [{"schema_version": METRICS_SCHEMA_VERSION, "round": server.round, "client": c.id,
             "strategy": server.strategy, "split": split, "loss": float(result.losses[k]),
             "acc": float(result.accs[k]), "tx_scalars": int(tx_totals.get(c.id, 0))}
            for k, c in enumerate(clients)]


def run_experiment(server: ServerState, clients: list[ClientData], cfg: RoundConfig, sink=None):
    """``cfg.rounds`` rounds with evaluation at round 0, every ``eval_every`` rounds and at the end.

    Evaluation records go to ``sink`` (a callable taking one dict) in order.
    Returns ``(final_state, eval_records, summary_rows)``.
    """
    records, summary = [], []
    tx_totals: dict[int, int] = {}

    def emit(state):
        res = evaluate(state, clients)
        recs = eval_records(state, clients, res, tx_totals)
        for r in recs:
            records.append(r)
            if sink is not None:
                sink(r)
        summary.append({"round": state.round, "strategy": state.strategy,
                        "mean_acc": res.mean_acc, "mean_loss": res.mean_loss})

    emit(server)
    for c in range(1, cfg.rounds + 1):
        server, train = run_round(server, clients, cfg)
        for r in train:
            tx_totals[r["client"]] = tx_totals.get(r["client"], 0) + r["tx_scalars"]
        if c % cfg.eval_every == 0 or c == cfg.rounds:
            emit(server)
    return server, records, summary


# --- novel clients -------------------------------------------------------------

def embedding_loss_and_grad(server: ServerState, z: np.ndarray, batch: Batch):
    """Client loss and its gradient with respect to the embedding, ``phi`` and ``xi`` fixed."""
    p = generate(server.hypernet, z)
    loss, grad = loss_and_grad(ModelParams(p, server.xi), server.arch, batch)
    _, gz = pullback(server.hypernet, z, grad.p)
    return loss, gz


def embedding_prior_mean(server: ServerState) -> np.ndarray:
    """Mean of the trained embedding table."""
    return server.embeddings.mean(axis=0)


def adapt_new_client(server: ServerState, client: ClientData, epochs: int, lr: float,
                     batch_size: int = 32, seed: int = 0, z0: np.ndarray | None = None):
    """Fit only a fresh embedding for an unseen client; returns ``(z, test accuracy per epoch)``.

    The trajectory starts with the accuracy before any update (epoch 0).
    """
    if server.strategy != "adaptfed":
        raise ProtocolError("novel-client adaptation needs an adaptfed server")
    if client.m == 0:
        raise ProtocolError("empty client shard")
    z = embedding_prior_mean(server) if z0 is None else np.array(z0, dtype=np.float64)

    def acc_of(zv):
        return evaluate_batch(ModelParams(generate(server.hypernet, zv), server.xi), server.arch,
                              client.test)[1]

    traj = [acc_of(z)]
    for e in range(epochs):
        rng = make_rng(seed, "adapt", client.id, e)
        order = rng.permutation(client.m)
        for k in range(0, client.m, batch_size):
            _, gz = embedding_loss_and_grad(server, z, client.train.subset(order[k:k + batch_size]))
            z = z - lr * gz
        traj.append(acc_of(z))
    return z, traj


# --- persistence -----------------------------------------------------------------

def state_entries(server: ServerState) -> list[tuple[str, np.ndarray]]:
    """Server-resident arrays (client-side local models are excluded)."""
    entries = [(f"xi.{n}", a) for n, a in zip(SharedParams.names(), server.xi.arrays())]
    if server.shared_p is not None:
        entries.append(("p", server.shared_p))
    if server.hypernet is not None:
        entries += [(f"phi.{k}", a) for k, a in enumerate(server.hypernet.arrays())]
        entries.append(("embeddings", server.embeddings))
    if server.personal_p is not None:
        entries += [(f"personal.{i}", p) for i, p in enumerate(server.personal_p)]
    return entries


def state_meta(server: ServerState) -> dict:
    meta = {"strategy": server.strategy, "round": server.round, "arch": server.arch.__dict__}
    if server.hypernet is not None:
        hn = server.hypernet
        meta["hypernet"] = {"embed_dim": hn.embed_dim, "hidden": hn.weights[0].shape[1],
                            "layers": hn.depth, "rank": hn.rank}
    if server.personal_p is not None:
        meta["num_clients"] = len(server.personal_p)
    return meta


def serialize_state(server: ServerState) -> bytes:
    return checkpoint.encode(state_entries(server), state_meta(server))


def deserialize_state(blob: bytes) -> ServerState:
    arrays, meta = checkpoint.decode(blob)
    arch = Arch(**meta["arch"])
    xi = SharedParams(*(arrays[f"xi.{n}"] for n in SharedParams.names()))
    state = ServerState(meta["strategy"], arch, xi, round=int(meta["round"]))
    if "p" in arrays:
        state.shared_p = arrays["p"]
    if "hypernet" in meta:
        h = meta["hypernet"]
        hn = init_hypernet(arch, make_rng(0, "shape-only"), h["embed_dim"], h["hidden"], h["layers"], h["rank"])
        state.hypernet = hn.with_arrays([arrays[f"phi.{k}"] for k in range(len(hn.arrays()))])
        state.embeddings = arrays["embeddings"]
    if "num_clients" in meta:
        state.personal_p = [arrays[f"personal.{i}"] for i in range(meta["num_clients"])]
    if state.strategy == "local-only":
        state.local_models = None
    return state
