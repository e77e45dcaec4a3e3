"""Synthetic federated classification tasks and non-IID partitioners.

Client ids are 0-based throughout.  Partitioners assign every sample of a
labelled pool to one client by a per-sample categorical draw, so per-client
sample counts always add up to the pool size.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .model import Batch
from .numcore import ConfigurationError, make_rng, sample_dirichlet, sample_uniform

MAX_REDRAWS = 100


@dataclass
class LabeledPool:
    inputs: np.ndarray
    labels: np.ndarray
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.coarse_labels is not None:
            self.coarse_labels = np.asarray(self.coarse_labels, dtype=np.int64)
            fine_to_coarse = {}
            for f, c in zip(self.labels.tolist(), self.coarse_labels.tolist()):
                if fine_to_coarse.setdefault(f, c) != c:
                    raise ConfigurationError(f"fine class {f} maps to several coarse classes")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx) -> "LabeledPool":
        idx = np.asarray(idx, dtype=np.int64)
        coarse = None if self.coarse_labels is None else self.coarse_labels[idx]
        return LabeledPool(self.inputs[idx], self.labels[idx], coarse)

    def to_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["label", "coarse_label"] + [f"x{j}" for j in range(self.inputs.shape[1])])
        for k in range(len(self)):
            coarse = "" if self.coarse_labels is None else int(self.coarse_labels[k])
            w.writerow([int(self.labels[k]), coarse] + [repr(float(v)) for v in self.inputs[k]])
        return buf.getvalue()


@dataclass
class PartitionPlan:
    assignments: np.ndarray    # (S_total,) client id per sample
    num_clients: int

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.num_clients)

    def indices(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == client)

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "num_clients": self.num_clients,
                           "clients": {str(i): self.indices(i).tolist() for i in range(self.num_clients)}})

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        obj = json.loads(text)
        n = int(obj["num_clients"])
        total = sum(len(v) for v in obj["clients"].values())
        assignments = np.full(total, -1, dtype=np.int64)
        for cid, idx in obj["clients"].items():
            assignments[np.asarray(idx, dtype=np.int64)] = int(cid)
        if np.any(assignments < 0):
            raise ConfigurationError("partition JSON does not cover every sample")
        return cls(assignments, n)

    def class_histogram(self, labels: np.ndarray) -> np.ndarray:
        """``(N, K)`` per-client class counts."""
        k = int(labels.max()) + 1
        hist = np.zeros((self.num_clients, k), dtype=np.int64)
        np.add.at(hist, (self.assignments, labels), 1)
        return hist


def _assign(labels: np.ndarray, class_probs, rng: np.random.Generator) -> np.ndarray:
    """Categorical draw per sample; ``class_probs[c]`` is a length-N vector."""
    out = np.empty(labels.size, dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        p = class_probs[int(c)]
        cdf = np.cumsum(p)
        cdf /= cdf[-1]
        out[idx] = np.minimum(np.searchsorted(cdf, rng.random(idx.size), side="right"), p.size - 1)
    return out


def _with_redraws(pool: LabeledPool, n: int, rng, draw_probs, min_samples: int) -> PartitionPlan:
    if n < 1:
        raise ConfigurationError("need at least one client")
    if n * min_samples > len(pool):
        raise ConfigurationError(f"{len(pool)} samples cannot give {n} clients {min_samples} each")
    for _ in range(MAX_REDRAWS):
        plan = PartitionPlan(_assign(pool.labels, draw_probs(), rng), n)
        if plan.counts.min() >= min_samples:
            return plan
    raise ConfigurationError(f"a client stayed below {min_samples} samples after {MAX_REDRAWS} redraws")


def pathological_partition(pool: LabeledPool, n: int, rng: np.random.Generator,
                           lo: float = 0.4, hi: float = 0.6, min_samples: int = 1) -> PartitionPlan:
    """Per class, client ``i`` receives samples at rate ``a_ic / sum_j a_jc``, ``a ~ U(lo, hi)``."""
    def draw():
        return {int(c): sample_uniform(rng, lo, hi, n) for c in pool.classes}
    return _with_redraws(pool, n, rng, draw, min_samples)


def dirichlet_partition(pool: LabeledPool, n: int, alpha: float, rng: np.random.Generator,
                        min_samples: int = 1) -> PartitionPlan:
    """Per class, client shares ~ symmetric Dirichlet(alpha) over the ``n`` clients."""
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")

    def draw():
        return {int(c): sample_dirichlet(rng, np.full(n, alpha)) if n > 1 else np.ones(1)
                for c in pool.classes}
    return _with_redraws(pool, n, rng, draw, min_samples)


def pachinko_partition(pool: LabeledPool, n: int, rng: np.random.Generator, alpha: float = 0.4,
                       beta: float = 10.0, min_samples: int = 1) -> PartitionPlan:
    """Two-stage allocation: coarse shares ~ Dir(alpha), then fine-within-coarse ~ Dir(beta).

    Each client draws its own coarse-class mixture and, inside every coarse
    class, its own fine-class mixture.  Client ``i``'s weight for fine class
    ``f`` is ``coarse[i, c(f)] * fine[i, f]``; every sample of ``f`` goes to a
    client drawn in proportion to those weights.  A single-component
    Dirichlet is the constant 1 and consumes no random numbers.
    """
    if pool.coarse_labels is None:
        raise ConfigurationError("pachinko partition needs coarse labels")
    if alpha <= 0 or beta <= 0:
        raise ConfigurationError("alpha and beta must be positive")
    coarse_ids = np.unique(pool.coarse_labels)
    fine_of = {int(c): np.unique(pool.labels[pool.coarse_labels == c]) for c in coarse_ids}

    def dirichlet(conc, k):
        return np.ones(1) if k == 1 else sample_dirichlet(rng, np.full(k, conc))

    def draw():
        weights = {int(f): np.zeros(n) for f in pool.classes}
        for i in range(n):
            coarse = dirichlet(alpha, coarse_ids.size)
            for ci, c in enumerate(coarse_ids):
                fines = fine_of[int(c)]
                fine = dirichlet(beta, fines.size)
                for f, share in zip(fines, fine):
                    weights[int(f)][i] = coarse[ci] * share
        return weights
    return _with_redraws(pool, n, rng, draw, min_samples)


def split_train_test(pool: LabeledPool, rng: np.random.Generator, train_frac: float = 0.8):
    """Shuffle and split into (train, test), at least one sample in train."""
    order = rng.permutation(len(pool))
    cut = max(1, int(round(train_frac * len(pool))))
    return pool.subset(np.sort(order[:cut])), pool.subset(np.sort(order[cut:]))


# --- synthetic tasks -------------------------------------------------------

SHIFT_MODES = ("none", "label-skew", "rotation", "noise")


@dataclass
class SyntheticTaskSpec:
    num_classes: int = 10
    input_dim: int = 32
    num_clients: int = 50
    samples_per_client: int = 200
    shift: str = "label-skew"
    groups: int = 4
    noise_max: float = 1.0
    separation: float = 8.0
    cluster_std: float = 1.0
    train_frac: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.shift not in SHIFT_MODES:
            raise ConfigurationError(f"shift must be one of {SHIFT_MODES}, got {self.shift!r}")
        if self.num_classes < 2 or self.input_dim < 1 or self.num_clients < 1 or self.groups < 1:
            raise ConfigurationError("synthetic task sizes must be positive")
        if self.samples_per_client < 2:
            raise ConfigurationError("each client needs at least two samples")


@dataclass
class ClientData:
    id: int
    train: Batch
    test: Batch
    group: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.train)


def cluster_means(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = make_rng(spec.seed, "task-means")
    means = rng.standard_normal((spec.num_classes, spec.input_dim))
    return spec.separation * means / np.linalg.norm(means, axis=1, keepdims=True)


def label_maps(spec: SyntheticTaskSpec) -> np.ndarray:
    """``(groups, K)`` cluster -> label permutation per group; group 0 is the identity."""
    rng = make_rng(spec.seed, "task-labelmap")
    maps = [np.arange(spec.num_classes)]
    for _ in range(1, spec.groups):
        maps.append(rng.permutation(spec.num_classes))
    return np.stack(maps)


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def sample_clusters(means: np.ndarray, n: int, std: float, rng: np.random.Generator):
    """Balanced-in-expectation draw: cluster ids uniform, Gaussian around the mean."""
    clusters = rng.integers(0, means.shape[0], size=n)
    return means[clusters] + std * rng.standard_normal((n, means.shape[1])), clusters


def make_client(spec: SyntheticTaskSpec, client: int, group: int | None = None,
                rotation: np.ndarray | None = None, noise: float | None = None,
                stream: str = "task-client") -> ClientData:
    """One client's shard under ``spec.shift``; overrides pin group/rotation/noise."""
    rng = make_rng(spec.seed, stream, client)
    group = client % spec.groups if group is None else group
    x, clusters = sample_clusters(cluster_means(spec), spec.samples_per_client, spec.cluster_std, rng)
    labels = clusters
    meta = {}
    if spec.shift == "label-skew":
        labels = label_maps(spec)[group][clusters]
    elif spec.shift == "rotation":
        if rotation is None:
            rotation = random_rotation(spec.input_dim, make_rng(spec.seed, "task-rotation", client))
        x = x @ rotation.T
    elif spec.shift == "noise":
        if noise is None:
            noise = spec.noise_max * (client + 1) / spec.num_clients
        x = x + noise * rng.standard_normal(x.shape)
        meta["noise"] = noise
    train, test = split_train_test(LabeledPool(x, labels), rng, spec.train_frac)
    return ClientData(client, train.to_batch(), test.to_batch(), group, meta)


def make_synthetic(spec: SyntheticTaskSpec) -> list[ClientData]:
    """Per-client train/test shards (80/20 by default) for every client."""
    return [make_client(spec, i) for i in range(spec.num_clients)]


def make_pool(spec: SyntheticTaskSpec, size: int, coarse_classes: int | None = None,
              stream: str = "task-pool") -> LabeledPool:
    """A single unshifted pool of ``size`` samples, optionally with coarse labels.

    Coarse class of fine class ``f`` is ``f * coarse_classes // K``.
    """
    rng = make_rng(spec.seed, stream)
    x, labels = sample_clusters(cluster_means(spec), size, spec.cluster_std, rng)
    coarse = None
    if coarse_classes is not None:
        if not 1 <= coarse_classes <= spec.num_classes:
            raise ConfigurationError("coarse_classes must lie in [1, num_classes]")
        coarse = labels * coarse_classes // spec.num_classes
    return LabeledPool(x, labels, coarse)


def clients_from_plan(pool: LabeledPool, plan: PartitionPlan, rng_seed: int,
                      train_frac: float = 0.8) -> list[ClientData]:
    """Split each client's share of the pool into its own train/test sets."""
    clients = []
    for i in range(plan.num_clients):
        shard = pool.subset(plan.indices(i))
        if len(shard) < 2:
            raise ConfigurationError(f"client {i} holds {len(shard)} samples; need >= 2 for a split")
        train, test = split_train_test(shard, make_rng(rng_seed, "split", i), train_frac)
        if len(test) == 0:
            test = train
        clients.append(ClientData(i, train.to_batch(), test.to_batch()))
    return clients


def label_entropy(plan: PartitionPlan, labels: np.ndarray) -> np.ndarray:
    """Per-client entropy (nats) of the assigned label distribution."""
    hist = plan.class_histogram(labels).astype(np.float64)
    p = hist / np.maximum(hist.sum(axis=1, keepdims=True), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)
