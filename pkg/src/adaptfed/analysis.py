"""Generalisation-bound evaluation, storage/traffic accounting, Lipschitz estimates, embedding export."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .federation import ServerState, serialize_state
from .hypernet import HyperNet, generate
from .model import Arch
from .numcore import ConfigurationError
from . import checkpoint


@dataclass
class BoundInputs:
    M: float            # total samples
    N: float            # clients
    d_vc: float         # VC dimension of the personalised hypothesis class
    delta: float
    L_h: float = 0.0
    L_phi: float = 0.0
    L_z: float = 0.0
    L_xi: float = 0.0
    R_h: float = 0.0
    R_t: float = 0.0

    def validate(self) -> None:
        for name in ("M", "N", "d_vc"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive (sampling/complexity terms)")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1) (confidence term)")
        for name in ("L_h", "L_phi", "L_z", "L_xi", "R_h", "R_t"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative (Lipschitz/radius terms)")
        if math.e * self.M / self.d_vc <= 1:
            raise ConfigurationError("e*M/d_vc must exceed 1 (complexity term log)")


@dataclass
class BoundTerms:
    sampling: float
    complexity: float
    generator: float
    shared: float

    @property
    def total(self) -> float:
        return self.sampling + self.complexity + self.generator + self.shared


def theorem1_rhs(b: BoundInputs) -> BoundTerms:
    """Right-hand side of the AdaptFED generalisation bound, term by term (natural logs)."""
    b.validate()
    return BoundTerms(
        sampling=math.sqrt(b.M / 2.0 * math.log(b.N / b.delta)),
        complexity=math.sqrt(b.d_vc * b.N / b.M * math.log(math.e * b.M / b.d_vc)),
        generator=b.L_h * b.R_h * (b.L_phi + b.L_z),
        shared=b.L_xi * b.R_t,
    )


# --- accounting --------------------------------------------------------------

def shared_size(arch: Arch) -> int:
    d, B, F1 = arch.d, arch.blocks, arch.levels + 1
    return arch.input_dim * d + B * d * F1 + B * d * d + 2 * B * d + d * arch.num_classes + arch.num_classes


def hypernet_size(arch: Arch, embed_dim: int = 32, hidden: int = 100, layers: int = 2,
                  rank: int | None = None) -> int:
    """Exact scalar count of a generator (trunk, heads, low-rank base)."""
    head = arch.p_size if rank is None else arch.blocks * 3 * 2 * arch.d * rank
    trunk = embed_dim * hidden + hidden + (layers - 1) * (hidden * hidden + hidden)
    return trunk + hidden * head + head + (arch.p_size if rank is not None else 0)


def crossover_clients(arch: Arch, **hn) -> int:
    """Smallest N for which per-client stored projections outgrow the generator."""
    return hypernet_size(arch, **hn) // arch.p_size + 1


@dataclass
class CostReport:
    strategy: str
    num_clients: int
    server_resident: int          # all scalars stored on the server
    personalization_storage: int  # server scalars that scale with N
    per_client_personal: int      # personalised scalars per client kept on the server
    personal_down: int            # per participating client per round
    shared_down: int
    up: int
    hypernet_total: int = 0
    crossover: int = 0


def cost_report(arch: Arch, num_clients: int, strategy: str, embed_dim: int = 32, hidden: int = 100,
                layers: int = 2, rank: int | None = None) -> CostReport:
    xi = shared_size(arch)
    p = arch.p_size
    n = num_clients
    hn_kw = dict(embed_dim=embed_dim, hidden=hidden, layers=layers, rank=rank)
    if strategy == "adaptfed":
        hsize = hypernet_size(arch, **hn_kw)
        head = p if rank is None else arch.blocks * 3 * 2 * arch.d * rank
        return CostReport(strategy, n, xi + hsize + n * embed_dim, n * embed_dim, embed_dim,
                          head, xi + (p if rank is not None else 0), p + xi,
                          hsize, crossover_clients(arch, **hn_kw))
    if strategy == "vanilla-tailored":
        return CostReport(strategy, n, xi + n * p, n * p, p, 0, xi, xi)
    if strategy == "fedavg":
        return CostReport(strategy, n, xi + p, 0, 0, 0, xi + p, xi + p)
    if strategy == "local-only":
        return CostReport(strategy, n, xi, 0, 0, 0, 0, 0)
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def serialized_scalars(server: ServerState) -> int:
    return checkpoint.payload_bytes(serialize_state(server)) // 8


def report_for_state(server: ServerState, num_clients: int) -> CostReport:
    hn = server.hypernet
    kw = {}
    if hn is not None:
        kw = dict(embed_dim=hn.embed_dim, hidden=hn.weights[0].shape[1], layers=hn.depth, rank=hn.rank)
    return cost_report(server.arch, num_clients, server.strategy, **kw)


def cost_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(asdict(reports[0])))
    w.writeheader()
    for r in reports:
        w.writerow(asdict(r))
    return buf.getvalue()


# --- Lipschitz estimates ---------------------------------------------------------

def empirical_lipschitz(hn: HyperNet, radius: float, samples: int, rng: np.random.Generator,
                        phi_step: float = 1e-3) -> tuple[float, float]:
    """Largest observed ``|dh| / |d input|`` over random pairs, for ``z`` and for ``phi``.

    Embeddings are drawn uniformly from the ball of ``radius``; weight
    perturbations are Gaussian directions scaled to ``phi_step`` times the
    weight norm.
    """
    D = hn.embed_dim

    def ball():
        v = rng.standard_normal(D)
        return radius * rng.random() ** (1.0 / D) * v / np.linalg.norm(v)

    flat = hn.flatten()
    step = phi_step * max(np.linalg.norm(flat), 1.0)
    lz = lphi = 0.0
    for _ in range(samples):
        z1, z2 = ball(), ball()
        dz = np.linalg.norm(z1 - z2)
        if dz > 0:
            lz = max(lz, np.linalg.norm(generate(hn, z1) - generate(hn, z2)) / dz)
        z = ball()
        e = rng.standard_normal(flat.size)
        e *= step / np.linalg.norm(e)
        lphi = max(lphi, np.linalg.norm(generate(hn.unflatten(flat + e), z) - generate(hn, z)) / step)
    return float(lz), float(lphi)


# --- embedding export ------------------------------------------------------------

def export_embeddings(server: ServerState, groups=None) -> str:
    """CSV rows ``client, group, z0..z{D-1}``."""
    emb = server.embeddings
    if emb is None:
        raise ConfigurationError("only adaptfed servers hold client embeddings")
    groups = [0] * len(emb) if groups is None else list(groups)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["client", "group"] + [f"z{j}" for j in range(emb.shape[1])])
    for i, z in enumerate(emb):
        w.writerow([i, groups[i]] + [repr(float(v)) for v in z])
    return buf.getvalue()


def parse_embeddings(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    ids = np.array([int(r[0]) for r in rows])
    groups = np.array([int(r[1]) for r in rows])
    z = np.array([[float(v) for v in r[2:]] for r in rows])
    return ids, groups, z


def group_distances(embeddings: np.ndarray, groups) -> tuple[float, float]:
    """Mean pairwise distance within groups and across groups."""
    groups = np.asarray(groups)
    d = np.linalg.norm(embeddings[:, None] - embeddings[None], axis=2)
    same = groups[:, None] == groups[None]
    off = ~np.eye(len(groups), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())
