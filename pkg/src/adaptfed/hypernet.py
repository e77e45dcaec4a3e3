"""Server-side generator mapping client embeddings to modulation projections.

``HyperNet`` is an MLP trunk (ReLU) followed by one linear head whose output
is reshaped into ``(B, 3, d, d)``; the head's columns for block ``b`` are that
block's private last layer.  With ``rank`` set, the head instead emits
per-projection factors ``U (d, r)`` and ``V (r, d)`` and the generated
projection is ``base + U @ V`` with a trained, client-independent ``base``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Arch
from .numcore import ConfigurationError, ProtocolError

__all__ = [
    "HyperNet",
    "init_hypernet",
    "generate",
    "pullback",
    "server_update",
    "cohort_weights",
    "transmitted_scalars",
    "lowrank_factors",
]


@dataclass
class HyperNet:
    arch: Arch
    embed_dim: int
    weights: list[np.ndarray]      # trunk W0, b0, W1, b1, ..., head W, head b
    base: np.ndarray | None = None  # (B, 3, d, d), low-rank variant only
    rank: int | None = None
    activation: str | None = "relu"

    @property
    def depth(self) -> int:
        return len(self.weights) // 2 - 1

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + ([self.base] if self.base is not None else [])

    def with_arrays(self, arrays: list[np.ndarray]) -> "HyperNet":
        n = len(self.weights)
        base = arrays[n] if self.base is not None else None
        return HyperNet(self.arch, self.embed_dim, list(arrays[:n]), base, self.rank, self.activation)

    def map(self, fn, *others: "HyperNet") -> "HyperNet":
        return self.with_arrays([fn(*xs) for xs in zip(self.arrays(), *(o.arrays() for o in others))])

    def copy(self) -> "HyperNet":
        return self.map(np.copy)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "HyperNet":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        if pos != np.size(flat):
            raise ConfigurationError(f"flat vector has {np.size(flat)} entries, expected {pos}")
        return self.with_arrays(out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    @property
    def head_width(self) -> int:
        a = self.arch
        if self.rank is None:
            return a.p_size
        return a.blocks * 3 * 2 * a.d * self.rank


def init_hypernet(arch: Arch, rng: np.random.Generator, embed_dim: int = 32, hidden: int = 100,
                  layers: int = 2, rank: int | None = None, head_scale: float = 0.1,
                  offset: np.ndarray | None = None) -> HyperNet:
    """Trunk weights ~ Gaussian(0, 1/fan_in) with zero biases; head weights shrunk by ``head_scale``.

    ``offset`` (a ``(B, 3, d, d)`` tensor) is what every embedding maps to
    at initialisation, up to the small head term: it becomes the head bias,
    or the base of the low-rank variant.  Without it the head bias is zero
    and the low-rank base is drawn like the model's projections.
    """
    if layers < 1:
        raise ConfigurationError("hypernetwork trunk needs at least one layer")
    if rank is not None and not 1 <= rank < arch.d:
        raise ConfigurationError(f"rank must satisfy 1 <= r < d={arch.d}, got {rank}")
    if offset is not None and np.shape(offset) != arch.p_shape:
        raise ConfigurationError(f"offset shape {np.shape(offset)} != {arch.p_shape}")
    weights = []
    fan_in = embed_dim
    for _ in range(layers):
        weights += [rng.standard_normal((fan_in, hidden)) / np.sqrt(fan_in), np.zeros(hidden)]
        fan_in = hidden
    hn = HyperNet(arch, embed_dim, weights, None, rank)
    head_b = np.zeros(hn.head_width)
    if rank is None and offset is not None:
        head_b = np.array(offset, dtype=np.float64).ravel()
    weights += [head_scale * rng.standard_normal((hidden, hn.head_width)) / np.sqrt(hidden), head_b]
    if rank is not None:
        base = rng.standard_normal(arch.p_shape) / np.sqrt(arch.d)
        hn.base = base if offset is None else np.array(offset, dtype=np.float64)
    return hn


def _trunk(hn: HyperNet, z: np.ndarray):
    acts = [np.asarray(z, dtype=np.float64)]
    for i in range(hn.depth):
        pre = acts[-1] @ hn.weights[2 * i] + hn.weights[2 * i + 1]
        acts.append(np.maximum(pre, 0.0) if hn.activation == "relu" else pre)
    return acts


def _split_factors(hn: HyperNet, out: np.ndarray):
    a, r = hn.arch, hn.rank
    f = out.reshape(a.blocks, 3, 2, a.d * r)
    return f[:, :, 0].reshape(a.blocks, 3, a.d, r), f[:, :, 1].reshape(a.blocks, 3, r, a.d)


def generate(hn: HyperNet, z: np.ndarray) -> np.ndarray:
    """Projection tensor ``(B, 3, d, d)`` for embedding ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (hn.embed_dim,):
        raise ConfigurationError(f"embedding shape {z.shape} != ({hn.embed_dim},)")
    out = _trunk(hn, z)[-1] @ hn.weights[-2] + hn.weights[-1]
    if hn.rank is None:
        return out.reshape(hn.arch.p_shape)
    u, v = _split_factors(hn, out)
    return hn.base + u @ v


def pullback(hn: HyperNet, z: np.ndarray, cot: np.ndarray) -> tuple[HyperNet, np.ndarray]:
    """Vector-Jacobian products of ``generate`` at ``z`` with cotangent ``cot``.

    Returns ``(grad_phi, grad_z)`` where ``grad_phi`` is a HyperNet-shaped
    container.
    """
    cot = np.asarray(cot, dtype=np.float64)
    if cot.shape != hn.arch.p_shape:
        raise ConfigurationError(f"cotangent shape {cot.shape} != {hn.arch.p_shape}")
    acts = _trunk(hn, z)
    grads = [None] * len(hn.weights)
    gbase = None
    if hn.rank is None:
        dout = cot.ravel()
    else:
        out = acts[-1] @ hn.weights[-2] + hn.weights[-1]
        u, v = _split_factors(hn, out)
        du = cot @ v.transpose(0, 1, 3, 2)
        dv = u.transpose(0, 1, 3, 2) @ cot
        a = hn.arch
        dout = np.stack([du.reshape(a.blocks, 3, -1), dv.reshape(a.blocks, 3, -1)], axis=2).ravel()
        gbase = cot.copy()
    grads[-2] = np.outer(acts[-1], dout)
    grads[-1] = dout
    dh = hn.weights[-2] @ dout
    for i in reversed(range(hn.depth)):
        if hn.activation == "relu":
            dh = dh * (acts[i + 1] > 0)
        grads[2 * i] = np.outer(acts[i], dh)
        grads[2 * i + 1] = dh
        dh = hn.weights[2 * i] @ dh
    return hn.with_arrays(grads + ([gbase] if gbase is not None else [])), dh


def cohort_weights(sizes: dict[int, int], cohort, weighting: str = "cohort",
                   total: int | None = None) -> dict[int, float]:
    """``m_i / sum_{j in cohort} m_j`` (cohort) or ``m_i / S`` (global)."""
    cohort = sorted(cohort)
    if not cohort:
        raise ProtocolError("empty cohort")
    if weighting == "cohort":
        denom = sum(sizes[i] for i in cohort)
    elif weighting == "global":
        denom = total if total is not None else sum(sizes.values())
    else:
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    if denom <= 0:
        raise ProtocolError("cohort holds no samples")
    return {i: sizes[i] / denom for i in cohort}


def server_update(hn: HyperNet, embeddings: np.ndarray, cotangents: dict[int, np.ndarray],
                  sizes: dict[int, int], lr: float, weighting: str = "cohort",
                  total: int | None = None) -> tuple[HyperNet, np.ndarray]:
    """One generator/embedding step from per-client projection cotangents.

    ``phi -= lr * sum_i w_i * J_phi(z_i)^T cot_i`` and, for cohort members
    only, ``z_i -= lr * J_z(z_i)^T cot_i``.  Clients are reduced in id order.
    """
    if lr < 0:
        raise ConfigurationError("global learning rate must be non-negative")
    cohort = sorted(cotangents)
    weights = cohort_weights(sizes, cohort, weighting, total)
    acc = hn.map(np.zeros_like)
    new_emb = embeddings.copy()
    for i in cohort:
        g_phi, g_z = pullback(hn, embeddings[i], cotangents[i])
        acc = acc.map(lambda a, g, w=weights[i]: a + w * g, g_phi)
        new_emb[i] = embeddings[i] - lr * g_z
    return hn.map(lambda p, g: p - lr * g, acc), new_emb


def transmitted_scalars(hn: HyperNet) -> int:
    """Personalised scalars sent to one client per round (factors or full P)."""
    return hn.head_width


def lowrank_factors(target: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``r`` factors ``U, V`` of ``target`` (truncated SVD, square-root split)."""
    target = np.asarray(target, dtype=np.float64)
    if not 1 <= rank <= min(target.shape):
        raise ConfigurationError("rank out of range")
    u, s, vt = np.linalg.svd(target, full_matrices=False)
    root = np.sqrt(s[:rank])
    return u[:, :rank] * root, root[:, None] * vt[:rank]
