"""Small focal-modulation classifier with a hand-written backward pass.

Parameters split into the modulation projections ``P`` (per block a query,
context and value matrix, stored as one ``(B, 3, d, d)`` array) and the
shared remainder ``xi``.  Personalisation strategies swap ``P`` per client
and share ``xi``.

Reference focal block, applied ``B`` times to a ``(n, T, d)`` token tensor::

    q   = x P_Q                      query
    c   = x P_K                      context
    c_l = A_l c,   l = 1..F+1        windowed means (radius l), last = global
    g   = softmax(x W_G)             gate per token over the F+1 levels
    m   = (sum_l g_l * c_l) P_V      modulator
    y   = LayerNorm(x + (q * m) W_O)

The input vector is cut into ``T`` equal segments; rows of the embedding
matrix belonging to segment ``t`` map it to token ``t``.  After the last
block tokens are mean-pooled and fed to a linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np

from .numcore import ConfigurationError, NonFiniteError, log_softmax

LN_EPS = 1e-5
Q, K, V = 0, 1, 2


@dataclass(frozen=True)
class Arch:
    input_dim: int = 32
    d: int = 16
    blocks: int = 8
    levels: int = 2
    tokens: int = 4
    num_classes: int = 10

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigurationError(f"architecture field {f.name} must be >= 1")
        if self.input_dim % self.tokens:
            raise ConfigurationError(
                f"input_dim={self.input_dim} is not divisible by tokens={self.tokens}")

    @property
    def segment(self) -> int:
        return self.input_dim // self.tokens

    @property
    def p_shape(self) -> tuple[int, int, int, int]:
        return (self.blocks, 3, self.d, self.d)

    @property
    def p_size(self) -> int:
        return self.blocks * 3 * self.d * self.d


@dataclass
class SharedParams:
    """Everything except the modulation projections."""

    embed: np.ndarray      # (input_dim, d)
    gate: np.ndarray       # (B, d, F+1)
    out: np.ndarray        # (B, d, d)
    ln_scale: np.ndarray   # (B, d)
    ln_shift: np.ndarray   # (B, d)
    head: np.ndarray       # (d, K)
    head_bias: np.ndarray  # (K,)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def copy(self) -> "SharedParams":
        return SharedParams(*(a.copy() for a in self.arrays()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "SharedParams":
        """New SharedParams with this instance's shapes and values from ``flat``."""
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        if pos != flat.size:
            raise ConfigurationError(f"flat vector has {flat.size} entries, expected {pos}")
        return SharedParams(*out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def map(self, fn, *others: "SharedParams") -> "SharedParams":
        return SharedParams(*(fn(*xs) for xs in zip(self.arrays(), *(o.arrays() for o in others))))


@dataclass
class ModelParams:
    p: np.ndarray          # (B, 3, d, d)
    xi: SharedParams

    def copy(self) -> "ModelParams":
        return ModelParams(self.p.copy(), self.xi.copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.p.ravel(), self.xi.flatten()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        n = self.p.size
        return ModelParams(flat[:n].reshape(self.p.shape).copy(), self.xi.unflatten(flat[n:]))

    @property
    def size(self) -> int:
        return self.p.size + self.xi.size

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        return ModelParams(fn(self.p, *(o.p for o in others)),
                           self.xi.map(fn, *(o.xi for o in others)))


@dataclass
class Batch:
    inputs: np.ndarray     # (n, input_dim)
    labels: np.ndarray     # (n,) int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ConfigurationError("batch needs (n, input_dim) inputs and n labels")
        if self.inputs.shape[0] < 1:
            raise ConfigurationError("empty batch")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@lru_cache(maxsize=None)
def level_operators(tokens: int, levels: int) -> np.ndarray:
    """``(levels + 1, T, T)`` averaging matrices: window radius 1..F, then global."""
    ops = np.zeros((levels + 1, tokens, tokens))
    for l in range(1, levels + 1):
        for t in range(tokens):
            lo, hi = max(0, t - l), min(tokens, t + l + 1)
            ops[l - 1, t, lo:hi] = 1.0 / (hi - lo)
    ops[levels] = 1.0 / tokens
    ops.setflags(write=False)
    return ops


def init_params(arch: Arch, rng: np.random.Generator) -> ModelParams:
    """Gaussian(0, 1/fan_in) weights, unit layer-norm scale, zero biases."""
    d, B, F1 = arch.d, arch.blocks, arch.levels + 1
    gauss = lambda shape, fan_in: rng.standard_normal(shape) / np.sqrt(fan_in)
    p = gauss(arch.p_shape, d)
    xi = SharedParams(
        embed=gauss((arch.input_dim, d), arch.segment),
        gate=gauss((B, d, F1), d),
        out=gauss((B, d, d), d),
        ln_scale=np.ones((B, d)),
        ln_shift=np.zeros((B, d)),
        head=gauss((d, arch.num_classes), d),
        head_bias=np.zeros(arch.num_classes),
    )
    return ModelParams(p, xi)


def zeros_like(params: ModelParams) -> ModelParams:
    return params.map(np.zeros_like)


def _check(params: ModelParams, arch: Arch, batch: Batch) -> None:
    if params.p.shape != arch.p_shape:
        raise ConfigurationError(f"projection shape {params.p.shape} != {arch.p_shape}")
    if batch.inputs.shape[1] != arch.input_dim:
        raise ConfigurationError(f"batch width {batch.inputs.shape[1]} != input_dim {arch.input_dim}")
    xi = params.xi
    want = {
        "embed": (arch.input_dim, arch.d),
        "gate": (arch.blocks, arch.d, arch.levels + 1),
        "out": (arch.blocks, arch.d, arch.d),
        "ln_scale": (arch.blocks, arch.d),
        "ln_shift": (arch.blocks, arch.d),
        "head": (arch.d, arch.num_classes),
        "head_bias": (arch.num_classes,),
    }
    for name, shape in want.items():
        if getattr(xi, name).shape != shape:
            raise ConfigurationError(f"{name} has shape {getattr(xi, name).shape}, expected {shape}")
    if np.any(batch.labels < 0) or np.any(batch.labels >= arch.num_classes):
        raise ConfigurationError("label out of range")


def _softmax_rows(x: np.ndarray, ones: np.ndarray) -> np.ndarray:
    """Softmax over a short last axis; the sum runs through a matmul."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / (e @ ones)


def stack(models: list[ModelParams]) -> ModelParams:
    """Stack client models along a new leading axis."""
    return ModelParams(np.stack([m.p for m in models]),
                       SharedParams(*(np.stack(a) for a in zip(*(m.xi.arrays() for m in models)))))


def unstack(stacked: ModelParams) -> list[ModelParams]:
    return [stacked.map(lambda a, i=i: a[i].copy()) for i in range(stacked.p.shape[0])]


def forward_stacked(params: ModelParams, arch: Arch, inputs: np.ndarray):
    """Forward pass for ``S`` independent models on ``(S, n, input_dim)`` inputs.

    Every parameter array carries the leading model axis.  Returns logits
    ``(S, n, K)`` and the cache consumed by :func:`backward_stacked`.
    """
    xi = params.xi
    S, n = inputs.shape[:2]
    T, s, d = arch.tokens, arch.segment, arch.d
    ops = level_operators(T, arch.levels)
    mean_d = np.full((d, 1), 1.0 / d)
    ones_l = np.ones((arch.levels + 1, 1))
    seg = inputs.reshape(S, n, T, s).transpose(0, 2, 1, 3)            # (S, T, n, s)
    h = np.matmul(seg, xi.embed.reshape(S, T, s, d)).transpose(0, 2, 1, 3).reshape(S, n * T, d)
    cache = {"seg": seg, "blocks": []}
    for b in range(arch.blocks):
        pq, pk, pv = params.p[:, b, Q], params.p[:, b, K], params.p[:, b, V]
        q = h @ pq
        c = h @ pk
        g = _softmax_rows(h @ xi.gate[:, b], ones_l).reshape(S, n, T, -1)
        # w[s,n,t,u] = sum_l g[s,n,t,l] A_l[t,u]
        w = np.matmul(g.transpose(0, 2, 1, 3), ops.transpose(1, 0, 2)).transpose(0, 2, 1, 3)
        agg = np.matmul(w, c.reshape(S, n, T, d)).reshape(S, n * T, d)
        m = agg @ pv
        u = q * m
        r = h + u @ xi.out[:, b]
        rc = r - r @ mean_d
        inv = 1.0 / np.sqrt((rc * rc) @ mean_d + LN_EPS)
        xhat = rc * inv
        h_next = xhat * xi.ln_scale[:, b, None, :] + xi.ln_shift[:, b, None, :]
        if not np.isfinite(h_next).all():
            raise NonFiniteError(f"non-finite activation in block {b}")
        cache["blocks"].append((h, q, c, g, w, agg, m, u, xhat, inv))
        h = h_next
    pooled = h.reshape(S, n, T, d).mean(axis=2)
    logits = pooled @ xi.head + xi.head_bias[:, None, :]
    cache["pooled"] = pooled
    return logits, cache


def backward_stacked(params: ModelParams, arch: Arch, cache, dlogits: np.ndarray) -> ModelParams:
    """Pull ``dlogits`` ``(S, n, K)`` back to every parameter of every model."""
    xi = params.xi
    S, n = dlogits.shape[:2]
    T, d = arch.tokens, arch.d
    ops = level_operators(T, arch.levels)
    tr = lambda a: a.transpose(0, 2, 1)
    mean_d = np.full((d, 1), 1.0 / d)
    ones_l = np.ones((arch.levels + 1, 1))
    ones_r = np.ones((1, n * T))
    gp = np.empty_like(params.p)
    gxi = xi.map(np.empty_like)

    gxi.head[...] = tr(cache["pooled"]) @ dlogits
    gxi.head_bias[...] = dlogits.sum(axis=1)
    dpool = (dlogits @ tr(xi.head)) / T
    dh = np.repeat(dpool, T, axis=1)                                  # rows ordered (n, T)

    for b in reversed(range(arch.blocks)):
        h, q, c, g, w, agg, m, u, xhat, inv = cache["blocks"][b]
        pq, pk, pv = params.p[:, b, Q], params.p[:, b, K], params.p[:, b, V]
        gate = xi.gate[:, b]
        gxi.ln_scale[:, b] = (ones_r @ (dh * xhat))[:, 0]
        gxi.ln_shift[:, b] = (ones_r @ dh)[:, 0]
        dxhat = dh * xi.ln_scale[:, b, None, :]
        dr = inv * (dxhat - dxhat @ mean_d - xhat * ((dxhat * xhat) @ mean_d))
        gxi.out[:, b] = tr(u) @ dr
        du = dr @ tr(xi.out[:, b])
        dq = du * m
        dm = du * q
        gp[:, b, V] = tr(agg) @ dm
        dagg = (dm @ tr(pv)).reshape(S, n, T, d)
        dw = np.matmul(dagg, c.reshape(S, n, T, d).transpose(0, 1, 3, 2))   # (S, n, T, U)
        dc = np.matmul(w.transpose(0, 1, 3, 2), dagg).reshape(S, n * T, d)
        # dg[s,n,t,l] = sum_u dw[s,n,t,u] A_l[t,u]
        dg = np.matmul(dw.transpose(0, 2, 1, 3), ops.transpose(1, 2, 0)).transpose(0, 2, 1, 3)
        g2 = g.reshape(S, n * T, -1)
        dg2 = dg.reshape(S, n * T, -1)
        dgl = g2 * (dg2 - (g2 * dg2) @ ones_l)
        gxi.gate[:, b] = tr(h) @ dgl
        gp[:, b, Q] = tr(h) @ dq
        gp[:, b, K] = tr(h) @ dc
        dh = dr + dq @ tr(pq) + dc @ tr(pk) + dgl @ tr(gate)

    dh = dh.reshape(S, n, T, d).transpose(0, 2, 1, 3)                 # (S, T, n, d)
    gxi.embed[...] = np.matmul(cache["seg"].transpose(0, 1, 3, 2), dh).reshape(S, arch.input_dim, d)
    return ModelParams(gp, gxi)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Cross-entropy and its gradient with respect to the logits.

    Works on any leading shape.  ``weights`` (same shape as ``labels``)
    defaults to a uniform mean over the last axis; per-row loss is
    ``sum(weights * ce)`` and rows with all-zero weights contribute nothing.
    """
    if weights is None:
        weights = np.full(labels.shape, 1.0 / labels.shape[-1])
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum(axis=-1)
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, labels[..., None],
                      np.take_along_axis(dlogits, labels[..., None], axis=-1) - 1.0, axis=-1)
    return loss, dlogits * weights[..., None]


def forward(params: ModelParams, arch: Arch, inputs: np.ndarray):
    """Single-model forward: logits ``(n, K)`` and the activation cache."""
    single = params.map(lambda a: a[None])
    logits, cache = forward_stacked(single, arch, np.asarray(inputs, dtype=np.float64)[None])
    return logits[0], cache


def predict(params: ModelParams, arch: Arch, inputs: np.ndarray) -> np.ndarray:
    return forward(params, arch, inputs)[0]


def loss_and_grad(params: ModelParams, arch: Arch, batch: Batch) -> tuple[float, ModelParams]:
    """Mean cross-entropy over the batch and its exact gradient."""
    _check(params, arch, batch)
    single = params.map(lambda a: a[None])
    logits, cache = forward_stacked(single, arch, batch.inputs[None])
    loss, dlogits = cross_entropy(logits, batch.labels[None])
    if not np.isfinite(loss[0]):
        raise NonFiniteError("non-finite loss")
    grad = backward_stacked(single, arch, cache, dlogits)
    return float(loss[0]), grad.map(lambda a: a[0])


def loss_and_grad_stacked(params: ModelParams, arch: Arch, inputs: np.ndarray,
                          labels: np.ndarray, weights: np.ndarray):
    """Per-model weighted losses ``(S,)``, stacked gradients and the logits."""
    logits, cache = forward_stacked(params, arch, inputs)
    loss, dlogits = cross_entropy(logits, labels, weights)
    if not np.isfinite(loss).all():
        bad = int(np.flatnonzero(~np.isfinite(loss))[0])
        raise NonFiniteError(f"non-finite loss for stacked model {bad}")
    return loss, backward_stacked(params, arch, cache, dlogits), logits


def sgd_step(params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    return params.map(lambda w, g: w - lr * g, grad)


def evaluate_batch(params: ModelParams, arch: Arch, batch: Batch) -> tuple[float, float]:
    """(mean loss, accuracy); argmax ties go to the lowest class index."""
    logits = predict(params, arch, batch.inputs)
    loss, _ = cross_entropy(logits, batch.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    return float(loss), acc


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Index arrays covering ``range(n)`` once, in a fresh random order."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
