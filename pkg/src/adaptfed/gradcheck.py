"""Finite-difference checks of every hand-written gradient path.

Each suite builds a small random instance (d=4, B=2 blocks, 4 tokens),
compares the analytic gradient to central differences and reports the worst
relative error ``|analytic - numeric| / (|analytic| + 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hypernet import generate, init_hypernet, pullback
from .model import Arch, Batch, ModelParams, init_params, loss_and_grad
from .numcore import finite_diff_grad, make_rng

SMALL_ARCH = Arch(input_dim=16, d=4, blocks=2, levels=2, tokens=4, num_classes=3)
STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    coordinates: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def _instance(seed: int, arch: Arch = SMALL_ARCH, n: int = 3):
    rng = make_rng(seed, "gradcheck")
    params = init_params(arch, rng)
    # non-trivial layer-norm affine so those gradients are exercised too
    params.xi.ln_scale[...] = 1.0 + 0.3 * rng.standard_normal(params.xi.ln_scale.shape)
    params.xi.ln_shift[...] = 0.3 * rng.standard_normal(params.xi.ln_shift.shape)
    params.xi.head_bias[...] = 0.3 * rng.standard_normal(params.xi.head_bias.shape)
    batch = Batch(rng.standard_normal((n, arch.input_dim)), rng.integers(0, arch.num_classes, n))
    return rng, params, batch


def _live_trunk(hn):
    """Shift trunk biases up so most ReLUs are active and gradients are not vanishingly small."""
    for i in range(hn.depth):
        hn.weights[2 * i + 1] = hn.weights[2 * i + 1] + 0.5
    return hn


def check_model(seed: int) -> CheckResult:
    _, params, batch = _instance(seed)
    _, grad = loss_and_grad(params, SMALL_ARCH, batch)
    numeric = finite_diff_grad(lambda v: loss_and_grad(params.unflatten(v), SMALL_ARCH, batch)[0],
                               params.flatten(), STEP)
    return CheckResult("model", seed, rel_error(grad.flatten(), numeric), numeric.size)


def check_hypernet(seed: int, rank: int | None = None) -> list[CheckResult]:
    """Pullback of ``<generate(phi, z), cot>`` with respect to ``z`` and ``phi``."""
    rng = make_rng(seed, "gradcheck-hn")
    hn = init_hypernet(SMALL_ARCH, rng, embed_dim=5, hidden=7, layers=2, rank=rank,
                        head_scale=1.0)
    hn = _live_trunk(hn.map(lambda a: a + 0.1 * rng.standard_normal(a.shape)))
    z = rng.standard_normal(hn.embed_dim)
    cot = rng.standard_normal(SMALL_ARCH.p_shape)
    g_phi, g_z = pullback(hn, z, cot)
    nz = finite_diff_grad(lambda v: float((generate(hn, v) * cot).sum()), z, STEP)
    nphi = finite_diff_grad(lambda v: float((generate(hn.unflatten(v), z) * cot).sum()), hn.flatten(), STEP)
    tag = "hypernet" if rank is None else f"hypernet-rank{rank}"
    return [CheckResult(f"{tag}/z", seed, rel_error(g_z, nz), nz.size),
            CheckResult(f"{tag}/phi", seed, rel_error(g_phi.flatten(), nphi), nphi.size)]


def check_embedding_path(seed: int, rank: int | None = None) -> CheckResult:
    """Loss of a client model whose projections are generated, differentiated in ``z``."""
    rng, params, batch = _instance(seed)
    hn = init_hypernet(SMALL_ARCH, make_rng(seed, "gradcheck-emb"), embed_dim=5, hidden=7, layers=2, rank=rank,
                        head_scale=1.0)
    hn = _live_trunk(hn)
    z = rng.standard_normal(hn.embed_dim)

    def loss(v):
        return loss_and_grad(ModelParams(generate(hn, v), params.xi), SMALL_ARCH, batch)[0]

    _, grad = loss_and_grad(ModelParams(generate(hn, z), params.xi), SMALL_ARCH, batch)
    _, gz = pullback(hn, z, grad.p)
    numeric = finite_diff_grad(loss, z, STEP)
    tag = "embedding-path" if rank is None else f"embedding-path-rank{rank}"
    return CheckResult(tag, seed, rel_error(gz, numeric), numeric.size)


def run_all(seeds=range(5), rank: int = 2) -> list[CheckResult]:
    results = []
    for s in seeds:
        results.append(check_model(s))
        results += check_hypernet(s)
        results += check_hypernet(s, rank)
        results.append(check_embedding_path(s))
        results.append(check_embedding_path(s, rank))
    return results
