import numpy as np
import pytest

from adaptfed import gradcheck
from adaptfed.analysis import empirical_lipschitz
from adaptfed.hypernet import (cohort_weights, generate, init_hypernet, lowrank_factors, pullback, server_update,
                               transmitted_scalars)
from adaptfed.model import Arch
from adaptfed.numcore import ConfigurationError, ProtocolError, make_rng

SMALL = gradcheck.SMALL_ARCH


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("rank", [None, 2])
def test_pullback_matches_finite_differences(seed, rank):
    for r in gradcheck.check_hypernet(seed, rank):
        assert r.max_rel_error < 1e-5, r


def test_generate_shape_and_offset_init():
    offset = make_rng(0, "off").standard_normal(SMALL.p_shape)
    hn = init_hypernet(SMALL, make_rng(1), embed_dim=5, hidden=7, offset=offset, head_scale=0.0)
    # a zero head leaves only the bias, so every embedding maps to the offset
    for z in make_rng(2).standard_normal((3, 5)):
        assert np.array_equal(generate(hn, z), offset)
    low = init_hypernet(SMALL, make_rng(1), embed_dim=5, hidden=7, rank=1, offset=offset, head_scale=0.0)
    assert np.array_equal(generate(low, np.ones(5)), offset)


def test_generate_rejects_wrong_embedding():
    hn = init_hypernet(SMALL, make_rng(0), embed_dim=5, hidden=7)
    with pytest.raises(ConfigurationError):
        generate(hn, np.zeros(4))
    with pytest.raises(ConfigurationError):
        pullback(hn, np.zeros(5), np.zeros((1, 2)))


@pytest.mark.parametrize("rank", [0, 4, 5])
def test_rank_bounds(rank):
    with pytest.raises(ConfigurationError):
        init_hypernet(SMALL, make_rng(0), rank=rank)


def test_transmitted_scalars_fixture():
    arch = Arch(d=16, blocks=8)
    assert transmitted_scalars(init_hypernet(arch, make_rng(0), rank=2)) == 8 * 3 * 2 * 16 * 2 == 1536
    assert transmitted_scalars(init_hypernet(arch, make_rng(0))) == 8 * 3 * 256 == 6144


def test_lowrank_factors_recover_exact_rank():
    rng = make_rng(3)
    target = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 6))
    u, v = lowrank_factors(target, 2)
    assert u.shape == (6, 2) and v.shape == (2, 6)
    assert np.allclose(u @ v, target, atol=1e-12)
    with pytest.raises(ConfigurationError):
        lowrank_factors(target, 7)


def test_cohort_weights_sum_and_modes():
    sizes = {0: 10, 1: 30, 2: 60}
    w = cohort_weights(sizes, [0, 1])
    assert w == {0: 0.25, 1: 0.75}
    assert cohort_weights(sizes, [0, 1], "global", 100) == {0: 0.1, 1: 0.3}
    with pytest.raises(ProtocolError):
        cohort_weights(sizes, [])
    with pytest.raises(ConfigurationError):
        cohort_weights(sizes, [0], "median")


def test_server_update_oracle_single_client():
    hn = init_hypernet(SMALL, make_rng(4), embed_dim=5, hidden=7)
    emb = make_rng(5).standard_normal((3, 5))
    cot = make_rng(6).standard_normal(SMALL.p_shape)
    new_hn, new_emb = server_update(hn, emb, {1: cot}, {0: 5, 1: 8, 2: 9}, lr=0.1)
    g_phi, g_z = pullback(hn, emb[1], cot)
    assert np.allclose(new_hn.flatten(), hn.flatten() - 0.1 * g_phi.flatten(), atol=1e-15)
    assert np.allclose(new_emb[1], emb[1] - 0.1 * g_z, atol=1e-15)
    # embeddings outside the cohort are untouched
    assert np.array_equal(new_emb[[0, 2]], emb[[0, 2]])


def test_server_update_weights_and_zero_lr():
    hn = init_hypernet(SMALL, make_rng(7), embed_dim=5, hidden=7)
    emb = make_rng(8).standard_normal((2, 5))
    cots = {i: make_rng(9, "c", i).standard_normal(SMALL.p_shape) for i in range(2)}
    sizes = {0: 1, 1: 3}
    new_hn, _ = server_update(hn, emb, cots, sizes, lr=1.0)
    expect = hn.flatten() - (0.25 * pullback(hn, emb[0], cots[0])[0].flatten()
                             + 0.75 * pullback(hn, emb[1], cots[1])[0].flatten())
    assert np.allclose(new_hn.flatten(), expect, atol=1e-12)
    frozen, frozen_emb = server_update(hn, emb, cots, sizes, lr=0.0)
    assert np.array_equal(frozen.flatten(), hn.flatten())
    assert np.array_equal(frozen_emb, emb)
    with pytest.raises(ConfigurationError):
        server_update(hn, emb, cots, sizes, lr=-1.0)


def test_generator_lipschitz_estimate_is_finite():
    hn = init_hypernet(Arch(), make_rng(0))
    lz, lphi = empirical_lipschitz(hn, radius=3.0, samples=20, rng=make_rng(1))
    assert np.isfinite(lz) and np.isfinite(lphi) and lz > 0 and lphi > 0


def test_flatten_roundtrip_both_variants():
    for rank in (None, 2):
        hn = init_hypernet(SMALL, make_rng(0), embed_dim=5, hidden=7, rank=rank)
        assert np.array_equal(hn.unflatten(hn.flatten()).flatten(), hn.flatten())
        assert hn.size == hn.flatten().size
