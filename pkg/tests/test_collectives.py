import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qsharddp import quant
from qsharddp.collectives import (
    AlignmentError,
    ClusterTopology,
    ReduceConfig,
    all_gather,
    exact_reduce_scatter,
    naive_tlqhs_reduce,
    pad_to,
    reduce_scatter,
    ring_reduce_scatter_quantized,
    two_level_reduce_scatter,
)
from qsharddp.core import SeededRng, fill_gaussian, fill_spiky
from qsharddp.costmodel import ByteLedger

topologies = st.sampled_from([(1, 1), (2, 1), (2, 2), (4, 2), (4, 4), (8, 2), (8, 4), (16, 4), (6, 3)])


def grads_for(P, d, seed, spiky=False):
    rng = SeededRng(seed)
    if spiky:
        return fill_spiky(rng, P * d, 0.01, 50.0).reshape(P, d)
    return fill_gaussian(rng, P * d).reshape(P, d)


def test_topology():
    t = ClusterTopology(16, 4)
    assert t.M == 4 and t.node(5) == 1 and t.local(5) == 1 and t.rank(3, 2) == 14
    assert t.channel(0, 3) == "intra" and t.channel(3, 4) == "inter"
    with pytest.raises(ValueError):
        ClusterTopology(6, 4)
    with pytest.raises(ValueError):
        ClusterTopology(0, 1)


def test_exact_example():
    g = np.arange(1, 17, dtype=np.float32).reshape(4, 4)
    out = exact_reduce_scatter(ClusterTopology(4, 2), g)
    np.testing.assert_array_equal(out, [[7], [8], [9], [10]])


def test_exact_trivial_cases():
    g = fill_gaussian(SeededRng(0), 8).reshape(1, 8)
    np.testing.assert_array_equal(exact_reduce_scatter(ClusterTopology(1, 1), g), g)
    np.testing.assert_array_equal(exact_reduce_scatter(ClusterTopology(4, 2), np.zeros((4, 8))), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        exact_reduce_scatter(ClusterTopology(4, 2), np.zeros((3, 8)))
    with pytest.raises(AlignmentError):
        exact_reduce_scatter(ClusterTopology(4, 2), np.zeros((4, 6)))


@given(topologies, st.integers(1, 3), st.integers(0, 10**6))
def test_lossless_modes_equal_exact(topo_pn, groups, seed):
    P, N = topo_pn
    topo = ClusterTopology(P, N)
    G = 8
    g = grads_for(P, P * G * groups, seed)
    exact = exact_reduce_scatter(topo, g)
    lossless = ReduceConfig("two_level", 32, 32, G)
    np.testing.assert_array_equal(two_level_reduce_scatter(topo, g, lossless), exact)
    np.testing.assert_array_equal(ring_reduce_scatter_quantized(topo, g, 32, G), exact)


@given(topologies, st.integers(0, 10**6))
def test_lossless_hadamard_close_to_exact(topo_pn, seed):
    P, N = topo_pn
    topo = ClusterTopology(P, N)
    g = grads_for(P, P * 64, seed)
    cfg = ReduceConfig("two_level", 32, 32, 32, hadamard=True, block=32)
    exact = exact_reduce_scatter(topo, g)
    np.testing.assert_allclose(two_level_reduce_scatter(topo, g, cfg), exact, atol=1e-4)
    np.testing.assert_allclose(naive_tlqhs_reduce(topo, g, cfg), exact, atol=1e-4)


@given(st.integers(0, 10**6))
def test_naive_equals_pruned(seed):
    topo = ClusterTopology(16, 4)
    g = grads_for(16, 16 * 128 * 2, seed, spiky=True)
    cfg = ReduceConfig.preset("TLq-HS")
    a = two_level_reduce_scatter(topo, g, cfg)
    b = naive_tlqhs_reduce(topo, g, cfg)
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_naive_without_hadamard_is_same_path():
    topo = ClusterTopology(8, 4)
    g = grads_for(8, 8 * 128, 3)
    cfg = ReduceConfig.preset("TLq")
    np.testing.assert_array_equal(naive_tlqhs_reduce(topo, g, cfg), two_level_reduce_scatter(topo, g, cfg))


def test_quantized_ring_has_error_that_grows():
    def median_err(P):
        topo = ClusterTopology(P, P)
        errs = []
        for s in range(30):
            g = grads_for(P, 4096, s)
            out = ring_reduce_scatter_quantized(topo, g, 4, 128)
            errs.append(np.linalg.norm(out - exact_reduce_scatter(topo, g)))
        return np.median(errs)

    e4, e8 = median_err(4), median_err(8)
    assert 0 < e4 < e8


def test_shard_routing_by_tags():
    # give every destination shard a unique tag carried by rank 0 only
    for P, N in [(16, 4), (8, 2), (4, 4), (4, 1)]:
        topo = ClusterTopology(P, N)
        S = 32
        g = np.zeros((P, P * S), np.float32)
        g[0] = np.repeat(np.arange(1, P + 1, dtype=np.float32), S) * P
        for mode in ("lossless", "TLq"):
            out = two_level_reduce_scatter(topo, g, ReduceConfig.preset(mode, group_size=S))
            np.testing.assert_allclose(out[:, 0], np.arange(1, P + 1), rtol=0.02)


def test_permutation_conservation():
    topo = ClusterTopology(8, 4)
    g = grads_for(8, 8 * 16, 0)
    perm = np.array([3, 1, 7, 0, 5, 2, 6, 4])
    a = exact_reduce_scatter(topo, g)
    b = exact_reduce_scatter(topo, g[perm])
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_array_equal(b, exact_reduce_scatter(topo, np.ascontiguousarray(g[perm])))


@pytest.mark.parametrize("preset", ["ULq", "TLq", "TLq-HS", "ring4"])
def test_wire_path_matches_fast_path(preset):
    topo = ClusterTopology(8, 4)
    g = grads_for(8, 8 * 256, 1, spiky=True)
    cfg = ReduceConfig.preset(preset)
    la, lb = ByteLedger(), ByteLedger()
    a = reduce_scatter(topo, g, cfg, ledger=la)
    b = reduce_scatter(topo, g, cfg, ledger=lb, wire=True)
    np.testing.assert_array_equal(a, b)
    assert la == lb


def test_reduction_error_ordering_on_spiky():
    topo = ClusterTopology(16, 4)
    errs = {m: [] for m in ("ULq", "TLq", "TLq-HS")}
    for s in range(20):
        g = grads_for(16, 16 * 256, s, spiky=True)
        exact = exact_reduce_scatter(topo, g)
        for m in errs:
            errs[m].append(np.linalg.norm(reduce_scatter(topo, g, ReduceConfig.preset(m)) - exact))
    med = {m: np.median(v) for m, v in errs.items()}
    assert med["TLq-HS"] < med["TLq"] < med["ULq"]


def test_single_node_degenerates():
    topo = ClusterTopology(4, 1)
    g = grads_for(4, 4 * 128, 2)
    lg = ByteLedger()
    out = two_level_reduce_scatter(topo, g, ReduceConfig.preset("TLq"), ledger=lg)
    assert lg.intra_bytes == 0 and lg.inter_bytes > 0
    # one lossy hop: at most half a 4-bit step of the largest scale per contribution
    assert np.abs(out - exact_reduce_scatter(topo, g)).max() <= np.abs(g).max() / 14


def test_alignment_errors():
    with pytest.raises(AlignmentError):
        ReduceConfig("two_level", 8, 4, 100, hadamard=True, block=32)
    with pytest.raises(ValueError):
        ReduceConfig("tree")
    with pytest.raises(ValueError):
        ReduceConfig(k_intra=2)
    with pytest.raises(ValueError):
        ReduceConfig.preset("nope")
    with pytest.raises(AlignmentError):
        two_level_reduce_scatter(ClusterTopology(4, 2), np.zeros((4, 4 * 100)), ReduceConfig.preset("TLq"))
    assert pad_to(np.ones((2, 5)), 4).shape == (2, 8)


def test_all_gather_cases():
    topo = ClusterTopology(1, 1)
    c = quant.quantize(fill_gaussian(SeededRng(0), 100), 4, 32)
    (out,) = all_gather(topo, [c])
    np.testing.assert_array_equal(out, quant.dequantize(c))
    topo = ClusterTopology(4, 2)
    zeros = [quant.quantize(np.zeros(64), 4, 32) for _ in range(4)]
    for out in all_gather(topo, zeros):
        np.testing.assert_array_equal(out, np.zeros(256))
    with pytest.raises(ValueError):
        all_gather(topo, zeros[:3])
    with pytest.raises(TypeError):
        all_gather(topo, zeros[:3] + [np.zeros(64)])


@given(st.integers(0, 10**6), st.sampled_from([4, 8]), st.booleans())
def test_all_gather_ranks_agree(seed, k, wire):
    topo = ClusterTopology(8, 4)
    rng = SeededRng(seed)
    chunks = [quant.quantize(fill_gaussian(rng.spawn(p), 200, 0.0, 2.0), k, 64) for p in range(8)]
    outs = all_gather(topo, chunks, wire=wire)
    expect = np.concatenate([quant.dequantize(c) for c in chunks])
    for out in outs:
        np.testing.assert_array_equal(out, expect)


def test_all_gather_raw_arrays_lossless():
    topo = ClusterTopology(4, 2)
    parts = [fill_gaussian(SeededRng(p), 10) for p in range(4)]
    lg = ByteLedger()
    for out in all_gather(topo, parts, lg):
        np.testing.assert_array_equal(out, np.concatenate(parts))
    assert lg.bits_per_param("inter") == 32.0
