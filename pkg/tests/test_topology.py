import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from epidemic_learning.errors import InvalidDegree, InvalidSize, OutOfRange
from epidemic_learning.topology import (
    RoundGraph,
    TopologyKind,
    build_static,
    in_neighbors,
    sample_regular_batch,
    sample_regular_random,
    sample_s_out,
    sample_s_out_batch,
    validate_kind,
)


@st.composite
def regular_params(draw):
    n = draw(st.integers(2, 40))
    s = draw(st.sampled_from([s for s in range(1, n) if (n * s) % 2 == 0]))
    return n, s


@settings(max_examples=60, deadline=None)
@given(regular_params(), st.integers(0, 2**32 - 1))
def test_regular_graph_properties(params, seed):
    n, s = params
    g = sample_regular_random(n, s, np.random.default_rng(seed))
    assert not g.directed
    assert g.out_degrees() == [s] * n
    a = g.adjacency_matrix()
    np.testing.assert_array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))),
       st.integers(0, 2**32 - 1))
def test_s_out_graph_properties(params, seed):
    n, s = params
    g = sample_s_out(n, s, np.random.default_rng(seed))
    assert g.directed
    assert g.out_degrees() == [s] * n
    for i, row in enumerate(g.out_adj):
        assert i not in row
        assert len(set(row)) == s
    assert sum(g.in_degrees()) == n * s


def test_regular_n4_s3_is_complete():
    g = sample_regular_random(4, 3, np.random.default_rng(0))
    assert all(set(row) == set(range(4)) - {i} for i, row in enumerate(g.out_adj))


def test_regular_n8_s2_is_union_of_cycles():
    g = sample_regular_random(8, 2, np.random.default_rng(1))
    seen = set()
    for start in range(8):
        if start in seen:
            continue
        prev, cur, length = None, start, 0
        while True:
            seen.add(cur)
            nxt = [v for v in g.out_adj[cur] if v != prev][0]
            prev, cur, length = cur, nxt, length + 1
            if cur == start:
                break
        assert length >= 3


def test_regular_pair_frequency_is_s_over_n_minus_1():
    n, s, trials = 8, 2, 100_000
    adj = sample_regular_batch(n, s, trials, np.random.default_rng(5))
    hits = (adj == 1).any(axis=2)  # node i linked to node 1
    p = s / (n - 1)
    freq = hits[:, 0].mean()
    se = math.sqrt(p * (1 - p) / trials)
    assert abs(freq - p) <= 3 * se
    # every (i, j) pair; a 3-SE band per pair allows a few of 56 to stray
    counts = np.zeros((n, n))
    for k in range(s):
        np.add.at(counts, (np.repeat(np.arange(n)[None], trials, 0), adj[:, :, k]), 1)
    off = counts[~np.eye(n, dtype=bool)] / trials
    assert np.max(np.abs(off - p)) <= 4.5 * se


def _subset_counts(rows: np.ndarray, pool: list[int], s: int) -> np.ndarray:
    index = {c: k for k, c in enumerate(itertools.combinations(pool, s))}
    counts = np.zeros(len(index))
    for row in np.sort(rows, axis=1):
        counts[index[tuple(row)]] += 1
    return counts


@pytest.mark.parametrize("sampler", [sample_regular_batch, sample_s_out_batch])
def test_neighbor_set_is_uniform_subset(sampler):
    n, s, trials = 8, 2, 42_000
    adj = sampler(n, s, trials, np.random.default_rng(11))
    counts = _subset_counts(adj[:, 3, :], [j for j in range(n) if j != 3], s)
    assert counts.size == math.comb(n - 1, s)
    assert stats.chisquare(counts).pvalue > 0.01


def test_s_out_odd_s_subsets_uniform():
    n, s, trials = 7, 3, 35_000
    adj = sample_s_out_batch(n, s, trials, np.random.default_rng(2))
    counts = _subset_counts(adj[:, 0, :], list(range(1, n)), s)
    assert stats.chisquare(counts).pvalue > 0.01


def test_s_out_indegree_is_binomial():
    n, s, trials = 100, 7, 20_000
    adj = sample_s_out_batch(n, s, trials, np.random.default_rng(3))
    indeg = (adj == 0).any(axis=2).sum(axis=1)
    dist = stats.binom(n - 1, s / (n - 1))
    edges = [0, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, n]
    observed = np.histogram(indeg, bins=edges)[0]
    expected = np.array([dist.cdf(hi - 1) - dist.cdf(lo - 1) for lo, hi in zip(edges, edges[1:])])
    expected *= trials / expected.sum()
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_s_out_full_degree_hits_every_other_node():
    adj = sample_s_out_batch(100, 99, 3, np.random.default_rng(0))
    for b in range(3):
        for i in range(100):
            assert sorted(adj[b, i]) == [j for j in range(100) if j != i]


def test_samplers_are_deterministic_per_seed():
    a = sample_s_out_batch(50, 4, 10, np.random.default_rng(9))
    b = sample_s_out_batch(50, 4, 10, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    a = sample_regular_batch(50, 4, 10, np.random.default_rng(9))
    b = sample_regular_batch(50, 4, 10, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(
    "n,s,exc",
    [(5, 3, InvalidDegree), (8, 0, InvalidDegree), (8, 8, InvalidDegree), (1, 1, InvalidSize)],
)
def test_regular_rejects_bad_parameters(n, s, exc):
    with pytest.raises(exc):
        sample_regular_random(n, s, np.random.default_rng(0))


def test_s_out_rejects_bad_parameters():
    with pytest.raises(InvalidDegree):
        sample_s_out(5, 5, np.random.default_rng(0))
    with pytest.raises(InvalidDegree):
        sample_s_out(5, 0, np.random.default_rng(0))


def test_ring_and_torus_neighbors():
    ring = build_static(TopologyKind.RING, 6)
    assert ring.out_adj[0] == (1, 5)
    assert ring.out_degrees() == [2] * 6
    torus = build_static("torus", 9)
    assert set(torus.out_adj[0]) == {1, 2, 3, 6}
    assert torus.out_degrees() == [4] * 9
    fc = build_static("fully-connected", 5)
    assert fc.edge_count() == 20


def test_static_validation():
    with pytest.raises(InvalidSize):
        build_static("torus", 10)
    with pytest.raises(InvalidSize):
        build_static("ring", 2)
    with pytest.raises(InvalidDegree):
        validate_kind("static-regular", 5, 3)
    with pytest.raises(ValueError):
        build_static("el-oracle", 8, 2)
    g = build_static("static-regular", 10, 4, np.random.default_rng(0))
    assert g.out_degrees() == [4] * 10


def test_in_neighbors_directed_and_undirected():
    g = RoundGraph.from_lists([[1, 2], [2], [0]], directed=True)
    assert in_neighbors(g, 2) == {0, 1}
    assert in_neighbors(g, 0) == {2}
    assert g.in_adj() == [[2], [0], [0, 1]]
    u = build_static("ring", 5)
    assert in_neighbors(u, 0) == {1, 4}
    with pytest.raises(OutOfRange):
        in_neighbors(g, 3)


def test_round_graph_validation():
    with pytest.raises(ValueError):
        RoundGraph.from_lists([[0], [0]], directed=True)
    with pytest.raises(ValueError):
        RoundGraph.from_lists([[1], []], directed=False)
    with pytest.raises(OutOfRange):
        RoundGraph.from_lists([[2], [0]], directed=True)


def test_kind_parsing():
    assert TopologyKind.parse("EL_Oracle") is TopologyKind.EL_ORACLE
    assert TopologyKind.parse("complete") is TopologyKind.FULLY_CONNECTED
    with pytest.raises(ValueError):
        TopologyKind.parse("star")
