import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wgat.graph import InteractionSet, build_graph, k_core_filter, split_interactions
from wgat.synthetic import random_bipartite


@st.composite
def interaction_sets(draw, max_users=8, max_items=8):
    nu = draw(st.integers(1, max_users))
    ni = draw(st.integers(1, max_items))
    pairs = draw(st.sets(st.tuples(st.integers(0, nu - 1), st.integers(0, ni - 1)),
                         min_size=1, max_size=nu * ni))
    pairs = sorted(pairs)
    return InteractionSet([p[0] for p in pairs], [p[1] for p in pairs])


def nx_core_pairs(s: InteractionSet, k: int) -> set:
    g = nx.Graph()
    g.add_edges_from((("u", u), ("i", i)) for u, i in s.pairs())
    core = nx.k_core(g, k)
    return {(a[1], b[1]) if a[0] == "u" else (b[1], a[1]) for a, b in core.edges()}


class TestKCore:
    def test_chain_collapses_to_empty(self):
        s = InteractionSet([1, 1, 2], [1, 2, 1])
        assert len(k_core_filter(s, 2)) == 0

    def test_complete_bipartite_unchanged(self):
        u, i = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
        s = InteractionSet(u.ravel(), i.ravel())
        assert k_core_filter(s, 5).pairs() == s.pairs()

    @given(interaction_sets())
    def test_k1_is_identity(self, s):
        assert k_core_filter(s, 1).pairs() == s.pairs()

    def test_rejects_nonpositive_k(self):
        with pytest.raises(ValueError):
            k_core_filter(InteractionSet([0], [0]), 0)

    def test_trace_records_each_pass(self):
        trace = []
        k_core_filter(InteractionSet([1, 1, 2], [1, 2, 1]), 2, trace)
        assert trace[-1] == (0, 0, 0) and len(trace) >= 2

    @given(interaction_sets(), st.integers(1, 4))
    def test_matches_networkx_core(self, s, k):
        assert k_core_filter(s, k).pairs() == nx_core_pairs(s, k)

    @given(interaction_sets(), st.integers(1, 4))
    def test_idempotent_with_min_degree(self, s, k):
        once = k_core_filter(s, k)
        assert k_core_filter(once, k).pairs() == once.pairs()
        if len(once):
            assert np.bincount(once.users)[np.unique(once.users)].min() >= k
            assert np.bincount(once.items)[np.unique(once.items)].min() >= k


class TestSplit:
    def test_ceiling_rule(self):
        s = InteractionSet(np.zeros(10, int), np.arange(10))
        train, test = split_interactions(s, 0.8, seed=3)
        assert (len(train), len(test)) == (8, 2)

    def test_single_interaction_user_stays_in_train(self):
        s = InteractionSet([0, 1, 1], [0, 0, 1])
        train, test = split_interactions(s, 0.8, seed=0)
        assert (0, 0) in train.pairs() and 0 not in test.users

    def test_same_seed_same_split(self):
        s = random_bipartite(20, 30, 200, seed=1)
        a = split_interactions(s, 0.8, 7)
        b = split_interactions(s, 0.8, 7)
        assert a[0].pairs() == b[0].pairs() and a[1].pairs() == b[1].pairs()

    def test_independent_of_input_order(self):
        s = random_bipartite(20, 30, 200, seed=1)
        perm = np.random.default_rng(0).permutation(len(s))
        a = split_interactions(s, 0.8, 7)
        b = split_interactions(s.subset(perm), 0.8, 7)
        assert a[1].pairs() == b[1].pairs()

    @pytest.mark.parametrize("ratio", [0.0, 1.0, 1.5])
    def test_ratio_bounds(self, ratio):
        with pytest.raises(ValueError):
            split_interactions(InteractionSet([0, 0], [0, 1]), ratio)

    @given(interaction_sets(), st.floats(0.05, 0.95), st.integers(0, 100))
    def test_partition_properties(self, s, ratio, seed):
        train, test = split_interactions(s, ratio, seed)
        assert train.pairs().isdisjoint(test.pairs())
        assert train.pairs() | test.pairs() == s.pairs()
        assert len(train) + len(test) == len(s)
        counts = np.bincount(s.users)
        for u in np.unique(s.users):
            n_train = int(np.sum(train.users == u))
            n = counts[u]
            if n >= 2:
                assert 1 <= n_train <= n - 1
                assert n_train == min(max(int(np.ceil(ratio * n - 1e-12)), 1), n - 1)
            else:
                assert n_train == 1


class TestBuildGraph:
    def test_edge_count_and_layout(self):
        g = build_graph(InteractionSet([0, 0, 1], [0, 2, 1]), 2, 3)
        assert g.num_edges == 3 and g.num_nodes == 5
        np.testing.assert_array_equal(g.user_neighbors(0), [0, 2])
        np.testing.assert_array_equal(g.item_neighbors(1), [1])
        # item 0 is joint node 2 and points back at user 0
        np.testing.assert_array_equal(g.indices[g.indptr[2]:g.indptr[3]], [0])

    def test_duplicates_dropped(self, caplog):
        with caplog.at_level("INFO"):
            g = build_graph(InteractionSet([0, 0, 0], [1, 1, 0]))
        assert g.num_edges == 2 and "duplicate" in caplog.text

    def test_out_of_range_ids_rejected(self):
        with pytest.raises(ValueError):
            build_graph(InteractionSet([0, 3], [0, 0]), 2, 1)

    def test_isolated_nodes_listed(self):
        g = build_graph(InteractionSet([0], [0]), 2, 2)
        np.testing.assert_array_equal(g.isolated, [1, 3])

    @given(interaction_sets())
    def test_symmetric_adjacency_and_transpose(self, s):
        g = build_graph(s)
        rows = g.entry_rows
        pairs = set(zip(rows.tolist(), g.indices.tolist()))
        assert all((c, r) in pairs for r, c in pairs)
        # transpose_perm sends (r, c) to (c, r)
        np.testing.assert_array_equal(rows[g.transpose_perm], g.indices)
        np.testing.assert_array_equal(g.indices[g.transpose_perm], rows)
        # bipartite: no user-user or item-item entries
        assert np.all((rows < g.num_users) != (g.indices < g.num_users))
        for u in range(g.num_users):
            expect = sorted(i for uu, i in s.pairs() if uu == u)
            assert g.user_neighbors(u).tolist() == expect

    @given(interaction_sets())
    def test_has_edges(self, s):
        g = build_graph(s)
        u, i = np.meshgrid(np.arange(g.num_users), np.arange(g.num_items), indexing="ij")
        got = g.has_edges(u.ravel(), i.ravel())
        expect = [(a, b) in s.pairs() for a, b in zip(u.ravel(), i.ravel())]
        np.testing.assert_array_equal(got, expect)

    def test_train_and_test_edge_counts_add_up(self):
        s = k_core_filter(random_bipartite(30, 40, 400, seed=2), 3)
        train, test = split_interactions(s, 0.8, 0)
        assert build_graph(train).num_edges + len(test) == len(s)
