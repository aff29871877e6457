"""Coding-tree edits and the greedy height-K construction."""
import math

import numpy as np
import pytest

from entropic_trees.coding_tree import (
    CodingTree,
    ConstructionTrace,
    assert_uniform_leaf_depth,
    brute_force_optimal,
    build_coding_tree,
    build_identity_coding_tree,
    build_random_coding_tree,
    coding_tree_from_payload,
    coding_tree_to_payload,
    join,
    pad,
    serialize_coding_tree,
    star_tree,
    trim,
    validate_coding_tree,
)
from entropic_trees.entropy import EntropyLedger, structural_entropy

from helpers import check_partition, mk_tree, random_prop_tree

UNIT_PATH_4 = ([None, 0, 1, 2], [0.0, 1.0, 1.0, 1.0])


def root_children(tree: CodingTree) -> list[int]:
    return list(tree.nodes[tree.root].children)


class TestStarTree:
    def test_shape(self):
        tree = star_tree(4)
        assert tree.height == 1
        assert root_children(tree) == [0, 1, 2, 3]
        assert all(tree.nodes[i].leaf_payload == i for i in range(4))
        check_partition(tree, 4)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            star_tree(0)


class TestJoin:
    def test_join_two_of_three(self):
        tree = star_tree(3)
        beta = join(tree, 0, 1)
        assert set(root_children(tree)) == {beta, 2}
        assert list(tree.nodes[beta].children) == [0, 1]
        assert tree.nodes[beta].height == 1
        assert tree.height == 2
        check_partition(tree, 3)

    def test_join_then_trim_restores_children(self):
        tree = star_tree(3)
        before = set(root_children(tree))
        beta = join(tree, 0, 1)
        trim(tree, beta)
        assert set(root_children(tree)) == before
        assert tree.height == 1

    def test_join_requires_distinct_root_children(self):
        tree = star_tree(3)
        with pytest.raises(ValueError):
            join(tree, 0, 0)
        beta = join(tree, 0, 1)
        with pytest.raises(ValueError):
            join(tree, 0, 2)  # 0 now lives under beta
        assert beta in root_children(tree)

    def test_ledger_volume_adds_after_join(self):
        graph = mk_tree(*UNIT_PATH_4)
        tree = star_tree(4)
        ledger = EntropyLedger.from_tree(graph, tree)
        va, vb = ledger.vol[0], ledger.vol[1]
        beta = join(tree, 0, 1)
        ledger.record_join(beta)
        assert ledger.vol[beta] == va + vb


class TestTrim:
    def test_grandchildren_take_the_removed_slot(self):
        tree = star_tree(5)
        beta = join(tree, 1, 2)
        gamma = join(tree, 3, 4)
        assert root_children(tree) == [0, beta, gamma]
        trim(tree, beta)
        assert root_children(tree) == [0, 1, 2, gamma]
        check_partition(tree, 5)

    def test_single_child_node_promotes_child(self):
        tree = star_tree(3)
        ids = ["a", "b", "c"]
        before = serialize_coding_tree(tree, ids)
        mid = pad(tree, 1)
        assert list(tree.nodes[mid].children) == [1]
        trim(tree, mid)
        assert serialize_coding_tree(tree, ids) == before

    def test_root_and_leaf_rejected(self):
        tree = star_tree(3)
        with pytest.raises(ValueError):
            trim(tree, tree.root)
        with pytest.raises(ValueError):
            trim(tree, 0)

    def test_height_settles_after_trim(self):
        tree = star_tree(4)
        beta = join(tree, 0, 1)
        assert tree.height == 2
        trim(tree, beta)
        assert tree.height == 1


class TestPad:
    def test_pad_inserts_unary_node(self):
        tree = star_tree(3)
        mid = pad(tree, 0)
        assert tree.nodes[0].parent == mid
        assert list(tree.nodes[mid].children) == [0]
        assert tree.nodes[mid].height == 1
        assert tree.height == 2
        check_partition(tree, 3)

    def test_pad_moves_leaf_one_level_down(self):
        # all leaves at depth 2 except one at depth 1; one pad fixes it
        graph = mk_tree(*UNIT_PATH_4)
        tree = star_tree(4)
        join(tree, 0, 1)
        join(tree, 2, 3)
        depths = dict.fromkeys(range(4), 2)
        assert tree.leaf_depths() == depths
        tree2 = star_tree(2)
        pad(tree2, 0)
        assert tree2.leaf_depths() == {0: 2, 1: 1}
        pad(tree2, 1)
        assert tree2.leaf_depths() == {0: 2, 1: 2}

    def test_pad_root_rejected(self):
        tree = star_tree(2)
        with pytest.raises(ValueError):
            pad(tree, tree.root)

    def test_pad_keeps_sibling_order(self):
        tree = star_tree(3)
        mid = pad(tree, 1)
        assert root_children(tree) == [0, mid, 2]


class TestBuild:
    def test_two_nodes_k2_pads_to_depth(self):
        graph = mk_tree([None, 0], [0.0, 3.0])
        tree = build_coding_tree(graph, K=2)
        assert tree.n_nodes == 5
        assert tree.leaf_depths() == {0: 2, 1: 2}
        assert len(root_children(tree)) == 2
        validate_coding_tree(tree, 2)

    def test_unit_path4_k2_matches_brute_force(self):
        graph = mk_tree(*UNIT_PATH_4)
        greedy = structural_entropy(graph, build_coding_tree(graph, K=2))
        _, best = brute_force_optimal(graph, K=2)
        assert abs(greedy - best) < 1e-12
        assert abs(best - 1.2516291673878228) < 1e-12

    def test_balanced_eight_node_instrumented(self):
        parent = [None] + [(i - 1) // 2 for i in range(1, 8)]
        rng = np.random.default_rng(3)
        weight = [0.0] + [float(rng.uniform(0.5, 5.0)) for _ in range(7)]
        graph = mk_tree(parent, weight)
        trace = ConstructionTrace(verify=True)
        tree = build_coding_tree(graph, K=2, trace=trace)
        assert trace.height_after_expansion <= 4  # ceil(log2 8) + 1
        assert tree.height == 2
        assert trace.joins == 8 - 2
        # every recorded step's predicted delta matches the full recompute
        running = trace.entropy_star
        for step in trace.steps:
            if step.op == "join":
                running -= step.delta
            elif step.op == "trim":
                running += step.delta
            else:
                continue
            assert abs(step.entropy_after - running) < 1e-9
            running = step.entropy_after
        assert abs(structural_entropy(graph, tree) - running) < 1e-9

    def test_k_below_one_rejected(self):
        graph = mk_tree([None, 0], [0.0, 1.0])
        with pytest.raises(ValueError):
            build_coding_tree(graph, K=0)

    def test_single_post_thread_short_circuits(self):
        graph = mk_tree([None], [0.0])
        tree = build_coding_tree(graph, K=3)
        validate_coding_tree(tree, 1)
        assert_uniform_leaf_depth(tree, 3)
        assert tree.n_nodes == 4  # leaf plus a chain of three

    def test_no_trims_when_expansion_stays_low(self):
        graph = mk_tree(*UNIT_PATH_4)
        trace = ConstructionTrace()
        tree = build_coding_tree(graph, K=7, trace=trace)
        assert trace.trims == 0
        assert_uniform_leaf_depth(tree, 7)

    def test_expansion_leaves_binary_root(self):
        # with K high enough no trims run, so the joined root survives;
        # compression may later promote grandchildren back to the root
        rng = np.random.default_rng(4)
        for n in (2, 3, 9, 17):
            graph = random_prop_tree(rng, n)
            trace = ConstructionTrace()
            tree = build_coding_tree(graph, K=8, trace=trace)
            assert trace.trims == 0
            assert len(root_children(tree)) == 2
            low = build_coding_tree(graph, K=2)
            assert len(root_children(low)) >= 2

    def test_step_budget(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            n = int(rng.integers(2, 60))
            graph = random_prop_tree(rng, n)
            trace = ConstructionTrace()
            build_coding_tree(graph, K=int(rng.integers(1, 5)), trace=trace)
            assert trace.joins + trace.trims <= 2 * n

    def test_deterministic_serialization(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            n = int(rng.integers(2, 30))
            graph = random_prop_tree(rng, n)
            ids = [f"n{i}" for i in range(n)]
            k = int(rng.integers(1, 5))
            assert (serialize_coding_tree(build_coding_tree(graph, k), ids)
                    == serialize_coding_tree(build_coding_tree(graph, k), ids))

    def test_greedy_never_beats_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(12):
            n = int(rng.integers(2, 8))
            graph = random_prop_tree(rng, n, 0.5, 10.0)
            for K in (1, 2, 3):
                greedy = structural_entropy(graph, build_coding_tree(graph, K))
                _, best = brute_force_optimal(graph, K)
                assert greedy >= best - 1e-12

    def test_all_leaves_reach_depth_k(self):
        rng = np.random.default_rng(8)
        for _ in range(15):
            n = int(rng.integers(2, 50))
            graph = random_prop_tree(rng, n)
            K = int(rng.integers(1, 8))
            tree = build_coding_tree(graph, K)
            validate_coding_tree(tree, n)
            assert_uniform_leaf_depth(tree, K)
            check_partition(tree, n)


class TestBruteForce:
    def test_two_node_graph_any_k(self):
        graph = mk_tree([None, 0], [0.0, 4.2])
        for K in (1, 2, 3):
            tree, value = brute_force_optimal(graph, K)
            assert abs(value - 1.0) < 1e-12
            assert abs(structural_entropy(graph, tree) - value) < 1e-12
            assert_uniform_leaf_depth(tree, K)

    def test_path3_k1_only_star_exists(self):
        graph = mk_tree([None, 0, 1], [0.0, 1.0, 1.0])
        _, value = brute_force_optimal(graph, K=1)
        assert abs(value - 1.5) < 1e-12

    def test_returned_tree_achieves_value(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            n = int(rng.integers(2, 7))
            graph = random_prop_tree(rng, n, 0.5, 10.0)
            K = int(rng.integers(1, 4))
            tree, value = brute_force_optimal(graph, K)
            validate_coding_tree(tree, n)
            assert abs(structural_entropy(graph, tree) - value) < 1e-10

    def test_size_limit(self):
        graph = random_prop_tree(np.random.default_rng(10), 9)
        with pytest.raises(ValueError):
            brute_force_optimal(graph, 2)


class TestAlternativeBuilders:
    def test_random_builder_valid_and_seeded(self):
        graph = random_prop_tree(np.random.default_rng(11), 14)
        ids = [f"n{i}" for i in range(14)]
        a = build_random_coding_tree(graph, K=3, seed=0)
        b = build_random_coding_tree(graph, K=3, seed=0)
        c = build_random_coding_tree(graph, K=3, seed=1)
        validate_coding_tree(a, 14)
        assert_uniform_leaf_depth(a, 3)
        assert serialize_coding_tree(a, ids) == serialize_coding_tree(b, ids)
        assert serialize_coding_tree(a, ids) != serialize_coding_tree(c, ids)

    def test_identity_builder_mirrors_reply_depth(self):
        graph = mk_tree(*UNIT_PATH_4)  # chain, reply depth 3
        tree = build_identity_coding_tree(graph, K=3)
        validate_coding_tree(tree, 4)
        assert_uniform_leaf_depth(tree, 3)
        with pytest.raises(ValueError):
            build_identity_coding_tree(graph, K=2)

    def test_identity_builder_single_post(self):
        graph = mk_tree([None], [0.0])
        tree = build_identity_coding_tree(graph, K=2)
        validate_coding_tree(tree, 1)
        assert_uniform_leaf_depth(tree, 2)


class TestOpSequences:
    def test_partition_survives_random_edits(self):
        rng = np.random.default_rng(12)
        for _ in range(8):
            n = int(rng.integers(3, 15))
            tree = star_tree(n)
            for _ in range(60):
                ops = []
                kids = root_children(tree)
                if len(kids) > 2:
                    ops.append("join")
                internal = [
                    nid for nid, nd in tree.nodes.items()
                    if nd.parent is not None and nd.children
                ]
                if internal:
                    ops.append("trim")
                non_root = [nid for nid in tree.nodes if nid != tree.root]
                if tree.height < 12:
                    ops.append("pad")
                op = ops[int(rng.integers(0, len(ops)))]
                if op == "join":
                    i, j = rng.choice(len(kids), size=2, replace=False)
                    join(tree, kids[int(i)], kids[int(j)])
                elif op == "trim":
                    trim(tree, internal[int(rng.integers(0, len(internal)))])
                else:
                    pad(tree, non_root[int(rng.integers(0, len(non_root)))])
                check_partition(tree, n)
                validate_coding_tree(tree, n)


class TestSerialization:
    def test_payload_roundtrip(self):
        graph = random_prop_tree(np.random.default_rng(13), 9)
        ids = [f"n{i}" for i in range(9)]
        tree = build_coding_tree(graph, K=3)
        payload = coding_tree_to_payload(tree, ids)
        assert payload["K"] == 3
        back = coding_tree_from_payload(payload, ids)
        assert serialize_coding_tree(back, ids) == serialize_coding_tree(tree, ids)

    def test_payload_rejects_unknown_leaf(self):
        tree = build_coding_tree(mk_tree([None, 0], [0.0, 1.0]), K=1)
        payload = coding_tree_to_payload(tree, ["a", "b"])
        with pytest.raises(ValueError):
            coding_tree_from_payload(payload, ["a", "zzz"])

    def test_payload_rejects_wrong_k(self):
        tree = build_coding_tree(mk_tree([None, 0], [0.0, 1.0]), K=2)
        payload = coding_tree_to_payload(tree, ["a", "b"])
        payload["K"] = 3
        with pytest.raises(ValueError):
            coding_tree_from_payload(payload, ["a", "b"])
