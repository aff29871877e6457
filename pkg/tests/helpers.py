"""Shared builders and independent oracles for the test suite.

The entropy oracle here recomputes everything from leaf sets with
math.fsum, deliberately sharing no code path with the package's
incremental ledger.
"""
from __future__ import annotations

import math

import numpy as np

from entropic_trees.coding_tree import CodingTree
from entropic_trees.propagation import Post, PropagationTree, ThreadRecord


def mk_tree(parent: list[int | None], weight: list[float],
            node_ids: list[str] | None = None) -> PropagationTree:
    """Assemble a PropagationTree directly from parent/weight arrays."""
    n = len(parent)
    degree = np.zeros(n, dtype=np.float64)
    for c, p in enumerate(parent):
        if p is not None:
            degree[c] += weight[c]
            degree[p] += weight[c]
    return PropagationTree(
        node_ids=node_ids or [f"n{i}" for i in range(n)],
        parent=list(parent),
        weight=list(weight),
        degree=degree,
        total_volume=float(degree.sum()),
    )


def random_prop_tree(rng: np.random.Generator, n: int,
                     wlo: float = 0.1, whi: float = 100.0) -> PropagationTree:
    """Random recursive tree on n nodes with uniform random edge weights."""
    parent: list[int | None] = [None]
    weight = [0.0]
    for i in range(1, n):
        parent.append(int(rng.integers(0, i)))
        weight.append(float(rng.uniform(wlo, whi)))
    return mk_tree(parent, weight)


def chain_thread(deltas: list[float], thread_id: str = "t0", event: str = "e0",
                 label: str = "TR", t0: float = 0.0) -> ThreadRecord:
    """Thread whose replies form a chain; reply i lags its parent by deltas[i]."""
    posts = [Post(id="p0", text="claim text", time=t0, reply_to=None)]
    t = t0
    for i, dt in enumerate(deltas, start=1):
        t += dt
        posts.append(Post(id=f"p{i}", text=f"reply {i}", time=t, reply_to=f"p{i-1}"))
    return ThreadRecord(thread_id=thread_id, event=event, label=label, posts=posts)


def star_thread(times: list[float], thread_id: str = "t0", event: str = "e0",
                label: str = "TR") -> ThreadRecord:
    """Claim at t=0 with every reply attached directly to it."""
    posts = [Post(id="p0", text="claim text", time=0.0, reply_to=None)]
    for i, t in enumerate(sorted(times), start=1):
        posts.append(Post(id=f"p{i}", text=f"reply {i}", time=t, reply_to="p0"))
    return ThreadRecord(thread_id=thread_id, event=event, label=label, posts=posts)


def leafsets(tree: CodingTree) -> dict[int, frozenset[int]]:
    """Leaf-payload set under every tree node, computed bottom-up."""
    out: dict[int, frozenset[int]] = {}
    for nid in reversed(tree.bfs_ids()):
        nd = tree.nodes[nid]
        if nd.leaf_payload is not None:
            out[nid] = frozenset([nd.leaf_payload])
        else:
            acc: set[int] = set()
            for c in nd.children:
                acc |= out[c]
            out[nid] = frozenset(acc)
    return out


def check_partition(tree: CodingTree, n_leaves: int) -> None:
    """Independent structural check: leaf bijection and child partitions."""
    sets = leafsets(tree)
    assert sets[tree.root] == frozenset(range(n_leaves))
    payloads = sorted(
        nd.leaf_payload for nd in tree.nodes.values() if nd.leaf_payload is not None
    )
    assert payloads == list(range(n_leaves))
    for nid, nd in tree.nodes.items():
        if nd.leaf_payload is not None:
            assert not nd.children
            continue
        union: set[int] = set()
        total = 0
        for c in nd.children:
            assert tree.nodes[c].parent == nid
            assert tree.nodes[c].height < nd.height
            union |= sets[c]
            total += len(sets[c])
        assert union == set(sets[nid])
        assert total == len(sets[nid]), "child leaf sets overlap"


def entropy_oracle(graph: PropagationTree, tree: CodingTree) -> float:
    """Structural entropy in bits by brute-force leaf-set evaluation."""
    vol_g = math.fsum(float(d) for d in graph.degree)
    edges = graph.edges()
    sets = leafsets(tree)
    vols = {
        nid: math.fsum(float(graph.degree[i]) for i in s)
        for nid, s in sets.items()
    }
    terms = []
    for nid, nd in tree.nodes.items():
        if nd.parent is None:
            continue
        members = sets[nid]
        g = math.fsum(w for u, v, w in edges if (u in members) != (v in members))
        if g == 0.0:
            continue
        terms.append(-(g / vol_g) * math.log2(vols[nid] / vols[nd.parent]))
    return math.fsum(terms)
