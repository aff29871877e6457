"""Structural entropy of weighted graphs under coding trees.

The entropy of a graph G under a coding tree T is the sum, over every
non-root tree node, of -(g / vol(G)) * log2(vol(node) / vol(parent)): g is
the total weight of graph edges crossing the node's leaf set, vol sums the
weighted degrees of that leaf set, and vol(G) is the whole graph's volume.
Logs are base 2, so entropies are in bits.  A node with zero cut contributes
zero by convention.

EntropyLedger keeps the per-node (vol, cut) bookkeeping for one
(graph, tree) pair and can update it incrementally across join/trim/pad
edits; structural_entropy always recomputes from scratch and doubles as the
oracle for the incremental path.
"""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # structural types only; no runtime import cycle
    from .coding_tree import CodingTree
    from .propagation import PropagationTree


class LeafMismatchError(ValueError):
    """Tree leaves do not biject onto the graph's nodes."""


def _term(g: float, v: float, v_parent: float, graph_volume: float) -> float:
    # zero-cut nodes contribute nothing; avoids 0 * log(...) edge cases
    if g == 0.0:
        return 0.0
    return -(g / graph_volume) * math.log2(v / v_parent)


class EntropyLedger:
    """Volume/cut bookkeeping for a coding tree over one weighted graph."""

    def __init__(self, graph: PropagationTree, tree: CodingTree):
        self.graph = graph
        self.tree = tree
        self.graph_volume = float(graph.total_volume)
        self.vol: dict[int, float] = {}
        self.cut: dict[int, float] = {}
        # cross-edge weights between current root children; built on demand,
        # maintained through joins, invalidated by trims/pads
        self.root_cross: dict[int, dict[int, float]] | None = None

    # -- construction ------------------------------------------------------

    @classmethod
    def from_tree(cls, graph: PropagationTree, tree: CodingTree) -> EntropyLedger:
        """Compute (vol, cut) for every tree node from scratch."""
        if graph.total_volume <= 0.0:
            raise ValueError("degenerate graph: zero volume (no edges)")
        ledger = cls(graph, tree)
        nodes = tree.nodes
        payloads = sorted(
            nd.leaf_payload for nd in nodes.values() if nd.leaf_payload is not None
        )
        if payloads != list(range(graph.n_nodes)):
            raise LeafMismatchError(
                f"tree leaves {len(payloads)} do not biject onto graph nodes {graph.n_nodes}"
            )
        for nd in nodes.values():
            if nd.leaf_payload is not None and nd.children:
                raise LeafMismatchError("leaf payload on an internal node")

        depth = {tree.root: 0}
        order = [tree.root]
        i = 0
        while i < len(order):
            nid = order[i]
            i += 1
            for c in nodes[nid].children:
                depth[c] = depth[nid] + 1
                order.append(c)
        if len(order) != len(nodes):
            raise ValueError("coding tree has nodes unreachable from the root")

        # edge weight accumulates at the LCA of its endpoints' leaves; a
        # node's internal weight is then a bottom-up subtree sum
        leaf_node = {
            nd.leaf_payload: nid
            for nid, nd in nodes.items()
            if nd.leaf_payload is not None
        }
        acc = dict.fromkeys(nodes, 0.0)
        for u, v, w in graph.edges():
            a, b = leaf_node[u], leaf_node[v]
            while depth[a] > depth[b]:
                a = nodes[a].parent
            while depth[b] > depth[a]:
                b = nodes[b].parent
            while a != b:
                a = nodes[a].parent
                b = nodes[b].parent
            acc[a] += w

        internal = {}
        degree = graph.degree
        for nid in reversed(order):  # children before parents
            nd = nodes[nid]
            if nd.leaf_payload is not None:
                ledger.vol[nid] = float(degree[nd.leaf_payload])
                internal[nid] = 0.0
            else:
                ledger.vol[nid] = math.fsum(ledger.vol[c] for c in nd.children)
                internal[nid] = acc[nid] + math.fsum(internal[c] for c in nd.children)
            ledger.cut[nid] = ledger.vol[nid] - 2.0 * internal[nid]
        ledger.cut[tree.root] = 0.0  # whole graph has no boundary
        return ledger

    # -- queries -----------------------------------------------------------

    def node_term(self, nid: int) -> float:
        nd = self.tree.nodes[nid]
        if nd.parent is None:
            return 0.0
        return _term(
            self.cut[nid], self.vol[nid], self.vol[nd.parent], self.graph_volume
        )

    def total_entropy(self) -> float:
        root = self.tree.root
        terms = np.array(
            [self.node_term(nid) for nid in self.tree.nodes if nid != root],
            dtype=np.float64,
        )
        return float(np.sum(terms))  # numpy pairwise summation

    def _leafset(self, nid: int) -> set[int]:
        nodes = self.tree.nodes
        out: set[int] = set()
        stack = [nid]
        while stack:
            cur = nodes[stack.pop()]
            if cur.leaf_payload is not None:
                out.add(cur.leaf_payload)
            else:
                stack.extend(cur.children)
        return out

    def _cut_of(self, members: set[int]) -> float:
        return math.fsum(
            w for u, v, w in self.graph.edges() if (u in members) != (v in members)
        )

    def ensure_root_cross(self) -> None:
        if self.root_cross is not None:
            return
        nodes = self.tree.nodes
        root = self.tree.root
        anc: dict[int, int] = {}  # graph index -> root-child ancestor id
        for nid, nd in nodes.items():
            if nd.leaf_payload is None:
                continue
            cur = nid
            while nodes[cur].parent != root:
                cur = nodes[cur].parent
            anc[nd.leaf_payload] = cur
        cross: dict[int, dict[int, float]] = {c: {} for c in nodes[root].children}
        for u, v, w in self.graph.edges():
            a, b = anc[u], anc[v]
            if a == b:
                continue
            cross[a][b] = cross[a].get(b, 0.0) + w
            cross[b][a] = cross[b].get(a, 0.0) + w
        self.root_cross = cross

    def root_cross_weight(self, a: int, b: int) -> float:
        """Total edge weight between the leaf sets of two root children."""
        if self.root_cross is not None:
            return self.root_cross.get(a, {}).get(b, 0.0)
        cut_union = self._cut_of(self._leafset(a) | self._leafset(b))
        return (self.cut[a] + self.cut[b] - cut_union) / 2.0

    # -- incremental deltas ------------------------------------------------

    def delta_join(self, v_j: int, v_k: int) -> float:
        """Entropy change H(T) - H(T.join(v_j, v_k)); positive is a decrease.

        Only the terms of v_j, v_k and the inserted parent move, so this
        costs O(1) given the cross weight.
        """
        root = self.tree.root
        kids = self.tree.nodes[root].children
        if v_j == v_k or v_j not in kids or v_k not in kids:
            raise ValueError("join delta requires two distinct children of the root")
        cross = self.root_cross_weight(v_j, v_k)
        volG = self.graph_volume
        vj, gj = self.vol[v_j], self.cut[v_j]
        vk, gk = self.vol[v_k], self.cut[v_k]
        vb = vj + vk
        gb = gj + gk - 2.0 * cross
        vol_root = self.vol[root]
        before = _term(gj, vj, vol_root, volG) + _term(gk, vk, vol_root, volG)
        after = (
            _term(gj, vj, vb, volG)
            + _term(gk, vk, vb, volG)
            + _term(gb, vb, vol_root, volG)
        )
        return before - after

    def delta_trim(self, v_b: int) -> float:
        """Entropy change H(T.trim(v_b)) - H(T); nonnegative in exact math.

        Only v_b's own term and its children's terms move.
        """
        nd = self.tree.nodes[v_b]
        if nd.parent is None:
            raise ValueError("cannot trim the root")
        if not nd.children:
            raise ValueError("cannot trim a leaf")
        volG = self.graph_volume
        vol_p = self.vol[nd.parent]
        vol_b, g_b = self.vol[v_b], self.cut[v_b]
        before = _term(g_b, vol_b, vol_p, volG)
        after = 0.0
        for c in nd.children:
            before += _term(self.cut[c], self.vol[c], vol_b, volG)
            after += _term(self.cut[c], self.vol[c], vol_p, volG)
        return after - before

    # -- incremental maintenance -------------------------------------------

    def record_join(self, beta: int, cross: float | None = None) -> None:
        """Update entries after join created node `beta` under the root.

        Callers that already know the cross weight of the joined pair can
        pass it to skip the lookup.
        """
        a, b = list(self.tree.nodes[beta].children)
        if self.root_cross is None:
            cross_ab = cross if cross is not None else self.root_cross_weight(a, b)
        else:
            maps = self.root_cross
            ma = maps.pop(a, {})
            mb = maps.pop(b, {})
            cross_ab = ma.get(b, 0.0)
            if len(ma) < len(mb):
                ma, mb = mb, ma
            ma.pop(a, None)
            ma.pop(b, None)
            for u, w in mb.items():
                if u == a or u == b:
                    continue
                ma[u] = ma.get(u, 0.0) + w
            maps[beta] = ma
            for u in ma:
                mu = maps.get(u)
                if mu is None:
                    continue
                w = mu.pop(a, 0.0) + mu.pop(b, 0.0)
                mu[beta] = w
        self.vol[beta] = self.vol[a] + self.vol[b]
        self.cut[beta] = self.cut[a] + self.cut[b] - 2.0 * cross_ab

    def record_trim(self, nid: int) -> None:
        """Drop entries of a node about to be (or just) trimmed away."""
        self.vol.pop(nid, None)
        self.cut.pop(nid, None)
        self.root_cross = None

    def record_pad(self, new_id: int) -> None:
        """A pad node inherits its single child's volume and cut."""
        child = next(iter(self.tree.nodes[new_id].children))
        self.vol[new_id] = self.vol[child]
        self.cut[new_id] = self.cut[child]
        self.root_cross = None


def structural_entropy(graph: PropagationTree, tree: CodingTree) -> float:
    """Full from-scratch entropy of the graph under the tree, in bits."""
    return EntropyLedger.from_tree(graph, tree).total_entropy()


def delta_join(ledger: EntropyLedger, v_j: int, v_k: int) -> float:
    return ledger.delta_join(v_j, v_k)


def delta_trim(ledger: EntropyLedger, v_b: int) -> float:
    return ledger.delta_trim(v_b)
