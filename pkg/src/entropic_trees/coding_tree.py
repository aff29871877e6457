"""Coding trees: rooted hierarchical partitions of a graph's node set.

Leaves biject onto graph nodes; every internal node's children partition its
leaf set.  The greedy builder minimizes structural entropy in three phases:

1. expansion -- from the height-1 star, repeatedly join the pair of root
   children with the largest entropy decrease until the root is binary;
2. compression -- while the tree is taller than K, trim the internal node
   whose removal raises entropy the least;
3. alignment -- insert entropy-neutral pad nodes until every leaf sits at
   depth exactly K.

Candidate joins/trims live in lazily-invalidated heaps keyed by the
incremental entropy deltas; ties break toward the smallest node id (pair).
Node heights are kept exact (leaf 0, internal 1 + max child) through every
edit, which is what the alignment phase keys on.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .entropy import EntropyLedger, structural_entropy
from .propagation import PropagationTree


class TreeNode:
    """Arena node. `children` is an insertion-ordered id set (dict keys)."""

    __slots__ = ("parent", "children", "height", "leaf_payload")

    def __init__(self, parent: int | None = None, height: int = 0,
                 leaf_payload: int | None = None):
        self.parent = parent
        self.children: dict[int, None] = {}
        self.height = height
        self.leaf_payload = leaf_payload

    @property
    def is_leaf(self) -> bool:
        return self.leaf_payload is not None


class CodingTree:
    def __init__(self) -> None:
        self.nodes: dict[int, TreeNode] = {}
        self.root: int = -1
        self._next_id = 0

    def new_node(self, parent: int | None = None, height: int = 0,
                 leaf_payload: int | None = None) -> int:
        nid = self._next_id
        self._next_id += 1
        self.nodes[nid] = TreeNode(parent=parent, height=height, leaf_payload=leaf_payload)
        return nid

    @property
    def height(self) -> int:
        return self.nodes[self.root].height

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def bfs_ids(self) -> list[int]:
        order = [self.root]
        i = 0
        while i < len(order):
            order.extend(self.nodes[order[i]].children)
            i += 1
        return order

    def leaf_depths(self) -> dict[int, int]:
        """Map leaf payload -> depth below the root."""
        depth = {self.root: 0}
        out: dict[int, int] = {}
        for nid in self.bfs_ids():
            nd = self.nodes[nid]
            if nid != self.root:
                depth[nid] = depth[nd.parent] + 1
            if nd.leaf_payload is not None:
                out[nd.leaf_payload] = depth[nid]
        return out


def star_tree(n_leaves: int) -> CodingTree:
    """Height-1 tree: every graph node a direct leaf child of the root.

    Leaf ids equal their payload indices; the root gets id n_leaves.
    """
    if n_leaves < 1:
        raise ValueError("need at least one leaf")
    tree = CodingTree()
    for i in range(n_leaves):
        tree.new_node(parent=None, height=0, leaf_payload=i)
    root = tree.new_node(parent=None, height=1)
    tree.root = root
    rn = tree.nodes[root]
    for i in range(n_leaves):
        tree.nodes[i].parent = root
        rn.children[i] = None
    return tree


# -- edits -----------------------------------------------------------------

def join(tree: CodingTree, a: int, b: int) -> int:
    """Insert a new node under the root adopting root children a and b."""
    rn = tree.nodes[tree.root]
    if a == b or a not in rn.children or b not in rn.children:
        raise ValueError("join requires two distinct children of the root")
    na, nb = tree.nodes[a], tree.nodes[b]
    del rn.children[a]
    del rn.children[b]
    beta = tree.new_node(parent=tree.root, height=max(na.height, nb.height) + 1)
    nbeta = tree.nodes[beta]
    nbeta.children[a] = None
    nbeta.children[b] = None
    na.parent = beta
    nb.parent = beta
    rn.children[beta] = None
    if rn.height <= nbeta.height:
        rn.height = nbeta.height + 1
    return beta


def trim(tree: CodingTree, b: int) -> list[int]:
    """Splice out internal node b, promoting its children to b's parent.

    Returns the promoted child ids.
    """
    nd = tree.nodes[b]
    if nd.parent is None:
        raise ValueError("cannot trim the root")
    if not nd.children:
        raise ValueError("cannot trim a leaf")
    pid = nd.parent
    pn = tree.nodes[pid]
    moved = list(nd.children)
    spliced: dict[int, None] = {}
    for key in pn.children:  # grandchildren take b's slot, order kept
        if key == b:
            for c in moved:
                spliced[c] = None
        else:
            spliced[key] = None
    pn.children = spliced
    for c in moved:
        tree.nodes[c].parent = pid
    h_b = nd.height
    del tree.nodes[b]
    if h_b + 1 == pn.height:
        _settle_height(tree, pid)
    return moved


def pad(tree: CodingTree, a: int) -> int:
    """Insert a unary node between a and its parent; entropy-neutral."""
    nd = tree.nodes[a]
    if nd.parent is None:
        raise ValueError("cannot pad the root")
    pid = nd.parent
    pn = tree.nodes[pid]
    mid = tree.new_node(parent=pid, height=nd.height + 1)
    tree.nodes[mid].children[a] = None
    nd.parent = mid
    pn.children = {
        (mid if key == a else key): None for key in pn.children
    }
    _raise_height(tree, pid, tree.nodes[mid].height)
    return mid


def _settle_height(tree: CodingTree, nid: int | None) -> None:
    # recompute 1 + max(child) upward until stable
    while nid is not None:
        nd = tree.nodes[nid]
        h = 1 + max(tree.nodes[c].height for c in nd.children)
        if h == nd.height:
            break
        nd.height = h
        nid = nd.parent


def _raise_height(tree: CodingTree, nid: int | None, child_height: int) -> None:
    while nid is not None:
        nd = tree.nodes[nid]
        if nd.height > child_height:
            break
        nd.height = child_height + 1
        child_height = nd.height
        nid = nd.parent


# -- construction ----------------------------------------------------------

@dataclass
class TraceStep:
    op: str
    nodes: tuple[int, ...]
    delta: float | None = None
    entropy_after: float | None = None


@dataclass
class ConstructionTrace:
    """Step log for a build.  With verify=True the builder additionally runs
    a from-scratch entropy recomputation after every join/trim (slow; this
    is the oracle route for checking the incremental ledger deltas)."""

    verify: bool = False
    steps: list[TraceStep] = field(default_factory=list)
    joins: int = 0
    trims: int = 0
    pads: int = 0
    entropy_star: float | None = None
    height_after_expansion: int | None = None


def build_coding_tree(graph: PropagationTree, K: int,
                      trace: ConstructionTrace | None = None) -> CodingTree:
    """Greedy entropy-minimizing coding tree of height exactly K."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    n = graph.n_nodes
    tree = star_tree(n)
    if n == 1:
        # single-post thread: trivial tree, no entropy to minimize
        _align(tree, K, None, trace)
        return tree
    ledger = EntropyLedger.from_tree(graph, tree)
    if trace is not None:
        trace.entropy_star = ledger.total_entropy()
    _expand(graph, tree, ledger, trace)
    if trace is not None:
        trace.height_after_expansion = tree.height
    if tree.height > K:
        _compress(graph, tree, ledger, K, trace)
    _align(tree, K, ledger, trace)
    return tree


def _record(trace: ConstructionTrace | None, graph: PropagationTree,
            tree: CodingTree, op: str, ids: tuple[int, ...], delta: float) -> None:
    if trace is None:
        return
    h = structural_entropy(graph, tree) if trace.verify else None
    trace.steps.append(TraceStep(op, ids, delta, h))


def _expand(graph: PropagationTree, tree: CodingTree,
            ledger: EntropyLedger, trace: ConstructionTrace | None) -> None:
    """Greedy argmax joins over connected candidate pairs.

    One heap entry per propagation edge.  Contracting an edge of a forest
    leaves a forest, so every live candidate pair descends from exactly one
    original edge and its cross weight never changes; endpoint volumes are
    frozen while a cluster is alive and only grow across a join.  A stale
    entry (dead endpoint id) therefore always overestimates the current
    delta of its pair, so popping cannot skip the true argmax: refresh the
    entry on pop and reinsert until both ids and value are current.
    """
    rn = tree.nodes[tree.root]
    volG = ledger.graph_volume
    vol = ledger.vol
    vol_root = vol[tree.root]
    log2 = math.log2
    merged: dict[int, int] = {}  # dead cluster id -> its join product

    def canon(x: int) -> int:
        r = x
        while r in merged:
            r = merged[r]
        while x != r:
            merged[x], x = r, merged[x]
        return r

    entries = []
    for u, v, w in graph.edges():
        a, b = (u, v) if u < v else (v, u)
        d = (2.0 * w / volG) * log2(vol_root / (vol[a] + vol[b]))
        entries.append((-d, a, b, w))
    heapq.heapify(entries)
    while len(rn.children) > 2:
        pick = None
        while entries:
            negd, a, b, w = heapq.heappop(entries)
            ca, cb = canon(a), canon(b)
            if ca > cb:
                ca, cb = cb, ca
            if ca == cb:
                continue  # unreachable for forest inputs; guards bad payloads
            if ca == a and cb == b:
                pick = (a, b, -negd, w)
                break
            d = (2.0 * w / volG) * log2(vol_root / (vol[ca] + vol[cb]))
            heapq.heappush(entries, (-d, ca, cb, w))
        if pick is None:
            # no cross edges left between root children, so every remaining
            # pair ties at delta 0; take the smallest ids
            a, b = sorted(rn.children)[:2]
            pick = (a, b, 0.0, 0.0)
        a, b, d, w = pick
        beta = join(tree, a, b)
        ledger.record_join(beta, cross=w)
        merged[a] = beta
        merged[b] = beta
        if trace is not None:
            trace.joins += 1
        _record(trace, graph, tree, "join", (a, b, beta), d)


def _compress(graph: PropagationTree, tree: CodingTree,
              ledger: EntropyLedger, K: int, trace: ConstructionTrace | None) -> None:
    """Greedy argmin trims until the tree height reaches K.

    A running sum of child cuts per node turns the trim delta into the
    closed form (sum_c g_c - g_b) / volG * log2(vol_parent / vol_b), so
    each candidate refresh is O(1) instead of a scan over children.

    Heights are settled with per-node {child height: count} buckets so a
    settle step costs a few dict operations instead of a children scan.
    """
    root = tree.root
    nodes = tree.nodes
    vol, cut = ledger.vol, ledger.cut
    volG = ledger.graph_volume
    log2 = math.log2
    csum: dict[int, float] = {}
    buckets: dict[int, dict[int, int]] = {}
    for nid, nd in nodes.items():
        if nd.children:
            s = 0.0
            bk: dict[int, int] = {}
            for c in nd.children:
                s += cut[c]
                hc = nodes[c].height
                bk[hc] = bk.get(hc, 0) + 1
            csum[nid] = s
            buckets[nid] = bk

    def dtrim(b: int) -> float:
        nd = nodes[b]
        return (csum[b] - cut[b]) / volG * log2(vol[nd.parent] / vol[b])

    stamp: dict[int, int] = defaultdict(int)
    entries = [(dtrim(nid), nid, 0) for nid, nd in nodes.items()
               if nid != root and nd.children]
    heapq.heapify(entries)
    rn = nodes[root]
    while rn.height > K:
        d, b, sb = heapq.heappop(entries)
        if b not in nodes or stamp[b] != sb:
            continue
        nd = nodes[b]
        p = nd.parent
        csum[p] += csum.pop(b) - cut[b]
        ledger.record_trim(b)
        pn = nodes[p]
        del pn.children[b]
        moved = list(nd.children)
        for c in moved:
            nodes[c].parent = p
        pn.children.update(nd.children)
        h_b = nd.height
        del nodes[b]
        pb = buckets[p]
        pb[h_b] -= 1
        for c in moved:
            hc = nodes[c].height
            pb[hc] = pb.get(hc, 0) + 1
        del buckets[b]
        if h_b + 1 == pn.height:
            # settle heights upward; only drops can happen here
            cn, bk = pn, pb
            while True:
                want = cn.height - 1
                while want > 0 and bk.get(want, 0) <= 0:
                    want -= 1
                h = want + 1
                if h == cn.height:
                    break
                old = cn.height
                cn.height = h
                q = cn.parent
                if q is None:
                    break
                bk = buckets[q]
                bk[old] -= 1
                bk[h] = bk.get(h, 0) + 1
                cn = nodes[q]
        if trace is not None:
            trace.trims += 1
        _record(trace, graph, tree, "trim", (b,), d)
        stamp[p] += 1
        if p != root:
            heapq.heappush(entries, (dtrim(p), p, stamp[p]))
        for c in moved:
            if nodes[c].children:
                stamp[c] += 1
                heapq.heappush(entries, (dtrim(c), c, stamp[c]))


def _align(tree: CodingTree, K: int, ledger: EntropyLedger | None,
           trace: ConstructionTrace | None = None) -> None:
    """Pad until every leaf is at depth exactly K (root pinned to level K).

    Chains are built first and spliced into each parent in a single pass,
    so a parent with many deficient children costs one dict rebuild rather
    than one per pad.
    """
    root = tree.root
    nodes = tree.nodes
    if nodes[root].height > K:
        raise ValueError("alignment requires height <= K")
    top_of: dict[int, int] = {}
    touched: dict[int, None] = {}
    for nid in tree.bfs_ids():
        if nid == root:
            continue
        nd = nodes[nid]
        p = nd.parent
        ph = K if p == root else nodes[p].height
        gap = ph - nd.height - 1
        if gap <= 0:
            continue
        cur = nid
        for _ in range(gap):
            mid = tree.new_node(parent=p, height=nodes[cur].height + 1)
            nodes[mid].children[cur] = None
            nodes[cur].parent = mid
            if ledger is not None:
                ledger.record_pad(mid)
            if trace is not None:
                trace.pads += 1
                trace.steps.append(TraceStep("pad", (mid,)))
            cur = mid
        top_of[nid] = cur
        touched[p] = None
    for p in touched:
        pn = nodes[p]
        pn.children = {top_of.get(c, c): None for c in pn.children}
    rn = nodes[root]
    if rn.children:
        rn.height = 1 + max(nodes[c].height for c in rn.children)
    if rn.height != K:
        raise AssertionError("alignment failed to reach height K")


# -- validation ------------------------------------------------------------

def validate_coding_tree(tree: CodingTree, n_leaves: int) -> None:
    """Check the partition contract; raises ValueError on any breach."""
    if tree.root not in tree.nodes:
        raise ValueError("missing root")
    if tree.nodes[tree.root].parent is not None:
        raise ValueError("root must not have a parent")
    seen_payloads = []
    reached = set()
    for nid in tree.bfs_ids():
        if nid in reached:
            raise ValueError("cycle in coding tree")
        reached.add(nid)
        nd = tree.nodes[nid]
        for c in nd.children:
            if c not in tree.nodes or tree.nodes[c].parent != nid:
                raise ValueError("parent/child links inconsistent")
        if nd.leaf_payload is not None:
            if nd.children:
                raise ValueError("leaf node with children")
            seen_payloads.append(nd.leaf_payload)
        else:
            if not nd.children and nid != tree.root:
                raise ValueError("childless internal node")
            want = 1 + max((tree.nodes[c].height for c in nd.children), default=-1)
            if nd.children and nd.height != want:
                raise ValueError(f"height of node {nid} is {nd.height}, expected {want}")
        if nd.leaf_payload is not None and nd.height != 0:
            raise ValueError("leaf height must be 0")
    if len(reached) != len(tree.nodes):
        raise ValueError("nodes unreachable from the root")
    if sorted(seen_payloads) != list(range(n_leaves)):
        raise ValueError("leaves do not biject onto graph nodes")


def assert_uniform_leaf_depth(tree: CodingTree, K: int) -> None:
    depths = set(tree.leaf_depths().values())
    if depths != {K}:
        raise ValueError(f"leaf depths {sorted(depths)} != {{{K}}}")


# -- alternative builders --------------------------------------------------

def build_random_coding_tree(graph: PropagationTree, K: int, seed: int) -> CodingTree:
    """Ablation: random joins and trims instead of entropy-greedy ones."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    rng = np.random.default_rng(seed)
    n = graph.n_nodes
    tree = star_tree(n)
    rn = tree.nodes[tree.root]
    while len(rn.children) > 2:
        kids = list(rn.children)
        i, j = rng.choice(len(kids), size=2, replace=False)
        join(tree, kids[int(i)], kids[int(j)])
    while tree.height > K:
        internals = [
            nid for nid, nd in tree.nodes.items()
            if nd.parent is not None and nd.children
        ]
        trim(tree, internals[int(rng.integers(len(internals)))])
    _align(tree, K, None)
    return tree


def build_identity_coding_tree(graph: PropagationTree, K: int) -> CodingTree:
    """Mirror the reply structure itself: one internal node per post that has
    replies (own text as an extra leaf child), padded up to height K.
    Raises ValueError when the reply depth exceeds K."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    n = graph.n_nodes
    tree = CodingTree()
    for i in range(n):
        tree.new_node(parent=None, height=0, leaf_payload=i)
    children: list[list[int]] = [[] for _ in range(n)]
    root_idx = 0
    for c, p in enumerate(graph.parent):
        if p is None:
            root_idx = c
        else:
            children[p].append(c)
    # wrap bottom-up: process in reverse BFS order so child wraps exist
    from .propagation import _bfs_order

    order = _bfs_order(graph.parent)
    wrap: dict[int, int] = {}
    for idx in reversed(order):
        if not children[idx]:
            wrap[idx] = idx  # leaf posts stay bare leaves
            continue
        kid_ids = [idx] + [wrap[c] for c in children[idx]]
        h = 1 + max(tree.nodes[k].height for k in kid_ids)
        internal = tree.new_node(parent=None, height=h)
        for k in kid_ids:
            tree.nodes[k].parent = internal
            tree.nodes[internal].children[k] = None
        wrap[idx] = internal
    top = wrap[root_idx]
    if tree.nodes[top].leaf_payload is not None:
        # single-post thread: need an internal root above the lone leaf
        root = tree.new_node(parent=None, height=1)
        tree.nodes[top].parent = root
        tree.nodes[root].children[top] = None
        top = root
    tree.root = top
    if tree.height > K:
        raise ValueError(f"reply depth {tree.height} exceeds height bound K={K}")
    _align(tree, K, None)
    return tree


# -- exact minimizer (tests only) ------------------------------------------

def brute_force_optimal(graph: PropagationTree, K: int) -> tuple[CodingTree, float]:
    """Exact minimizer over all height-K coding trees; |V| <= 8 only.

    Enumerates chains of partition refinements with memoization; pad closure
    makes 'height exactly K' equal 'height at most K'.  Returns the optimal
    tree together with its entropy.
    """
    n = graph.n_nodes
    if n > 8:
        raise ValueError("brute force limited to graphs with at most 8 nodes")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if graph.total_volume <= 0.0:
        raise ValueError("degenerate graph: zero volume")
    volG = float(graph.total_volume)
    degree = graph.degree
    es = graph.edges()

    vol_memo: dict[int, float] = {}
    cut_memo: dict[int, float] = {}

    def vol_of(mask: int) -> float:
        if mask not in vol_memo:
            vol_memo[mask] = math.fsum(
                float(degree[i]) for i in range(n) if (mask >> i) & 1
            )
        return vol_memo[mask]

    def cut_of(mask: int) -> float:
        if mask not in cut_memo:
            cut_memo[mask] = math.fsum(
                w for u, v, w in es if ((mask >> u) & 1) != ((mask >> v) & 1)
            )
        return cut_memo[mask]

    def term(mask: int, parent_vol: float) -> float:
        g = cut_of(mask)
        if g == 0.0:
            return 0.0
        return -(g / volG) * math.log2(vol_of(mask) / parent_vol)

    def partitions(elems: tuple[int, ...]):
        if not elems:
            yield []
            return
        first, rest = elems[0], elems[1:]
        for part in partitions(rest):
            for i in range(len(part)):
                yield part[:i] + [part[i] + [first]] + part[i + 1:]
            yield [[first]] + part

    best_memo: dict[tuple[int, int], float] = {}
    choice: dict[tuple[int, int], list[int]] = {}

    def best(mask: int, levels: int) -> float:
        """Min total entropy of strict descendants of a node with this leaf
        set, given `levels` tree levels available beneath it."""
        if mask & (mask - 1) == 0:  # singleton: pads below cost nothing
            return 0.0
        if levels == 0:
            return math.inf
        key = (mask, levels)
        if key in best_memo:
            return best_memo[key]
        members = tuple(i for i in range(n) if (mask >> i) & 1)
        pv = vol_of(mask)
        if levels == 1:
            out = math.fsum(term(1 << i, pv) for i in members)
        else:
            out = math.inf
            for part in partitions(members):
                masks = []
                total = 0.0
                for block in part:
                    bm = 0
                    for i in block:
                        bm |= 1 << i
                    masks.append(bm)
                    total += term(bm, pv) + best(bm, levels - 1)
                    if total >= out:
                        break
                if total < out:
                    out = total
                    choice[key] = masks
        best_memo[key] = out
        return out

    value = best((1 << n) - 1, K)

    tree = CodingTree()

    def materialize(mask: int, levels: int, parent: int | None) -> int:
        single = mask & (mask - 1) == 0
        if single and levels == 0:
            return tree.new_node(parent=parent, height=0,
                                 leaf_payload=mask.bit_length() - 1)
        nid = tree.new_node(parent=parent, height=levels)
        nd = tree.nodes[nid]
        if single:
            blocks = [mask]  # pad chain down to the leaf
        elif levels == 1:
            blocks = [1 << i for i in range(n) if (mask >> i) & 1]
        else:
            blocks = choice[(mask, levels)]
        for bm in blocks:
            nd.children[materialize(bm, levels - 1, nid)] = None
        return nid

    tree.root = materialize((1 << n) - 1, K, None)
    validate_coding_tree(tree, n)
    assert_uniform_leaf_depth(tree, K)
    return tree, value


# -- serialization ---------------------------------------------------------

def coding_tree_to_payload(tree: CodingTree, node_ids: list[str]) -> dict:
    order = tree.bfs_ids()
    remap = {nid: i for i, nid in enumerate(order)}
    nodes_out = []
    for nid in order:
        nd = tree.nodes[nid]
        nodes_out.append({
            "id": remap[nid],
            "parent": None if nd.parent is None else remap[nd.parent],
            "height": nd.height,
            "leaf_post": None if nd.leaf_payload is None else node_ids[nd.leaf_payload],
        })
    return {"K": tree.height, "nodes": nodes_out}


def serialize_coding_tree(tree: CodingTree, node_ids: list[str]) -> str:
    return json.dumps(coding_tree_to_payload(tree, node_ids),
                      sort_keys=True, separators=(",", ":"))


def coding_tree_from_payload(payload: dict, node_ids: list[str]) -> CodingTree:
    index = {pid: i for i, pid in enumerate(node_ids)}
    tree = CodingTree()
    root = None
    for entry in payload["nodes"]:
        nid = int(entry["id"])
        post = entry["leaf_post"]
        if post is not None and post not in index:
            raise ValueError(f"unknown leaf post {post!r}")
        tree.nodes[nid] = TreeNode(
            parent=None if entry["parent"] is None else int(entry["parent"]),
            height=int(entry["height"]),
            leaf_payload=None if post is None else index[post],
        )
        if entry["parent"] is None:
            if root is not None:
                raise ValueError("multiple roots in coding tree payload")
            root = nid
    if root is None:
        raise ValueError("no root in coding tree payload")
    tree.root = root
    tree._next_id = max(tree.nodes) + 1
    for nid, nd in sorted(tree.nodes.items()):
        if nd.parent is not None:
            if nd.parent not in tree.nodes:
                raise ValueError("dangling parent reference")
            tree.nodes[nd.parent].children[nid] = None
    validate_coding_tree(tree, len(node_ids))
    if tree.height != int(payload["K"]):
        raise ValueError("stored K does not match tree height")
    return tree
