"""Conversation threads and their time-weighted propagation trees.

A thread is one claim post plus its replies.  The propagation tree mirrors
the reply-to structure: one node per post, indexed chronologically with the
claim pinned at index 0, and one edge per reply weighted by the response
delay in seconds.  Zero and negative delays (simultaneous posts, clock skew)
are clamped to a configurable positive floor so edge weights stay strictly
positive; clamps are counted on the built tree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

LABELS = ("TR", "FR", "UR")

DEFAULT_MIN_WEIGHT = 1.0


class ThreadValidationError(ValueError):
    """Raised when a thread violates the structural contract."""


@dataclass
class Post:
    id: str
    text: str
    time: float
    reply_to: str | None


@dataclass
class ParseDiagnostic:
    line: int
    thread_id: str | None
    reason: str


@dataclass
class ThreadRecord:
    """A validated thread: exactly one claim, first in the post list, with
    replies stably sorted by timestamp and every reply_to resolvable."""

    thread_id: str
    event: str
    label: str
    posts: list[Post]

    def __post_init__(self) -> None:
        validate_thread(self)

    @property
    def claim(self) -> Post:
        return self.posts[0]

    def __len__(self) -> int:
        return len(self.posts)


def validate_thread(thread: ThreadRecord) -> None:
    if thread.label not in LABELS:
        raise ThreadValidationError(f"unknown label {thread.label!r}")
    posts = thread.posts
    if not posts:
        raise ThreadValidationError("thread has no posts")
    ids = [p.id for p in posts]
    if len(set(ids)) != len(ids):
        raise ThreadValidationError("duplicate post id")
    claims = [p for p in posts if p.reply_to is None]
    if len(claims) != 1:
        raise ThreadValidationError(f"expected exactly one claim, found {len(claims)}")
    if posts[0].reply_to is not None:
        raise ThreadValidationError("claim must be the first post")
    for p in posts:
        if not math.isfinite(p.time):
            raise ThreadValidationError(f"non-finite timestamp on post {p.id!r}")
    known = set(ids)
    for p in posts[1:]:
        if p.reply_to not in known:
            raise ThreadValidationError(f"post {p.id!r} replies to unknown post {p.reply_to!r}")
    times = [p.time for p in posts[1:]]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ThreadValidationError("replies not sorted by time")
    # reachability from the claim; reply_to cycles cannot hide behind index order
    children: dict[str, list[str]] = {p.id: [] for p in posts}
    for p in posts[1:]:
        children[p.reply_to].append(p.id)
    seen = set()
    stack = [posts[0].id]
    while stack:
        pid = stack.pop()
        seen.add(pid)
        stack.extend(children[pid])
    if len(seen) != len(posts):
        raise ThreadValidationError("posts unreachable from the claim (reply cycle)")


def _coerce_time(value) -> float:
    """Accept seconds-since-epoch or an ISO-8601 string; return float seconds."""
    if isinstance(value, bool):
        raise ThreadValidationError(f"bad timestamp {value!r}")
    if isinstance(value, (int, float)):
        t = float(value)
    elif isinstance(value, str):
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError as exc:
            raise ThreadValidationError(f"bad timestamp {value!r}: {exc}") from None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        t = dt.timestamp()
    else:
        raise ThreadValidationError(f"bad timestamp {value!r}")
    if not math.isfinite(t):
        raise ThreadValidationError(f"non-finite timestamp {value!r}")
    return t


def _thread_from_payload(raw: dict) -> ThreadRecord:
    if not isinstance(raw, dict):
        raise ThreadValidationError("thread record is not an object")
    try:
        thread_id = str(raw["thread_id"])
        event = str(raw["event"])
        label = raw["label"]
        posts_raw = raw["posts"]
    except KeyError as exc:
        raise ThreadValidationError(f"missing field {exc.args[0]!r}") from None
    if not isinstance(posts_raw, list) or not posts_raw:
        raise ThreadValidationError("posts must be a non-empty list")
    posts = []
    for entry in posts_raw:
        if not isinstance(entry, dict):
            raise ThreadValidationError("post entry is not an object")
        try:
            post = Post(
                id=str(entry["id"]),
                text=str(entry["text"]),
                time=_coerce_time(entry["time"]),
                reply_to=None if entry["reply_to"] is None else str(entry["reply_to"]),
            )
        except KeyError as exc:
            raise ThreadValidationError(f"post missing field {exc.args[0]!r}") from None
        posts.append(post)
    claims = [p for p in posts if p.reply_to is None]
    if len(claims) != 1:
        raise ThreadValidationError(f"expected exactly one claim, found {len(claims)}")
    replies = [p for p in posts if p.reply_to is not None]
    replies.sort(key=lambda p: p.time)  # stable: equal timestamps keep input order
    return ThreadRecord(thread_id=thread_id, event=event, label=label, posts=claims + replies)


def parse_threads(stream, fmt: str = "jsonl") -> tuple[list[ThreadRecord], list[ParseDiagnostic]]:
    """Parse a JSONL stream of thread records.

    Malformed lines never raise: each produces a ParseDiagnostic and the rest
    of the stream is still consumed.  Returns (records, diagnostics).
    """
    if fmt != "jsonl":
        raise ValueError(f"unsupported thread format {fmt!r}")
    records: list[ThreadRecord] = []
    diagnostics: list[ParseDiagnostic] = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            diagnostics.append(ParseDiagnostic(lineno, None, f"invalid JSON: {exc.msg}"))
            continue
        try:
            records.append(_thread_from_payload(raw))
        except ThreadValidationError as exc:
            tid = raw.get("thread_id") if isinstance(raw, dict) else None
            diagnostics.append(ParseDiagnostic(lineno, None if tid is None else str(tid), str(exc)))
    return records, diagnostics


@dataclass(eq=False)
class PropagationTree:
    """Time-weighted reply tree of one thread.

    node_ids are post ids in chronological order (claim at 0).  parent[i] and
    weight[i] describe the edge into node i; the root carries None / 0.0.
    degree[i] is the weighted degree and total_volume is degree.sum(), i.e.
    twice the total edge weight.
    """

    node_ids: list[str]
    parent: list[int | None]
    weight: list[float]
    degree: np.ndarray
    total_volume: float
    n_clamped: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.node_ids) - 1

    def edges(self) -> list[tuple[int, int, float]]:
        """Edges as (parent_index, child_index, weight), child order ascending."""
        return [
            (p, c, self.weight[c])
            for c, p in enumerate(self.parent)
            if p is not None
        ]

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        es = self.edges()
        if not es:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy(), np.zeros(0, dtype=np.float64)
        ps, cs, ws = zip(*es)
        return (
            np.asarray(ps, dtype=np.int64),
            np.asarray(cs, dtype=np.int64),
            np.asarray(ws, dtype=np.float64),
        )

    def max_depth(self) -> int:
        # chronological indexing does not promise parent < child under clock
        # skew, so walk in BFS order rather than index order
        order = _bfs_order(self.parent)
        depth = [0] * self.n_nodes
        for c in order[1:]:
            depth[c] = depth[self.parent[c]] + 1
        return max(depth) if depth else 0


def _bfs_order(parent: list[int | None]) -> list[int]:
    children: list[list[int]] = [[] for _ in parent]
    root = 0
    for c, p in enumerate(parent):
        if p is None:
            root = c
        else:
            children[p].append(c)
    order = [root]
    i = 0
    while i < len(order):
        order.extend(children[order[i]])
        i += 1
    return order


def build_propagation_tree(
    thread: ThreadRecord, min_weight: float = DEFAULT_MIN_WEIGHT
) -> PropagationTree:
    """Build the time-weighted propagation tree of a validated thread.

    Edge weight is the reply delay t_child - t_parent in seconds, clamped
    below at min_weight (> 0 required); clamps are counted on the result.
    """
    if not (min_weight > 0.0) or not math.isfinite(min_weight):
        raise ValueError(f"min_weight must be positive and finite, got {min_weight!r}")
    posts = thread.posts
    index = {p.id: i for i, p in enumerate(posts)}
    n = len(posts)
    parent: list[int | None] = [None] * n
    weight = [0.0] * n
    degree = np.zeros(n, dtype=np.float64)
    n_clamped = 0
    for i, p in enumerate(posts[1:], start=1):
        if not math.isfinite(p.time):
            raise ValueError(f"non-finite timestamp on post {p.id!r}")
        j = index[p.reply_to]
        dt = p.time - posts[j].time
        if dt < min_weight:
            dt = min_weight
            n_clamped += 1
        parent[i] = j
        weight[i] = dt
        degree[i] += dt
        degree[j] += dt
    return PropagationTree(
        node_ids=[p.id for p in posts],
        parent=parent,
        weight=weight,
        degree=degree,
        total_volume=float(degree.sum()),
        n_clamped=n_clamped,
    )


def uniform_weights(tree: PropagationTree) -> PropagationTree:
    """Same topology with every edge weight replaced by 1.0 (ablation)."""
    n = tree.n_nodes
    weight = [0.0 if p is None else 1.0 for p in tree.parent]
    degree = np.zeros(n, dtype=np.float64)
    for c, p in enumerate(tree.parent):
        if p is not None:
            degree[c] += 1.0
            degree[p] += 1.0
    return PropagationTree(
        node_ids=list(tree.node_ids),
        parent=list(tree.parent),
        weight=weight,
        degree=degree,
        total_volume=float(degree.sum()),
        n_clamped=0,
    )


def apply_time_cutoff(thread: ThreadRecord, deadline: float) -> ThreadRecord:
    """Restrict a thread to posts within `deadline` seconds of the claim.

    A post survives only if its whole reply chain back to the claim survives;
    dropping a post drops its subtree.  deadline 0 keeps the claim alone,
    +inf is the identity.  Negative or NaN deadlines raise ValueError.
    """
    if math.isnan(deadline) or deadline < 0:
        raise ValueError(f"deadline must be >= 0, got {deadline!r}")
    t0 = thread.claim.time
    in_window = {p.id for p in thread.posts if p.reply_to is None or (p.time - t0) <= deadline}
    children: dict[str, list[str]] = {p.id: [] for p in thread.posts}
    for p in thread.posts[1:]:
        children[p.reply_to].append(p.id)
    kept = set()
    stack = [thread.claim.id]
    while stack:
        pid = stack.pop()
        kept.add(pid)
        stack.extend(c for c in children[pid] if c in in_window)
    return ThreadRecord(
        thread_id=thread.thread_id,
        event=thread.event,
        label=thread.label,
        posts=[p for p in thread.posts if p.id in kept],
    )


def tree_to_payload(tree: PropagationTree) -> dict:
    return {
        "nodes": list(tree.node_ids),
        "edges": [[p, c, w] for p, c, w in tree.edges()],
    }


def serialize_tree(tree: PropagationTree) -> str:
    return json.dumps(tree_to_payload(tree), sort_keys=True, separators=(",", ":"))


def tree_from_payload(payload: dict) -> PropagationTree:
    nodes = list(payload["nodes"])
    n = len(nodes)
    parent: list[int | None] = [None] * n
    weight = [0.0] * n
    degree = np.zeros(n, dtype=np.float64)
    n_root = n
    for p, c, w in payload["edges"]:
        p, c, w = int(p), int(c), float(w)
        if not (0 <= p < n and 0 <= c < n) or parent[c] is not None or w <= 0:
            raise ValueError("malformed propagation tree payload")
        parent[c] = p
        weight[c] = w
        degree[c] += w
        degree[p] += w
        n_root -= 1
    if n_root != 1:
        raise ValueError("propagation tree payload must have exactly one root")
    return PropagationTree(
        node_ids=nodes,
        parent=parent,
        weight=weight,
        degree=degree,
        total_volume=float(degree.sum()),
    )
