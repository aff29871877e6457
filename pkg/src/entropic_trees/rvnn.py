"""Bottom-up recursive GRU over layered coding trees.

Every leaf sits at depth exactly K, so the tree is processed as K+1 dense
levels: children of a height-l node all have height l-1.  The forward pass
runs one vectorized GRU step per level, the readout concatenates per-level
pooled states, and the backward pass is hand-derived reverse mode (no
autograd anywhere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coding_tree import CodingTree
from .tensorio import load_tensors, save_tensors

N_CLASSES = 3

POOLS = ("sum", "mean", "max")


class ScheduleError(ValueError):
    """Tree shape unusable for level-synchronous message passing."""


@dataclass
class TreeSchedule:
    """Per-level index plan for one coding tree.

    level_parent[l] holds, for each position i at level l, the position of
    that node's parent at level l+1.  leaf_rows maps level-0 positions to
    feature-matrix rows.
    """

    K: int
    counts: list[int]
    leaf_rows: np.ndarray
    level_parent: list[np.ndarray]

    @classmethod
    def from_tree(cls, tree: CodingTree) -> "TreeSchedule":
        K = tree.height
        levels: list[list[int]] = [[] for _ in range(K + 1)]
        pos: dict[int, int] = {}
        for nid in tree.bfs_ids():
            nd = tree.nodes[nid]
            h = nd.height
            if nd.is_leaf and h != 0:
                raise ScheduleError("leaf above level 0")
            pos[nid] = len(levels[h])
            levels[h].append(nid)
        for l in range(1, K + 1):
            if not levels[l]:
                raise ScheduleError(f"empty level {l}")
        level_parent = []
        for l in range(K):
            idx = np.empty(len(levels[l]), dtype=np.int64)
            for i, nid in enumerate(levels[l]):
                p = tree.nodes[nid].parent
                if p is None or tree.nodes[p].height != l + 1:
                    raise ScheduleError("parent-child levels must differ by 1")
                idx[i] = pos[p]
            level_parent.append(idx)
        leaf_rows = np.array(
            [tree.nodes[nid].leaf_payload for nid in levels[0]], dtype=np.int64
        )
        return cls(K=K, counts=[len(lv) for lv in levels],
                   leaf_rows=leaf_rows, level_parent=level_parent)


@dataclass
class RvnnParams:
    """All learnable arrays.  S stacks the per-level vectors s^(0..K);
    row 0 is allocated but never enters the forward pass, so its gradient
    is structurally zero."""

    P: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    W_z: np.ndarray
    U_z: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    S: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    _FIELDS = ("P", "W_r", "U_r", "W_z", "U_z", "W_h", "U_h", "S", "W_out", "b_out")

    @property
    def d(self) -> int:
        return self.W_r.shape[0]

    @property
    def d_in(self) -> int:
        return self.P.shape[1]

    @property
    def K(self) -> int:
        return self.S.shape[0] - 1

    @property
    def n_classes(self) -> int:
        return self.b_out.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in self._FIELDS]

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    def zeros_like(self) -> "RvnnParams":
        return RvnnParams(*[np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "RvnnParams":
        return RvnnParams(*[a.copy() for a in self.arrays()])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "RvnnParams":
        out = []
        at = 0
        for a in self.arrays():
            out.append(vec[at:at + a.size].reshape(a.shape).copy())
            at += a.size
        if at != vec.size:
            raise ValueError("vector length mismatch")
        return RvnnParams(*out)


def expected_param_count(d: int, d_in: int, K: int, n_classes: int = N_CLASSES) -> int:
    return 6 * d * d + (K + 1) * d + d * d_in + n_classes * (K + 1) * d + n_classes


def init_params(d: int, d_in: int, K: int, seed: int,
                n_classes: int = N_CLASSES) -> RvnnParams:
    """Glorot-uniform matrices, uniform(-0.1, 0.1) level vectors, zero bias.

    Draw order is fixed so a seed pins every array.
    """
    if min(d, d_in, K, n_classes) < 1:
        raise ValueError("d, d_in, K and n_classes must all be >= 1")
    rng = np.random.default_rng(seed)

    def glorot(shape: tuple[int, int]) -> np.ndarray:
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape)

    P = glorot((d, d_in))
    gates = [glorot((d, d)) for _ in range(6)]
    S = rng.uniform(-0.1, 0.1, size=(K + 1, d))
    W_out = glorot((n_classes, (K + 1) * d))
    b_out = np.zeros(n_classes)
    return RvnnParams(P, *gates, S, W_out, b_out)


@dataclass
class ForwardTrace:
    """Everything the backward pass and the readout consumers need."""

    pool: str
    H: list[np.ndarray]
    Hbar: list[np.ndarray]
    R: list[np.ndarray]
    Z: list[np.ndarray]
    Htil: list[np.ndarray]
    pooled: np.ndarray
    h_T: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    max_src: list[np.ndarray] = field(default_factory=list)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward(params: RvnnParams, schedule: TreeSchedule, feats: np.ndarray,
            pool: str = "sum") -> ForwardTrace:
    """One pass up the levels; see the module docstring for the layout."""
    if pool not in POOLS:
        raise ValueError(f"pool must be one of {POOLS}, got {pool!r}")
    K = schedule.K
    if K != params.K:
        raise ValueError(f"schedule K={K} but params K={params.K}")
    if feats.ndim != 2 or feats.shape[1] != params.d_in:
        raise ValueError("feature matrix shape mismatch")
    d = params.d
    H: list[np.ndarray] = [feats[schedule.leaf_rows] @ params.P.T]
    Hbar: list[np.ndarray] = [np.empty((0, d))]
    R: list[np.ndarray] = [np.empty((0, d))]
    Z: list[np.ndarray] = [np.empty((0, d))]
    Htil: list[np.ndarray] = [np.empty((0, d))]
    for l in range(1, K + 1):
        hbar = np.zeros((schedule.counts[l], d))
        np.add.at(hbar, schedule.level_parent[l - 1], H[l - 1])
        s = params.S[l]
        r = _sigmoid(params.W_r @ s + hbar @ params.U_r.T)
        z = _sigmoid(params.W_z @ s + hbar @ params.U_z.T)
        htil = np.tanh(params.W_h @ s + (r * hbar) @ params.U_h.T)
        H.append((1.0 - z) * hbar + z * htil)
        Hbar.append(hbar)
        R.append(r)
        Z.append(z)
        Htil.append(htil)
    pooled = np.empty((K + 1, d))
    max_src: list[np.ndarray] = []
    for l in range(K + 1):
        if pool == "sum":
            pooled[l] = H[l].sum(axis=0)
        elif pool == "mean":
            pooled[l] = H[l].mean(axis=0)
        else:
            src = np.argmax(H[l], axis=0)
            pooled[l] = H[l][src, np.arange(d)]
            max_src.append(src)
    h_T = pooled.ravel()
    logits = params.W_out @ h_T + params.b_out
    shifted = logits - logits.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    return ForwardTrace(pool=pool, H=H, Hbar=Hbar, R=R, Z=Z, Htil=Htil,
                        pooled=pooled, h_T=h_T, logits=logits, probs=probs,
                        max_src=max_src)


def loss(trace: ForwardTrace, label: int) -> float:
    """Cross entropy in nats for one thread."""
    p = float(trace.probs[label])
    if p <= 0.0:
        return float("inf")
    return -math.log(p)


def backward(params: RvnnParams, schedule: TreeSchedule, feats: np.ndarray,
             trace: ForwardTrace, label: int) -> RvnnParams:
    """Analytic gradients of loss() w.r.t. every parameter array.

    Children of one node share their parent's h-bar gradient; levels are
    processed top-down with the same index plan the forward pass used.
    """
    K = schedule.K
    d = params.d
    g = params.zeros_like()
    dlogits = trace.probs.copy()
    dlogits[label] -= 1.0
    g.b_out += dlogits
    g.W_out += np.outer(dlogits, trace.h_T)
    dpooled = (params.W_out.T @ dlogits).reshape(K + 1, d)
    dH: list[np.ndarray] = [None] * (K + 1)  # type: ignore[list-item]
    for l in range(K + 1):
        n_l = schedule.counts[l]
        dh = np.zeros((n_l, d))
        if trace.pool == "sum":
            dh += dpooled[l]
        elif trace.pool == "mean":
            dh += dpooled[l] / n_l
        else:
            dh[trace.max_src[l], np.arange(d)] += dpooled[l]
        dH[l] = dh
    for l in range(K, 0, -1):
        gh = dH[l]
        hbar, r, z, htil = trace.Hbar[l], trace.R[l], trace.Z[l], trace.Htil[l]
        dz = gh * (htil - hbar)
        da_z = dz * z * (1.0 - z)
        dhtil = gh * z
        da_h = dhtil * (1.0 - htil * htil)
        dr = (da_h @ params.U_h) * hbar
        da_r = dr * r * (1.0 - r)
        dhbar = (gh * (1.0 - z) + (da_h @ params.U_h) * r
                 + da_r @ params.U_r + da_z @ params.U_z)
        s = params.S[l]
        g.W_r += np.outer(da_r.sum(axis=0), s)
        g.W_z += np.outer(da_z.sum(axis=0), s)
        g.W_h += np.outer(da_h.sum(axis=0), s)
        g.U_r += da_r.T @ hbar
        g.U_z += da_z.T @ hbar
        g.U_h += da_h.T @ (r * hbar)
        g.S[l] += params.W_r.T @ da_r.sum(axis=0)
        g.S[l] += params.W_z.T @ da_z.sum(axis=0)
        g.S[l] += params.W_h.T @ da_h.sum(axis=0)
        dH[l - 1] += dhbar[schedule.level_parent[l - 1]]
    leaf_feats = feats[schedule.leaf_rows]
    g.P += dH[0].T @ leaf_feats
    return g


@dataclass
class TrainingConfig:
    learning_rate: float = 0.001
    warmup: float = 0.06
    weight_decay: float = 0.0005
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    d: int = 64
    K: int = 7

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError("warmup must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if min(self.epochs, self.batch_size, self.d, self.K) < 1:
            raise ValueError("epochs, batch_size, d and K must be >= 1")


def lr_at(step: int, total_steps: int, config: TrainingConfig) -> float:
    """Linear warmup to the max rate, then linear decay to zero."""
    peak = config.learning_rate
    warm = max(1, math.ceil(config.warmup * total_steps))
    if step < warm:
        return peak * (step + 1) / warm
    return peak * (total_steps - step) / max(total_steps - warm, 1)


@dataclass
class _AdamW:
    """Decoupled weight decay; decay is scaled by the scheduled rate."""

    params: RvnnParams
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.m = self.params.zeros_like()
        self.v = self.params.zeros_like()
        self.t = 0

    def step(self, grads: RvnnParams, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for theta, grad, m, v in zip(self.params.arrays(), grads.arrays(),
                                     self.m.arrays(), self.v.arrays()):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            theta -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps)
                           + self.weight_decay * theta)


def train(dataset: list[tuple[CodingTree, np.ndarray, int]],
          config: TrainingConfig, pool: str = "sum",
          params: RvnnParams | None = None) -> tuple[RvnnParams, list[dict]]:
    """Seeded training loop; returns final params and per-epoch history."""
    if not dataset:
        raise ValueError("empty training dataset")
    items = [(TreeSchedule.from_tree(t), X, y) for t, X, y in dataset]
    d_in = items[0][1].shape[1]
    for sched, X, y in items:
        if sched.K != config.K:
            raise ValueError(f"tree height {sched.K} != config K {config.K}")
        if X.shape[1] != d_in:
            raise ValueError("inconsistent feature dimensions")
        if not 0 <= y < N_CLASSES:
            raise ValueError(f"label index {y} out of range")
    if params is None:
        params = init_params(config.d, d_in, config.K, config.seed)
    opt = _AdamW(params, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    n = len(items)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for b0 in range(0, n, config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            acc = params.zeros_like()
            for i in batch:
                sched, X, y = items[i]
                tr = forward(params, sched, X, pool=pool)
                li = loss(tr, y)
                if not math.isfinite(li):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, item {i}: {li}")
                epoch_loss += li
                correct += int(np.argmax(tr.probs) == y)
                gi = backward(params, sched, X, tr, y)
                for a, ga in zip(acc.arrays(), gi.arrays()):
                    a += ga
            for a in acc.arrays():
                a /= len(batch)
            opt.step(acc, lr_at(step, total_steps, config))
            step += 1
        history.append({"epoch": epoch, "loss": epoch_loss / n,
                        "accuracy": correct / n})
    return params, history


def save_checkpoint(path, params: RvnnParams, meta: dict | None = None) -> None:
    tensors = {f: getattr(params, f) for f in RvnnParams._FIELDS}
    info = {"d": params.d, "d_in": params.d_in, "K": params.K,
            "n_classes": params.n_classes}
    if meta:
        info.update(meta)
    save_tensors(path, tensors, meta=info)


def load_checkpoint(path) -> tuple[RvnnParams, dict]:
    tensors, meta = load_tensors(path)
    try:
        params = RvnnParams(*[tensors[f] for f in RvnnParams._FIELDS])
    except KeyError as exc:
        raise ValueError(f"checkpoint missing tensor {exc}") from exc
    return params, meta


LABEL_ORDER = ("TR", "FR", "UR")


def predict(params: RvnnParams, tree: CodingTree, feats: np.ndarray,
            pool: str = "sum") -> np.ndarray:
    return forward(params, TreeSchedule.from_tree(tree), feats, pool=pool).probs


def evaluate(params: RvnnParams, dataset: list[tuple[CodingTree, np.ndarray, int]],
             pool: str = "sum") -> dict:
    """Accuracy, macro-F1 (absent classes count as 0), per-class P/R/F1,
    and the confusion matrix with rows = truth."""
    if not dataset:
        raise ValueError("empty evaluation dataset")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for tree, X, y in dataset:
        pred = int(np.argmax(predict(params, tree, X, pool=pool)))
        confusion[y, pred] += 1
    per_class = {}
    f1s = []
    for c, name in enumerate(LABEL_ORDER):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum() - tp)
        fn = int(confusion[c, :].sum() - tp)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[name] = {"precision": prec, "recall": rec, "f1": f1,
                           "support": int(confusion[c, :].sum())}
        f1s.append(f1)
    accuracy = float(np.trace(confusion)) / len(dataset)
    return {"accuracy": accuracy, "macro_f1": sum(f1s) / len(f1s),
            "per_class": per_class, "confusion": confusion.tolist()}
