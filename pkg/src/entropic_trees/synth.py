"""Synthetic two-class thread corpus for end-to-end checks.

Threads come in matched pairs: both members share one reply topology and
identical content-free texts, and differ only in reply timing (exponential
gaps at rate 1 for TR versus rate 3 for FR).  Chains of fixed length keep
the timing-to-geometry channel sharp: under the default one-second weight
floor about 63% of TR gaps clamp versus 95% of FR gaps, so weighted coding
trees segment the two classes differently while unweighted ones collapse to
the same shape.  Classification signal exists only in timing; the texts
carry none by construction.
"""

from __future__ import annotations

import json

import numpy as np

from .propagation import Post, ThreadRecord

RATE_A = 1.0   # label TR
RATE_B = 3.0   # label FR

DEFAULT_N_POSTS = 64

CLAIM_TEXT = "breaking claim report"
REPLY_TEXT = "post update"


def _thread(pair: int, label: str, rate: float, parents: list[int],
            texts: list[str], rng: np.random.Generator) -> ThreadRecord:
    n = len(texts)
    times = [0.0] * n
    for j, p in enumerate(parents, start=1):
        times[j] = times[p] + float(rng.exponential(1.0 / rate))
    ids = [f"s{pair:04d}{label}p{j}" for j in range(n)]
    posts = [Post(id=ids[0], text=texts[0], time=0.0, reply_to=None)]
    replies = [
        Post(id=ids[j], text=texts[j], time=times[j], reply_to=ids[parents[j - 1]])
        for j in range(1, n)
    ]
    replies.sort(key=lambda p: p.time)
    return ThreadRecord(
        thread_id=f"synth-{pair:04d}-{label.lower()}",
        event=f"synth-event-{pair % 5}",
        label=label,
        posts=posts + replies,
    )


def synth_threads(n_threads: int = 300, seed: int = 0,
                  n_posts: int = DEFAULT_N_POSTS) -> list[ThreadRecord]:
    """Generate n_threads threads as n_threads/2 matched TR/FR pairs."""
    if n_threads < 2 or n_threads % 2:
        raise ValueError("n_threads must be even and >= 2")
    if n_posts < 2:
        raise ValueError("n_posts must be >= 2")
    rng = np.random.default_rng(seed)
    parents = [j - 1 for j in range(1, n_posts)]
    texts = [CLAIM_TEXT] + [REPLY_TEXT] * (n_posts - 1)
    threads: list[ThreadRecord] = []
    for pair in range(n_threads // 2):
        threads.append(_thread(pair, "TR", RATE_A, parents, texts, rng))
        threads.append(_thread(pair, "FR", RATE_B, parents, texts, rng))
    return threads


def synth_split(threads: list[ThreadRecord],
                train_fraction: float = 0.8) -> tuple[list[str], list[str]]:
    """Pair-preserving stratified split; returns (train_ids, test_ids)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    pairs: dict[str, list[str]] = {}
    for th in threads:
        pairs.setdefault(th.thread_id.rsplit("-", 1)[0], []).append(th.thread_id)
    keys = sorted(pairs)
    n_train = round(train_fraction * len(keys))
    train = [tid for k in keys[:n_train] for tid in sorted(pairs[k])]
    test = [tid for k in keys[n_train:] for tid in sorted(pairs[k])]
    return train, test


def thread_to_payload(thread: ThreadRecord) -> dict:
    return {
        "thread_id": thread.thread_id,
        "event": thread.event,
        "label": thread.label,
        "posts": [
            {"id": p.id, "text": p.text, "time": p.time, "reply_to": p.reply_to}
            for p in thread.posts
        ],
    }


def write_jsonl(path, threads: list[ThreadRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for th in threads:
            fh.write(json.dumps(thread_to_payload(th), sort_keys=True,
                                separators=(",", ":")) + "\n")
