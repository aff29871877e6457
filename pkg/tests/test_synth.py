"""Synthetic corpus generator: pairing, timing channel, split, serialization."""
import numpy as np
import pytest

from entropic_trees.propagation import (
    build_propagation_tree,
    parse_threads,
)
from entropic_trees.synth import (
    CLAIM_TEXT,
    DEFAULT_N_POSTS,
    REPLY_TEXT,
    synth_split,
    synth_threads,
    write_jsonl,
)


class TestSynthThreads:
    def test_shape_and_pairing(self):
        threads = synth_threads(20, seed=0, n_posts=8)
        assert len(threads) == 20
        assert [th.label for th in threads] == ["TR", "FR"] * 10
        for i in range(0, 20, 2):
            tr, fr = threads[i], threads[i + 1]
            base = tr.thread_id.rsplit("-", 1)[0]
            assert fr.thread_id.rsplit("-", 1)[0] == base
            assert tr.thread_id.endswith("-tr")
            assert fr.thread_id.endswith("-fr")
            assert len(tr) == len(fr) == 8

    def test_ids_events_and_texts(self):
        threads = synth_threads(12, seed=1, n_posts=4)
        for th in threads:
            pair = int(th.thread_id.split("-")[1])
            assert th.event == f"synth-event-{pair % 5}"
            assert th.claim.id == f"s{pair:04d}{th.label}p0"
            assert th.claim.text == CLAIM_TEXT
            assert all(p.text == REPLY_TEXT for p in th.posts[1:])

    def test_replies_form_a_chain(self):
        threads = synth_threads(4, seed=2, n_posts=6)
        for th in threads:
            by_id = {p.id: p for p in th.posts}
            for p in th.posts[1:]:
                parent = by_id[p.reply_to]
                assert parent.time <= p.time
            # chained ids: p_j replies to p_{j-1} regardless of sort order
            for p in th.posts[1:]:
                j = int(p.id.rsplit("p", 1)[1])
                assert p.reply_to == p.id[:p.id.rindex("p") + 1] + str(j - 1)

    def test_deterministic_by_seed(self):
        a = synth_threads(10, seed=5, n_posts=5)
        b = synth_threads(10, seed=5, n_posts=5)
        c = synth_threads(10, seed=6, n_posts=5)
        assert a == b
        assert a != c

    def test_default_post_count(self):
        threads = synth_threads(2, seed=0)
        assert all(len(th) == DEFAULT_N_POSTS for th in threads)

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            synth_threads(3, seed=0)
        with pytest.raises(ValueError):
            synth_threads(0, seed=0)
        with pytest.raises(ValueError):
            synth_threads(2, seed=0, n_posts=1)

    def test_clamp_fractions_separate_the_classes(self):
        threads = synth_threads(60, seed=0, n_posts=64)
        frac = {"TR": [], "FR": []}
        for th in threads:
            tree = build_propagation_tree(th, min_weight=1.0)
            frac[th.label].append(tree.n_clamped / tree.n_edges)
        tr = float(np.mean(frac["TR"]))
        fr = float(np.mean(frac["FR"]))
        # gaps ~ Exp(1) vs Exp(3): clamp rates near 1-e^-1 and 1-e^-3
        assert 0.55 < tr < 0.70
        assert 0.90 < fr < 0.985
        assert fr - tr > 0.2


class TestSynthSplit:
    def test_default_split_sizes(self):
        threads = synth_threads(300, seed=0, n_posts=4)
        train, test = synth_split(threads)
        assert len(train) == 240
        assert len(test) == 60
        assert not set(train) & set(test)
        assert set(train) | set(test) == {th.thread_id for th in threads}

    def test_pairs_never_straddle_the_split(self):
        threads = synth_threads(30, seed=1, n_posts=4)
        train, test = synth_split(threads, train_fraction=0.7)
        for side in (train, test):
            bases = [tid.rsplit("-", 1)[0] for tid in side]
            assert all(bases.count(b) == 2 for b in bases)

    def test_fraction_validation(self):
        threads = synth_threads(4, seed=0, n_posts=4)
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                synth_split(threads, train_fraction=bad)


class TestWriteJsonl:
    def test_roundtrip_through_parser(self, tmp_path):
        threads = synth_threads(8, seed=3, n_posts=5)
        path = tmp_path / "corpus.jsonl"
        write_jsonl(path, threads)
        with open(path, encoding="utf-8") as fh:
            parsed, diagnostics = parse_threads(fh)
        assert diagnostics == []
        assert parsed == threads

    def test_output_is_stable(self, tmp_path):
        threads = synth_threads(4, seed=4, n_posts=4)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(a, threads)
        write_jsonl(b, threads)
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text().count("\n") == 4