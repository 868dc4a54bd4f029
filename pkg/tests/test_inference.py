import numpy as np
import pytest
import torch

from ville.datagen import Event, SyntheticVideo, WindowConfig, interval_iou
from ville.evalkit import oracle_seed_merge
from ville.inference import (
    EmbeddingIndex,
    IndexBuildError,
    MergeConfig,
    index_build,
    index_search,
    load_index,
    localize,
    merged_span,
    rerank,
    retrieve_composed,
    seed_merge,
    segments_from_scores,
    window_clips,
)


def unit(*xs):
    v = np.asarray(xs, dtype=np.float64)
    return v / np.linalg.norm(v)


def video(duration, events=()):
    return SyntheticVideo("vid", float(duration), np.zeros((int(duration), 8), np.float32), [Event(*e) for e in events])


class TestIndex:
    def test_search_example(self):
        idx = index_build([("a", unit(1, 0)), ("b", unit(0, 1)), ("c", unit(1, 1))])
        hits = index_search(idx, unit(1, 0.1), 2)
        assert [h[0] for h in hits] == ["a", "c"]
        assert hits[0][1] == pytest.approx(float(unit(1, 0.1)[0]))

    def test_ties_broken_by_id(self):
        idx = index_build([("z", unit(1, 0)), ("m", unit(1, 0)), ("a", unit(0, 1))])
        assert [h[0] for h in index_search(idx, unit(1, 0), 3)] == ["m", "z", "a"]

    def test_insertion_order_invariant(self):
        rng = np.random.default_rng(0)
        items = [(f"id{i}", unit(*rng.standard_normal(6))) for i in range(30)]
        q = rng.standard_normal(6)
        a = index_search(index_build(items), q, 10)
        b = index_search(index_build(items[::-1]), q, 10)
        assert a == b

    def test_validation(self):
        with pytest.raises(IndexBuildError):
            index_build([("a", unit(1, 0)), ("a", unit(0, 1))])
        with pytest.raises(IndexBuildError):
            index_build([("a", np.array([2.0, 0.0]))])
        idx = index_build([("a", unit(1, 0))])
        with pytest.raises(ValueError):
            index_search(idx, unit(1, 0), 0)
        with pytest.raises(ValueError):
            index_search(idx, unit(1, 0, 0), 1)
        assert not idx.matrix.flags.writeable

    def test_empty_gallery(self):
        assert index_search(index_build([]), unit(1, 0), 5) == []

    def test_k_larger_than_gallery(self):
        assert len(index_search(index_build([("a", unit(1, 0))]), unit(1, 0), 10)) == 1

    def test_save_load(self, tmp_path):
        from ville.inference import save_index

        idx = index_build([("a", unit(1, 2)), ("b", unit(3, -1))])
        back = load_index(save_index(idx, tmp_path / "ix"))
        assert back.ids == idx.ids
        assert np.allclose(back.matrix, idx.matrix, atol=1e-7)


class TestWindows:
    def test_default_grid(self):
        assert len(window_clips(video(60), WindowConfig(10, 5))) == 11
        assert window_clips(video(60), WindowConfig(10, 10))[-1] == (50.0, 60.0)


class TestSeedMerge:
    def test_example(self):
        # seed 0.9 -> bar min(0.4, 0.45) = 0.4
        assert seed_merge([0.1, 0.5, 0.9, 0.42, 0.3, 0.8], MergeConfig(0.4, 0.5)) == (1, 3)

    def test_relative_rule_can_admit_below_tau(self):
        assert seed_merge([0.2, 0.3], MergeConfig(tau_merge=0.9, alpha=0.5)) == (0, 1)

    def test_single_window(self):
        assert seed_merge([0.3], MergeConfig()) == (0, 0)
        with pytest.raises(ValueError):
            seed_merge([], MergeConfig())

    def test_matches_oracle_on_fuzzed_cases(self):
        rng = np.random.default_rng(1234)
        for _ in range(1000):
            n = int(rng.integers(1, 25))
            scores = rng.uniform(-1, 1, n).round(int(rng.integers(1, 4)))
            tau = float(rng.uniform(-0.5, 1))
            alpha = float(rng.uniform(0.01, 1))
            assert seed_merge(scores, MergeConfig(tau, alpha)) == oracle_seed_merge(list(scores), tau, alpha)

    def test_alpha_monotone(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            scores = rng.uniform(0, 1, 12)
            lo1, hi1 = seed_merge(scores, MergeConfig(1.0, 0.3))
            lo2, hi2 = seed_merge(scores, MergeConfig(1.0, 0.7))
            assert lo1 <= lo2 and hi2 <= hi1

    def test_merge_config_validation(self):
        with pytest.raises(ValueError):
            MergeConfig(alpha=0)
        with pytest.raises(ValueError):
            MergeConfig(top_n=0)


class TestMergedSpan:
    spans = [(0.0, 10.0), (5.0, 15.0), (10.0, 20.0), (15.0, 25.0)]

    def test_seed_only(self):
        assert merged_span(self.spans, 1, 1, 1, 5.0) == (5.0, 15.0)

    def test_center_correction(self):
        assert merged_span(self.spans, 0, 2, 1, 5.0) == (2.5, 17.5)
        assert merged_span(self.spans, 0, 2, 1, 5.0, correct=False) == (0.0, 20.0)

    def test_correction_stays_within_union(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            lo = int(rng.integers(0, 4))
            hi = int(rng.integers(lo, 4))
            seed = int(rng.integers(lo, hi + 1))
            a, b = merged_span(self.spans, lo, hi, seed, 5.0)
            assert self.spans[lo][0] <= a < b <= self.spans[hi][1]
            assert a == self.spans[lo][0] + (2.5 if lo != seed else 0)

    def test_top_n_segments_are_disjoint(self):
        segs = segments_from_scores(self.spans, [0.9, 0.1, 0.1, 0.8], MergeConfig(0.5, 0.9, top_n=3), 5.0)
        assert [(s, e) for s, e, _ in segs][:2] == [(0.0, 10.0), (15.0, 25.0)]
        assert [sc for _, _, sc in segs] == sorted([sc for _, _, sc in segs], reverse=True)


class TestLocalize:
    def test_oracle_scorer_recovers_span(self, tiny_model):
        v = video(60, [(0, 20.0, 30.0)])
        truth = (20.0, 30.0)
        scorer = lambda spans: [interval_iou(s, truth) for s in spans]
        (p,) = localize(v, [20], tiny_model, WindowConfig(10, 5), MergeConfig(0.4, 0.5), scorer=scorer)
        assert (p.start_s, p.end_s) == truth
        assert p.score == 1.0 and p.video_id == "vid"

    def test_merged_oracle_span_for_long_event(self, tiny_model):
        v = video(60, [(0, 10.0, 30.0)])
        truth = (10.0, 30.0)
        scorer = lambda spans: [interval_iou(s, truth) for s in spans]
        (p,) = localize(v, [20], tiny_model, WindowConfig(10, 5), MergeConfig(0.3, 0.5), scorer=scorer)
        assert interval_iou((p.start_s, p.end_s), truth) >= 0.7

    def test_model_path_returns_clamped_prediction(self, tiny_model, tiny_corpus):
        v = tiny_corpus.videos[0]
        preds = localize(v, v.caption(tiny_corpus.vocab)[:1], tiny_model, frame_stride=2)
        assert len(preds) == 1
        assert 0 <= preds[0].start_s < preds[0].end_s <= v.duration_s
        assert '"video_id"' in preds[0].to_json("q")


class TestRerank:
    corpus = {}

    def test_oracle_matcher_puts_truth_first(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            ids = [f"c{i}" for i in range(30)]
            rng.shuffle(ids)
            truth = ids[int(rng.integers(0, 25))]
            out = rerank([1], ids, {}, None, K=25, matcher=lambda cap, head: [float(i == truth) for i in head])
            assert out[0][0] == truth

    def test_tail_untouched_and_none_scored(self):
        ids = ["a", "b", "c", "d"]
        out = rerank([1], ids, {}, None, K=2, matcher=lambda cap, head: [0.0, 1.0])
        assert out == [("b", 1.0), ("a", 0.0), ("c", None), ("d", None)]

    def test_k1_is_identity_and_ties_stable(self):
        ids = ["a", "b", "c"]
        assert [i for i, _ in rerank([1], ids, {}, None, K=1, matcher=lambda c, h: [0.0])] == ids
        assert [i for i, _ in rerank([1], ids, {}, None, K=3, matcher=lambda c, h: [0.5] * 3)] == ids

    def test_result_is_permutation(self):
        ids = [f"c{i}" for i in range(10)]
        out = rerank([1], ids, {}, None, K=6, matcher=lambda c, h: list(np.random.default_rng(0).uniform(size=len(h))))
        assert sorted(i for i, _ in out) == sorted(ids)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            rerank([1], ["a"], {}, None, K=2, matcher=lambda c, h: [0.0])

    def test_model_matcher(self, tiny_model, tiny_corpus):
        by_id = tiny_corpus.by_id()
        ids = [v.id for v in tiny_corpus.videos[:5]]
        out = rerank(tiny_corpus.videos[0].caption(tiny_corpus.vocab), ids, by_id, tiny_model, K=5)
        assert sorted(i for i, _ in out) == sorted(ids)
        scores = [s for _, s in out]
        assert scores == sorted(scores, reverse=True)


def test_retrieve_composed(tiny_model, tiny_corpus):
    gallery = tiny_corpus.videos[:6]
    embs, _ = tiny_model.embed_videos([v.input_frames(2) for v in gallery])
    idx = EmbeddingIndex([v.id for v in gallery], embs.double().numpy())
    t = tiny_corpus.composed[0]
    src = tiny_corpus.by_id()[t.source_id]
    hits = retrieve_composed(src, t.change_tokens, idx, tiny_model, k=3)
    assert len(hits) == 3
    assert retrieve_composed(src, t.change_tokens, index_build([]), tiny_model) == []
    torch.testing.assert_close(torch.tensor([h[1] for h in hits]), torch.tensor(sorted([h[1] for h in hits], reverse=True)))
