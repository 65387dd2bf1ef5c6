import numpy as np
import pytest

from shrinklm.errors import ValidationError
from shrinklm.evaluate import (
    EvalReport, corpus_windows, perplexity, perplexity_windows, rouge_l,
    throughput_bench, window_nll,
)
from shrinklm.model import ModelConfig, TrainConfig, forward, train


def brute_force_lcs(a, b):
    # independent recursive-with-memo oracle
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


class TestPerplexity:
    def test_uniform_logits_gives_vocab_size(self, small_model, rng):
        small_model.params["lm_head"][...] = 0.0  # logits all zero -> uniform
        windows = [rng.integers(0, 256, size=32) for _ in range(3)]
        ppl = perplexity_windows(small_model, windows)
        assert ppl == pytest.approx(small_model.config.vocab_size, rel=1e-3)

    def test_matches_manual_nll(self, small_model, rng):
        w = rng.integers(0, 256, size=20)
        logits = forward(small_model, w)
        manual = 0.0
        for t in range(19):
            row = logits[t]
            manual += np.log(np.sum(np.exp(row - row.max()))) + row.max() - row[w[t + 1]]
        got = perplexity_windows(small_model, [w])
        assert got == pytest.approx(np.exp(manual / 19), rel=1e-6)

    def test_memorized_corpus_approaches_one(self):
        corpus = bytes([97]) * (80 * 1024)  # 'a' repeated
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, seed=1)
        model, _ = train(cfg, corpus, 600, TrainConfig(steps=600, batch_size=4, seq_len=32))
        assert perplexity(model, corpus[:2048], seq_len=64) < 1.05

    def test_corpus_too_short(self, small_model):
        with pytest.raises(ValidationError, match="too short"):
            perplexity(small_model, b"abc", seq_len=64)

    def test_window_shapes(self):
        w = corpus_windows(bytes(range(256)) * 4, 128)
        assert w.shape == (8, 128)
        assert corpus_windows(bytes(range(256)) * 4, 128, max_windows=3).shape == (3, 128)

    def test_window_nll_counts(self, small_model, rng):
        nll, n = window_nll(small_model, rng.integers(0, 256, size=16))
        assert n == 15 and nll > 0


class TestRougeL:
    def test_identical_strings(self):
        assert rouge_l("the cat sat", "the cat sat")["f"] == pytest.approx(100.0)

    def test_disjoint(self):
        assert rouge_l("aa bb cc", "dd ee ff")["f"] == 0.0

    def test_known_example(self):
        r = rouge_l("police killed the gunman", "police kill the gunman")
        assert r["precision"] == pytest.approx(75.0)
        assert r["recall"] == pytest.approx(75.0)

    def test_against_bruteforce_lcs(self, rng):
        vocab = ["a", "b", "c", "d", "e"]
        for _ in range(30):
            hyp = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(1, 10))]
            ref = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(1, 10))]
            lcs = brute_force_lcs(tuple(hyp), tuple(ref))
            r = rouge_l(hyp, ref)
            assert r["precision"] == pytest.approx(100.0 * lcs / len(hyp))
            assert r["recall"] == pytest.approx(100.0 * lcs / len(ref))

    def test_empty_hypothesis(self):
        assert rouge_l("", "some reference") == {"precision": 0.0, "recall": 0.0, "f": 0.0}

    def test_empty_reference_rejected(self):
        with pytest.raises(ValidationError, match="reference"):
            rouge_l("something", "")

    def test_case_folding_and_whitespace(self):
        assert rouge_l("The CAT", "the cat")["f"] == pytest.approx(100.0)

    def test_monotone_under_reference_extension(self):
        # hyp is a correct prefix; appending reference words keeps precision
        # at 100 and never increases recall.
        hyp = "a b c"
        prev_recall = 100.0
        ref_words = ["a", "b", "c"]
        for extra in ["x", "y", "z"]:
            ref_words.append(extra)
            r = rouge_l(hyp, " ".join(ref_words))
            assert r["precision"] == pytest.approx(100.0)
            assert r["recall"] <= prev_recall + 1e-9
            prev_recall = r["recall"]

    def test_scores_within_bounds(self, rng):
        words = ["w%d" % i for i in range(8)]
        for _ in range(20):
            hyp = [words[i] for i in rng.integers(0, 8, size=6)]
            ref = [words[i] for i in rng.integers(0, 8, size=6)]
            r = rouge_l(hyp, ref)
            assert all(0.0 <= v <= 100.0 for v in r.values())


class TestBenchmarks:
    def test_forty_percent_static_faster_than_dense(self, rng):
        # At compute-bound shapes a 40%-rate factorization does ~60% of the
        # dense flops, which shows up as wall-clock speedup even on CPU.
        # Two bench rounds, best taken: background contention can only slow
        # a round down, never speed it up.
        from shrinklm.compression import (
            ImportanceMap, compress_model, dense_projection_params,
            uniform_rank_allocation,
        )
        from shrinklm.decoding import DecodeSchedule
        from shrinklm.model import ModelConfig, init_model

        cfg = ModelConfig(d_model=192, n_layers=1, n_heads=4, d_ff=768,
                          max_seq_len=600, seed=6)
        model = init_model(cfg)
        target = int(0.6 * dense_projection_params(cfg))
        alloc = uniform_rank_allocation(cfg, target)
        imp = ImportanceMap(values=dict.fromkeys(alloc.ranks, 1.0), metric="weight_only")
        comp = compress_model(model, alloc, importance=imp)
        assert abs(comp.projection_params_used() / dense_projection_params(cfg) - 0.6) < 0.02
        prompt = rng.integers(0, 256, size=448)
        sched = DecodeSchedule(steps=((0, alloc.budget),))
        best = 0.0
        for _ in range(2):
            rows = throughput_bench(model, comp, sched, prompt, gen_len=4, repeats=7)
            static = next(r for r in rows if r.name == "static_compressed")
            best = max(best, static.speedup)
        assert best > 1.0, f"static speedup {best:.2f}x"

    def test_throughput_schema_and_self_speedup(self, small_model, rng):
        from shrinklm.compression import (
            ImportanceMap, allocate_ranks, compress_model, default_caps,
        )
        from shrinklm.decoding import DecodeSchedule
        from shrinklm.model import all_projection_ids

        cfg = small_model.config
        pids = all_projection_ids(cfg)
        imp = ImportanceMap(values=dict.fromkeys(pids, 1.0), metric="fisher")
        caps = default_caps(cfg)
        alloc = allocate_ranks(imp, sum(caps.values()) // 2, 1, caps)
        comp = compress_model(small_model, alloc, importance=imp)
        sched = DecodeSchedule(steps=((0, alloc.budget), (4, int(0.8 * alloc.budget))))
        rows = throughput_bench(small_model, comp, sched, rng.integers(0, 256, size=16),
                                gen_len=4, repeats=3)
        names = [r.name for r in rows]
        assert names == ["dense", "static_compressed", "progressive"]
        assert all(r.tokens_per_sec > 0 and r.seconds > 0 for r in rows)
        assert rows[0].speedup == 1.0


class TestSearchTimeBench:
    @pytest.fixture()
    def bench_setup(self, small_model, rng):
        batches = [rng.integers(0, 256, size=(4, 48)) for _ in range(4)]
        windows = [rng.integers(0, 256, size=48) for _ in range(6)]
        return small_model, batches, windows

    def test_gradient_path_is_one_backward_per_batch(self, bench_setup, monkeypatch):
        import shrinklm.evaluate as evaluate_mod
        from shrinklm.model import backward as real_backward

        model, batches, windows = bench_setup
        calls = {"n": 0}

        def counting_backward(m, b):
            calls["n"] += 1
            return real_backward(m, b)

        monkeypatch.setattr("shrinklm.model.backward", counting_backward)
        evaluate_mod.search_time_bench(model, batches, windows, 0.2)
        assert calls["n"] == len(batches)

    def test_ratio_at_least_ten_and_stable(self, bench_setup):
        # Timing property: retried a couple of times so a CPU-contention
        # spike on a shared box does not masquerade as instability.
        from shrinklm.evaluate import search_time_bench

        model, batches, windows = bench_setup
        last = None
        for _ in range(3):
            r1 = search_time_bench(model, batches, windows, 0.2)
            r2 = search_time_bench(model, batches, windows, 0.2)
            spread = abs(r1.ratio - r2.ratio) / max(r1.ratio, r2.ratio)
            last = (r1.ratio, r2.ratio, spread)
            if r1.ratio >= 10.0 and r2.ratio >= 10.0 and spread < 0.2:
                return
        raise AssertionError(f"search-time ratio unstable across retries: {last}")


class TestEvalReport:
    def test_bounds_enforced(self):
        with pytest.raises(ValidationError):
            EvalReport(perplexity=0.5, rouge_l={"f": 10.0}, compression_rate=0.2,
                       throughput=1.0)
        with pytest.raises(ValidationError):
            EvalReport(perplexity=2.0, rouge_l={"f": 101.0}, compression_rate=0.2,
                       throughput=1.0)

    def test_serialization(self):
        rep = EvalReport(
            perplexity=3.5, rouge_l={"precision": 50.0, "recall": 40.0, "f": 44.0},
            compression_rate=0.2, throughput=100.0, wall_clock={"perplexity": 1.5},
        )
        d = rep.to_json_dict()
        assert d["perplexity"] == 3.5
        table = rep.to_table()
        assert "perplexity" in table and "rouge_l f" in table
