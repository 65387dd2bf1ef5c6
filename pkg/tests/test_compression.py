import itertools

import numpy as np
import pytest

from shrinklm.compression import (
    BaselineAllocationResult, ImportanceMap, RankAllocation, allocate_ranks,
    baseline_allocate_perplexity, breakeven_report, budget_for_params,
    cheapest_rank_within_threshold, compress_model, compute_importance, default_caps,
    dense_projection_params, factorize, factorized_params, load_compressed,
    save_compressed, uniform_rank_allocation, whiten, whiten_from_gram,
)
from shrinklm.errors import NumericalError, ValidationError
from shrinklm.linalg import svd
from shrinklm.model import (
    ModelConfig, ProjectionId, all_projection_ids, backward, forward, init_model,
)

P3 = (ProjectionId(0, "q_proj"), ProjectionId(0, "k_proj"), ProjectionId(0, "v_proj"))


def imap(*alphas):
    return ImportanceMap(values=dict(zip(P3, alphas)), metric="fisher")


class TestImportance:
    def test_fisher_formula(self, small_model, rng):
        backward(small_model, rng.integers(0, 256, size=(2, 8)))
        pid = ProjectionId(0, "q_proj")
        w = np.zeros_like(small_model.projection(pid))
        g = np.zeros_like(w)
        w[0, 0], w[0, 1] = 1.0, 2.0
        g[0, 0], g[0, 1] = 3.0, 4.0
        small_model.params[pid.param_name] = w
        small_model.grads[pid.param_name] = g
        imp = compute_importance(small_model, "fisher")
        assert imp.values[pid] == pytest.approx(73.0)  # (3*1)^2 + (4*2)^2
        assert compute_importance(small_model, "weight_only").values[pid] == pytest.approx(5.0)
        assert compute_importance(small_model, "grad_only").values[pid] == pytest.approx(25.0)

    def test_zero_gradient_zero_alpha(self, small_model):
        small_model.grads = {k: np.zeros_like(v) for k, v in small_model.params.items()}
        imp = compute_importance(small_model, "fisher")
        assert all(a == 0.0 for a in imp.values.values())

    def test_grad_metrics_require_grads(self, small_model):
        for metric in ("fisher", "grad_only"):
            with pytest.raises(ValidationError, match="grad"):
                compute_importance(small_model, metric)
        compute_importance(small_model, "weight_only")

    def test_unknown_metric(self, small_model):
        with pytest.raises(ValidationError, match="metric"):
            compute_importance(small_model, "hessian")

    def test_total_is_sum(self, small_model, rng):
        backward(small_model, rng.integers(0, 256, size=(2, 8)))
        imp = compute_importance(small_model, "fisher")
        s = sum(imp.values[p] for p in imp.ordered_pids())
        assert abs(imp.total - s) <= 1e-12 * max(s, 1.0)

    def test_json_roundtrip(self, small_model, rng):
        backward(small_model, rng.integers(0, 256, size=(2, 8)))
        imp = compute_importance(small_model, "fisher")
        back = ImportanceMap.from_json_dict(imp.to_json_dict())
        assert back.values == imp.values
        assert back.total == imp.total


class TestAllocateRanks:
    def test_exact_proportions(self):
        alloc = allocate_ranks(imap(2.0, 1.0, 1.0), 8, 1, dict.fromkeys(P3, 10))
        assert [alloc.ranks[p] for p in P3] == [4, 2, 2]

    def test_equal_alpha_symmetry(self):
        pids = [ProjectionId(0, k) for k in ("q_proj", "k_proj", "v_proj", "o_proj")]
        imp = ImportanceMap(values=dict.fromkeys(pids, 1.0), metric="fisher")
        alloc = allocate_ranks(imp, 12, 1, dict.fromkeys(pids, 20))
        assert all(alloc.ranks[p] == 3 for p in pids)

    def test_correction_tie_break(self):
        # raw = 8/3 each -> rounds to 9; the last projection loses the extra.
        alloc = allocate_ranks(imap(1.0, 1.0, 1.0), 8, 1, dict.fromkeys(P3, 10))
        assert [alloc.ranks[p] for p in P3] == [3, 3, 2]
        assert sum(alloc.ranks.values()) == 8

    def test_exhaustive_three_entry_cases(self):
        # Independent oracle: the allocation must achieve the minimal
        # L1 deviation from the ideal shares among all feasible triples.
        grid = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0]
        cap = 6
        for alphas in itertools.product(grid, repeat=3):
            imp = imap(*alphas)
            for budget in range(3, 13):
                if budget > 3 * cap:
                    continue
                alloc = allocate_ranks(imp, budget, 1, dict.fromkeys(P3, cap))
                got = np.array([alloc.ranks[p] for p in P3])
                assert got.sum() == budget
                assert np.all(got >= 1) and np.all(got <= cap)
                raw = np.array(alphas) / sum(alphas) * budget
                best = min(
                    np.abs(np.array(t) - raw).sum()
                    for t in itertools.product(range(1, cap + 1), repeat=3)
                    if sum(t) == budget
                )
                assert np.abs(got - raw).sum() <= best + 1e-9

    def test_budget_conservation_randomized(self, rng):
        pids = all_projection_ids(ModelConfig(n_layers=2))
        caps = {p: 64 for p in pids}
        for _ in range(200):
            alphas = rng.uniform(0.0, 10.0, size=len(pids))
            imp = ImportanceMap(values=dict(zip(pids, alphas)), metric="fisher")
            floor = int(rng.integers(1, 4))
            budget = int(rng.integers(floor * len(pids), 64 * len(pids) + 1))
            alloc = allocate_ranks(imp, budget, floor, caps)
            ranks = np.array([alloc.ranks[p] for p in pids])
            assert ranks.sum() == budget
            assert np.all(ranks >= floor) and np.all(ranks <= 64)

    def test_scale_invariance(self, rng):
        caps = dict.fromkeys(P3, 30)
        for scale in (2.0, 3.7, 1e6, 1e-6):
            for _ in range(30):
                alphas = rng.uniform(0.1, 5.0, size=3)
                a1 = allocate_ranks(imap(*alphas), 17, 1, caps)
                a2 = allocate_ranks(imap(*(alphas * scale)), 17, 1, caps)
                assert a1.ranks == a2.ranks

    def test_monotone_in_alpha(self, rng):
        caps = dict.fromkeys(P3, 100)
        for _ in range(100):
            alphas = rng.uniform(0.5, 3.0, size=3)
            budget = int(rng.integers(6, 40))
            base = allocate_ranks(imap(*alphas), budget, 1, caps)
            bumped = alphas.copy()
            bumped[0] *= rng.uniform(1.01, 2.0)
            after = allocate_ranks(imap(*bumped), budget, 1, caps)
            assert after.ranks[P3[0]] >= base.ranks[P3[0]]

    def test_infeasible_budgets(self):
        with pytest.raises(ValidationError, match="below floors"):
            allocate_ranks(imap(1.0, 1.0, 1.0), 2, 1, dict.fromkeys(P3, 10))
        with pytest.raises(ValidationError, match="above total cap"):
            allocate_ranks(imap(1.0, 1.0, 1.0), 100, 1, dict.fromkeys(P3, 4))

    def test_rank_zero_disallowed(self):
        with pytest.raises(ValidationError, match="floor"):
            allocate_ranks(imap(1.0, 1.0, 1.0), 6, 0, dict.fromkeys(P3, 10))

    def test_zero_importance_even_split(self):
        alloc = allocate_ranks(imap(0.0, 0.0, 0.0), 9, 1, dict.fromkeys(P3, 10))
        assert [alloc.ranks[p] for p in P3] == [3, 3, 3]

    def test_json_roundtrip(self):
        caps = dict.fromkeys(P3, 10)
        alloc = allocate_ranks(imap(2.0, 1.0, 1.0), 8, 1, caps)
        back = RankAllocation.from_json_dict(alloc.to_json_dict(), caps)
        assert back.ranks == alloc.ranks and back.budget == 8 and back.floor == 1


class TestBudgetHelpers:
    def test_budget_for_params_hits_target(self, small_model, rng):
        backward(small_model, rng.integers(0, 256, size=(2, 8)))
        imp = compute_importance(small_model, "fisher")
        cfg = small_model.config
        dense = dense_projection_params(cfg)
        budget = budget_for_params(imp, dense, cfg)
        alloc = allocate_ranks(imp, budget, 1, default_caps(cfg))
        got = factorized_params(alloc.ranks, cfg)
        assert abs(got - dense) <= 256  # within one rank step

    def test_uniform_allocation(self):
        cfg = ModelConfig()
        dense = dense_projection_params(cfg)
        alloc = uniform_rank_allocation(cfg, int(0.8 * dense))
        ranks = set(alloc.ranks.values())
        assert len(ranks) == 1
        assert abs(factorized_params(alloc.ranks, cfg) - 0.8 * dense) <= 2560

    def test_breakeven_report(self):
        cfg = ModelConfig()
        caps = default_caps(cfg)
        pids = all_projection_ids(cfg)
        full = RankAllocation(ranks=dict(caps), budget=sum(caps.values()), floor=1, caps=caps)
        over = breakeven_report(full, cfg)
        assert set(over) == set(pids)  # full rank stores more than dense everywhere


class TestWhitening:
    def test_identity_gram(self, rng):
        # Unit white activations: X'X/N = I, so s = I and w_scaled = w.
        w = rng.normal(size=(6, 4))
        x = np.vstack([np.eye(4)] * 5) * 2.0  # X'X/N = 20 I / 20 = I
        w_scaled, wh = whiten(w, x, damping_scale=0.0)
        assert np.allclose(wh.s, np.eye(4), atol=1e-12)
        assert np.allclose(w_scaled, w, atol=1e-12)

    def test_scalar_gram(self, rng):
        # Gram = c^2 I: s = c I and full-rank reconstruction is unchanged.
        c = 3.0
        w = rng.normal(size=(5, 4))
        x = np.vstack([np.eye(4)] * 4) * (2.0 * c)  # X'X/N = 16c^2/16 I = c^2 I
        w_scaled, wh = whiten(w, x, damping_scale=0.0)
        assert np.allclose(wh.s, c * np.eye(4), atol=1e-10)
        fp = factorize(w, 4, whitener=wh)
        assert np.linalg.norm(fp.reconstruct() - w) / np.linalg.norm(w) <= 1e-8

    def test_full_rank_roundtrip_random(self, rng):
        w = rng.normal(size=(8, 6))
        x = rng.normal(size=(200, 6))
        _, wh = whiten(w, x)
        fp = factorize(w, 6, whitener=wh)
        assert np.linalg.norm(fp.reconstruct() - w) / np.linalg.norm(w) <= 1e-6
        assert np.max(np.abs(wh.s @ wh.s_inv - np.eye(6))) <= 1e-8

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValidationError, match="feature dim"):
            whiten(rng.normal(size=(4, 4)), rng.normal(size=(10, 5)))

    def test_zero_activations_fail_with_damping_hint(self):
        with pytest.raises(NumericalError, match="damping"):
            whiten_from_gram(np.zeros((4, 4)), 10)

    def test_needs_samples(self):
        with pytest.raises(ValidationError, match="sample"):
            whiten_from_gram(np.eye(3), 0)


class TestFactorize:
    def test_diagonal_eckart_young(self):
        fp = factorize(np.diag([3.0, 2.0, 1.0]), 2)
        err = np.linalg.norm(fp.reconstruct() - np.diag([3.0, 2.0, 1.0]))
        assert err == pytest.approx(1.0, abs=1e-10)

    def test_full_rank_exact(self, rng):
        w = rng.normal(size=(9, 7))
        fp = factorize(w, 7)
        assert np.linalg.norm(fp.reconstruct() - w) / np.linalg.norm(w) <= 1e-8

    def test_tail_error(self, rng):
        w = rng.normal(size=(32, 48))
        sv = svd(w).singular_values
        fp = factorize(w, 8)
        err2 = np.sum((fp.reconstruct() - w) ** 2)
        assert abs(err2 - np.sum(sv[8:] ** 2)) <= 1e-10

    def test_rank_bounds(self, rng):
        w = rng.normal(size=(5, 4))
        for bad in (0, 5):
            with pytest.raises(ValidationError, match="rank"):
                factorize(w, bad)

    def test_nesting(self, rng):
        w = rng.normal(size=(12, 10))
        full = factorize(w, 10)
        for k in (1, 3, 7):
            fresh = factorize(w, k)
            assert np.max(np.abs(full.reconstruct(k) - fresh.reconstruct())) <= 1e-8

    def test_singular_order(self, rng):
        fp = factorize(rng.normal(size=(10, 8)), 5)
        assert np.all(np.diff(fp.singular_values) <= 0)
        assert 1 <= fp.active_rank <= fp.full_rank

    def test_params_used(self, rng):
        fp = factorize(rng.normal(size=(10, 8)), 5)
        assert fp.params_used() == 5 * 18
        assert fp.params_used(2) == 2 * 18


class TestCompressModel:
    def test_full_rank_lossless(self, small_model, rng):
        cfg = small_model.config
        caps = default_caps(cfg)
        pids = all_projection_ids(cfg)
        imp = ImportanceMap(values=dict.fromkeys(pids, 1.0), metric="fisher")
        alloc = allocate_ranks(imp, sum(caps.values()), 1, caps)
        comp = compress_model(small_model, alloc, importance=imp)
        toks = rng.integers(0, 256, size=20)
        diff = np.max(np.abs(forward(small_model, toks) - forward(comp, toks)))
        assert diff < 1e-4

    def test_param_count_arithmetic(self, small_model):
        cfg = small_model.config
        pids = all_projection_ids(cfg)
        imp = ImportanceMap(values=dict.fromkeys(pids, 1.0), metric="fisher")
        half = {p: default_caps(cfg)[p] // 2 for p in pids}
        alloc = RankAllocation(ranks=half, budget=sum(half.values()), floor=1,
                               caps=default_caps(cfg))
        comp = compress_model(small_model, alloc, importance=imp)
        expect = factorized_params(half, cfg)
        assert comp.projection_params_used() == expect

    def test_missing_projection_named(self, small_model):
        cfg = small_model.config
        pids = all_projection_ids(cfg)
        ranks = {p: 4 for p in pids if p != ProjectionId(1, "o_proj")}
        alloc = RankAllocation(ranks=ranks, budget=sum(ranks.values()), floor=1,
                               caps=default_caps(cfg))
        with pytest.raises(ValidationError, match="L1.o_proj"):
            compress_model(small_model, alloc)

    def test_whitened_compress_runs(self, small_model, rng):
        cfg = small_model.config
        pids = all_projection_ids(cfg)
        ranks = dict.fromkeys(pids, 16)
        alloc = RankAllocation(ranks=ranks, budget=sum(ranks.values()), floor=1,
                               caps=default_caps(cfg))
        seqs = [rng.integers(0, 256, size=24) for _ in range(3)]
        comp = compress_model(small_model, alloc, whitening=True, calib_sequences=seqs)
        logits = forward(comp, rng.integers(0, 256, size=10))
        assert np.all(np.isfinite(logits))
        assert comp.whitened

    def test_whitening_needs_calibration(self, small_model):
        cfg = small_model.config
        pids = all_projection_ids(cfg)
        ranks = dict.fromkeys(pids, 8)
        alloc = RankAllocation(ranks=ranks, budget=sum(ranks.values()), floor=1,
                               caps=default_caps(cfg))
        with pytest.raises(ValidationError, match="calibration"):
            compress_model(small_model, alloc, whitening=True)

    def test_threaded_factorization_bit_identical(self, small_model, rng):
        cfg = small_model.config
        pids = all_projection_ids(cfg)
        ranks = dict.fromkeys(pids, 10)
        alloc = RankAllocation(ranks=ranks, budget=sum(ranks.values()), floor=1,
                               caps=default_caps(cfg))
        seq = compress_model(small_model, alloc, n_threads=1)
        par = compress_model(small_model, alloc, n_threads=4)
        for pid in pids:
            assert np.array_equal(seq.projections[pid].a, par.projections[pid].a)
            assert np.array_equal(seq.projections[pid].b, par.projections[pid].b)

    def test_save_load_roundtrip(self, small_model, rng, tmp_path):
        cfg = small_model.config
        pids = all_projection_ids(cfg)
        backward(small_model, rng.integers(0, 256, size=(2, 8)))
        imp = compute_importance(small_model, "fisher")
        ranks = dict.fromkeys(pids, 12)
        alloc = RankAllocation(ranks=ranks, budget=sum(ranks.values()), floor=1,
                               caps=default_caps(cfg))
        comp = compress_model(small_model, alloc, importance=imp)
        path = str(tmp_path / "c.tlmc")
        save_compressed(comp, path)
        loaded, meta = load_compressed(path)
        assert meta["kind"] == "compressed-lm"
        assert loaded.allocation.ranks == alloc.ranks
        assert loaded.importance.values == imp.values
        for pid in pids:
            assert np.array_equal(loaded.projections[pid].a, comp.projections[pid].a)
            assert np.array_equal(loaded.projections[pid].b, comp.projections[pid].b)
        toks = rng.integers(0, 256, size=8)
        assert np.array_equal(forward(loaded, toks), forward(comp, toks))


class TestBaselineAllocator:
    def test_threshold_rule(self):
        increases = {8: 3.0, 16: 1.0, 24: 0.2, 32: 0.0}
        assert cheapest_rank_within_threshold(increases, 32, 0.5) == 24
        assert cheapest_rank_within_threshold(increases, 32, 1.5) == 16
        assert cheapest_rank_within_threshold(increases, 32, 10.0) == 8
        assert cheapest_rank_within_threshold(increases, 32, 0.0) == 32

    def test_target_zero_keeps_full_rank(self, rng):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, seed=2)
        model = init_model(cfg)
        windows = [rng.integers(0, 256, size=24) for _ in range(2)]
        res = baseline_allocate_perplexity(model, windows, 0.0)
        assert isinstance(res, BaselineAllocationResult)
        caps = default_caps(cfg)
        assert res.allocation.ranks == caps
        assert res.seconds > 0

    def test_reduces_budget_at_positive_rate(self, rng):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, seed=2)
        model = init_model(cfg)
        windows = [rng.integers(0, 256, size=24) for _ in range(2)]
        res = baseline_allocate_perplexity(model, windows, 0.5)
        caps = default_caps(cfg)
        assert res.allocation.budget <= 0.55 * sum(caps.values())
        assert all(r >= 1 for r in res.allocation.ranks.values())
