import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptdsi.errors import ContractError
from promptdsi.metrics import (PerfMatrix, cl_metrics, hits_at_k,
                               memory_accounting, mrr_at_k, read_perf_csv,
                               write_perf_csv)


def ranked_from_scores(scores):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(i, float(scores[i])) for i in order]


class TestHitsMrr:
    def test_gold_at_rank_one(self):
        ranked = [(3, 2.0), (1, 1.0)]
        assert hits_at_k(ranked, 3, 1) == 1
        assert mrr_at_k(ranked, 3, 2) == 1.0

    def test_gold_below_cutoff(self):
        ranked = [(i, float(-i)) for i in range(12)]
        assert hits_at_k(ranked, 10, 10) == 0
        assert mrr_at_k(ranked, 10, 10) == 0.0

    def test_rank_four_reciprocal(self):
        ranked = [(i, float(-i)) for i in range(10)]
        assert mrr_at_k(ranked, 3, 10) == pytest.approx(0.25)

    def test_k_exceeding_list_rejected(self):
        with pytest.raises(ContractError):
            hits_at_k([(0, 1.0)], 0, 2)

    @given(st.integers(0, 10_000), st.integers(1, 30))
    @settings(max_examples=80, deadline=None)
    def test_membership_oracle_and_bounds(self, seed, k_raw):
        rng = np.random.default_rng(seed)
        n = 30
        ranked = ranked_from_scores(rng.normal(size=n))
        gold = int(rng.integers(0, n))
        k = min(k_raw, n)
        members = [d for d, _ in ranked[:k]]
        assert hits_at_k(ranked, gold, k) == int(gold in members)
        rank = [d for d, _ in ranked].index(gold) + 1
        assert mrr_at_k(ranked, gold, k) == (1.0 / rank if rank <= k else 0.0)
        assert mrr_at_k(ranked, gold, k) <= hits_at_k(ranked, gold, k)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_hits_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        ranked = ranked_from_scores(rng.normal(size=15))
        gold = int(rng.integers(0, 15))
        vals = [hits_at_k(ranked, gold, k) for k in range(1, 16)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))


def loop_oracle(p: dict, t: int):
    """Independent straight-loop evaluation of the continual metrics."""
    a = sum(p[(t, i)] for i in range(1, t + 1)) / t
    la = sum(p[(i, i)] for i in range(1, t + 1)) / t
    f = 0.0
    for i in range(t):
        best = max(p[(ip, i)] for ip in range(i, t))
        f += max(best - p[(t, i)], 0.0)
    f /= t
    return a, la, f, max(p[(t, 0)] - p[(0, 0)], 0.0)


def random_matrix(rng, t_max):
    m = PerfMatrix(metric="hits@10")
    for t in range(t_max + 1):
        for i in range(t + 1):
            m.set(t, i, float(rng.uniform()))
    return m


class TestClMetrics:
    def test_hand_case(self):
        m = PerfMatrix(metric="hits@10")
        rows = [[0.9], [0.8, 0.7], [0.75, 0.6, 0.65]]
        for t, row in enumerate(rows):
            for i, v in enumerate(row):
                m.set(t, i, v)
        out = cl_metrics(m, 2)
        assert out["A_t"] == pytest.approx(0.625, abs=1e-12)
        assert out["LA_t"] == pytest.approx(0.675, abs=1e-12)
        assert out["F_t"] == pytest.approx(0.125, abs=1e-12)

    def test_t_zero_absent_markers(self):
        m = PerfMatrix(metric="hits@10")
        m.set(0, 0, 0.9)
        out = cl_metrics(m, 0)
        assert out["A_t"] is None and out["LA_t"] is None and out["F_t"] is None
        assert out["forgetting_d0"] == 0.0

    def test_constant_performance_has_zero_forgetting(self):
        m = PerfMatrix(metric="hits@10")
        for t in range(4):
            for i in range(t + 1):
                m.set(t, i, 0.6 if i else 0.9)
        assert cl_metrics(m, 3)["F_t"] == 0.0

    def test_single_new_corpus_learning_perf(self):
        m = PerfMatrix(metric="hits@10")
        m.set(0, 0, 0.9)
        m.set(1, 0, 0.85)
        m.set(1, 1, 0.7)
        assert cl_metrics(m, 1)["LA_t"] == pytest.approx(0.7)

    @given(st.integers(1, 6), st.integers(0, 100_000))
    @settings(max_examples=150, deadline=None)
    def test_matches_loop_oracle(self, t_max, seed):
        rng = np.random.default_rng(seed)
        m = random_matrix(rng, t_max)
        for t in range(1, t_max + 1):
            out = cl_metrics(m, t)
            a, la, f, f0 = loop_oracle(m.values, t)
            assert out["A_t"] == pytest.approx(a, abs=1e-12)
            assert out["LA_t"] == pytest.approx(la, abs=1e-12)
            assert out["F_t"] == pytest.approx(f, abs=1e-12)
            assert out["forgetting_d0"] == pytest.approx(f0, abs=1e-12)
            assert out["F_t"] >= 0.0

    def test_missing_entry_raises(self):
        m = PerfMatrix(metric="hits@10")
        m.set(0, 0, 0.5)
        with pytest.raises(ContractError):
            cl_metrics(m, 1)

    def test_upper_triangle_rejected(self):
        m = PerfMatrix(metric="hits@10")
        with pytest.raises(ContractError):
            m.set(0, 1, 0.5)


class TestAccounting:
    def test_pool_bytes_reference_configuration(self):
        out = memory_accounting(768, 5, 20, 4)
        assert out["pool_bytes"] == 322_560
        assert out["pool_kib"] == pytest.approx(315.0, abs=1.0)

    def test_cache_bytes_reference_configuration(self):
        out = memory_accounting(768, 5, 20, 4, cache_doc_count=108_617)
        assert out["cache_bytes"] == 333_671_424
        assert out["cache_mib"] == pytest.approx(318.0, abs=1.0)

    def test_empty_pool(self):
        assert memory_accounting(768, 0, 20, 4)["pool_bytes"] == 0

    def test_single_increment_columns_only(self):
        from promptdsi.metrics import params_accounting
        from promptdsi.retrieval import DocidRegistry
        reg = DocidRegistry()
        reg.add_corpus([f"a{i}" for i in range(50)])
        reg.add_corpus([f"b{i}" for i in range(20)])
        assert params_accounting(reg, 64) == 20 * 64


class TestPerfCsv:
    def test_round_trip(self, tmp_path):
        m = PerfMatrix(metric="hits@10")
        m.set(0, 0, 0.875)
        m.set(1, 0, 0.5)
        m.set(1, 1, 1.0 / 3.0)
        path = tmp_path / "perf.csv"
        write_perf_csv(path, {"hits@10": m})
        loaded = read_perf_csv(path)["hits@10"]
        assert loaded.values == m.values

    def test_deterministic_bytes(self, tmp_path):
        m = PerfMatrix(metric="mrr@10")
        m.set(0, 0, 0.123456789123)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_perf_csv(p1, {"mrr@10": m})
        write_perf_csv(p2, {"mrr@10": m})
        assert p1.read_bytes() == p2.read_bytes()
