import math

import numpy as np
import pytest
from scipy import integrate, stats

from netrecon.analysis import (ClassificationReport, balanced_accuracy,
                               classification_metrics, contribution_delta,
                               contribution_profile, group_norm_stats,
                               norm_trajectories, pearson_r, rank_heads, welch_t)
from netrecon.data import NetworkAtlas, ParcelTimeSeries, SegmentSpec, \
    make_mask_plan, tokenize
from netrecon.model import AttnRecord, ModelConfig, init_model


def uniform_record(plan, layers=2, heads=2):
    w = np.full((layers, heads, plan.n_masked, plan.n_unmasked),
                1.0 / plan.n_unmasked)
    return AttnRecord(w, plan)


@pytest.fixture
def grid_and_plans(tiny_atlas, tiny_spec):
    seg = np.random.default_rng(0).normal(size=(8, 16))
    grid = tokenize(seg, tiny_spec, tiny_atlas)
    plans = {net: make_mask_plan(tiny_atlas, grid, net) for net in range(3)}
    return grid, plans


class TestRankHeads:
    def test_one_hot_outranks_uniform(self, grid_and_plans):
        _, plans = grid_and_plans
        plan = plans[0]
        w = np.full((1, 2, plan.n_masked, plan.n_unmasked), 1.0 / plan.n_unmasked)
        w[0, 1] = 0.0
        w[0, 1, :, 0] = 1.0          # head (0,1) is one-hot
        ranking = rank_heads([AttnRecord(w, plan)])
        assert ranking[0][:2] == (0, 1)
        assert ranking[0][2] == pytest.approx(1.0)
        assert ranking[1][2] == pytest.approx(1.0 / plan.n_unmasked)

    def test_tie_break_by_layer_head(self, grid_and_plans):
        _, plans = grid_and_plans
        rec = uniform_record(plans[0], layers=2, heads=3)
        ranking = rank_heads([rec])
        assert [r[:2] for r in ranking] == [(0, 0), (0, 1), (0, 2),
                                            (1, 0), (1, 1), (1, 2)]

    def test_scores_in_unit_interval(self, grid_and_plans):
        _, plans = grid_and_plans
        rng = np.random.default_rng(1)
        plan = plans[1]
        raw = rng.random((2, 2, plan.n_masked, plan.n_unmasked))
        w = raw / raw.sum(axis=-1, keepdims=True)
        for _, _, score in rank_heads([AttnRecord(w, plan)]):
            assert 0.0 < score <= 1.0

    def test_permutation_equivariant(self, grid_and_plans):
        _, plans = grid_and_plans
        rng = np.random.default_rng(2)
        plan = plans[2]
        raw = rng.random((1, 4, plan.n_masked, plan.n_unmasked))
        w = raw / raw.sum(axis=-1, keepdims=True)
        perm = [2, 0, 3, 1]
        base = rank_heads([AttnRecord(w, plan)])
        permuted = rank_heads([AttnRecord(w[:, perm], plan)])
        relabel = {(0, k): (0, perm.index(k)) for k in range(4)}
        assert [relabel[r[:2]] for r in base] == [p[:2] for p in permuted]

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            rank_heads([])


class TestContributionProfile:
    def test_uniform_attention_proportional_to_token_count(self, tiny_atlas,
                                                           grid_and_plans):
        grid, plans = grid_and_plans
        records = {net: [uniform_record(plans[net])] for net in range(3)}
        profile = contribution_profile(records, tiny_atlas, top_k=4)
        # column for target 1: sources 0 and 2 have 1 column x 2 rows each
        np.testing.assert_allclose(profile.matrix[:, 1], [0.5, 0.0, 0.5])
        # column for target 0: source 1 has 2 columns, source 2 has 1
        np.testing.assert_allclose(profile.matrix[:, 0], [0.0, 2 / 3, 1 / 3])

    def test_columns_sum_to_one(self, tiny_atlas, grid_and_plans):
        grid, plans = grid_and_plans
        rng = np.random.default_rng(3)
        records = {}
        for net in range(3):
            plan = plans[net]
            raw = rng.random((2, 2, plan.n_masked, plan.n_unmasked))
            w = raw / raw.sum(axis=-1, keepdims=True)
            records[net] = [AttnRecord(w, plan), uniform_record(plan)]
        profile = contribution_profile(records, tiny_atlas, top_k=3)
        np.testing.assert_allclose(profile.matrix.sum(axis=0), 1.0, atol=1e-5)
        assert profile.matrix.min() >= 0.0
        np.testing.assert_allclose(np.diag(profile.matrix), 0.0)

    def test_top_k_bounds(self, tiny_atlas, grid_and_plans):
        _, plans = grid_and_plans
        records = {net: [uniform_record(plans[net])] for net in range(3)}
        with pytest.raises(ValueError, match="top_k"):
            contribution_profile(records, tiny_atlas, top_k=5)

    def test_missing_target_rejected(self, tiny_atlas, grid_and_plans):
        _, plans = grid_and_plans
        with pytest.raises(ValueError, match="target"):
            contribution_profile({0: [uniform_record(plans[0])]}, tiny_atlas,
                                 top_k=2)


class TestContributionDelta:
    def test_zero_on_self(self, tiny_atlas, grid_and_plans):
        _, plans = grid_and_plans
        records = {net: [uniform_record(plans[net])] for net in range(3)}
        p = contribution_profile(records, tiny_atlas, top_k=2)
        np.testing.assert_array_equal(contribution_delta(p, p), 0.0)

    def test_antisymmetric(self, tiny_atlas, grid_and_plans):
        _, plans = grid_and_plans
        rng = np.random.default_rng(4)
        profs = []
        for k in range(2):
            records = {}
            for net in range(3):
                plan = plans[net]
                raw = rng.random((2, 2, plan.n_masked, plan.n_unmasked))
                records[net] = [AttnRecord(raw / raw.sum(-1, keepdims=True), plan)]
            profs.append(contribution_profile(records, tiny_atlas, top_k=2))
        d_ab = contribution_delta(profs[0], profs[1])
        d_ba = contribution_delta(profs[1], profs[0])
        np.testing.assert_allclose(d_ab, -d_ba)


class TestWelch:
    def test_identical_samples(self):
        t, p, _ = welch_t([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert t == 0.0
        assert p == 1.0

    def test_frozen_fixture(self):
        # independent oracle values (quadrature over the t density and
        # scipy.stats cross-check) computed once and frozen here
        t, p, dof = welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
        assert t == pytest.approx(-1.0, abs=1e-12)
        assert dof == pytest.approx(8.0, abs=1e-12)
        assert p == pytest.approx(0.34659350708733416, abs=1e-10)

    def test_swap_negates_t_preserves_p(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=12), rng.normal(1.0, 2.0, size=9)
        t1, p1, d1 = welch_t(a, b)
        t2, p2, d2 = welch_t(b, a)
        assert t1 == -t2
        assert p1 == p2
        assert d1 == d2

    def test_zero_variance_equal_means(self):
        t, p, _ = welch_t([2.0, 2.0, 2.0], [2.0, 2.0])
        assert (t, p) == (0.0, 1.0)

    def test_zero_variance_unequal_means(self):
        t, p, _ = welch_t([2.0, 2.0], [3.0, 3.0])
        assert math.isinf(t)
        assert p == 0.0

    def test_small_samples_rejected(self):
        with pytest.raises(ValueError):
            welch_t([1.0], [1.0, 2.0])

    def test_hundred_random_pairs_vs_brute_force(self):
        def tpdf(x, v):
            return (math.exp(math.lgamma((v + 1) / 2) - math.lgamma(v / 2))
                    / math.sqrt(v * math.pi) * (1 + x * x / v) ** (-(v + 1) / 2))

        rng = np.random.default_rng(6)
        for _ in range(100):
            na, nb = rng.integers(2, 40, size=2)
            a = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3), size=na)
            b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3), size=nb)
            t, p, dof = welch_t(a, b)
            # brute force: hand formulas + numerical quadrature of the pdf
            va, vb = a.var(ddof=1), b.var(ddof=1)
            se2 = va / na + vb / nb
            t_ref = (a.mean() - b.mean()) / math.sqrt(se2)
            dof_ref = se2 ** 2 / ((va / na) ** 2 / (na - 1)
                                  + (vb / nb) ** 2 / (nb - 1))
            p_ref = 2 * integrate.quad(tpdf, abs(t_ref), np.inf,
                                       args=(dof_ref,))[0]
            assert abs(t - t_ref) < 1e-6
            assert abs(p - p_ref) < 1e-4
            # second, library-grade oracle
            sp = stats.ttest_ind(a, b, equal_var=False)
            assert abs(t - sp.statistic) < 1e-9
            assert abs(p - sp.pvalue) < 1e-9


class TestPearson:
    def test_exact_cases(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert pearson_r(x, 2 * x + 1) == 1.0
        assert pearson_r(x, -x) == -1.0
        assert pearson_r([1, 2, 1, 2], [1, 1, -1, -1]) == pytest.approx(0.0, abs=1e-15)

    def test_affine_invariance(self):
        rng = np.random.default_rng(7)
        x, y = rng.normal(size=30), rng.normal(size=30)
        base = pearson_r(x, y)
        assert pearson_r(x, 3.7 * y + 11) == pytest.approx(base, rel=1e-12)
        assert pearson_r(x, -2.5 * y + 3) == pytest.approx(-base, rel=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            pearson_r([1.0, 1.0], [1.0, 2.0])


class TestClassificationMetrics:
    def test_perfect_predictions(self):
        labels = np.repeat([0, 1, 2], 10)
        probs = np.eye(3)[labels]
        rep = classification_metrics(probs, labels)
        assert rep.balanced_accuracy == 1.0
        assert rep.macro_f1 == 1.0
        assert rep.macro_auc == 1.0
        assert np.trace(rep.confusion) == 30

    def test_chance_auc_on_random_scores(self):
        rng = np.random.default_rng(8)
        labels = np.repeat([0, 1, 2], 1000)
        raw = rng.random((3000, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)
        rep = classification_metrics(probs, labels)
        assert abs(rep.macro_auc - 0.5) < 0.05

    def test_hand_confusion_bacc(self):
        # recalls 0.9 / 0.6 / 0.3 -> BAcc 0.6
        labels = np.concatenate([np.zeros(10), np.ones(10), np.full(10, 2)]).astype(int)
        predicted = labels.copy()
        predicted[:10][9:] = 1          # 9/10 recall
        predicted[10:20][6:] = 2        # 6/10
        predicted[20:][3:] = 0          # 3/10
        probs = np.eye(3)[predicted]
        rep = classification_metrics(probs, labels)
        assert rep.balanced_accuracy == pytest.approx(0.6)

    def test_shuffled_labels_chance_band(self):
        rng = np.random.default_rng(9)
        labels = np.repeat([0, 1, 2], 1000)
        rng.shuffle(labels)
        raw = rng.random((3000, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)
        rep = classification_metrics(probs, labels)
        assert 0.25 <= rep.balanced_accuracy <= 0.42

    def test_absent_class_flagged(self):
        labels = np.array([0, 0, 1, 1])
        probs = np.eye(3)[labels]
        rep = classification_metrics(probs, labels)
        assert rep.flags and "absent" in rep.flags[0]

    def test_auc_matches_scipy_rank_formula(self):
        rng = np.random.default_rng(10)
        scores = rng.normal(size=200)
        positive = rng.random(200) < 0.4
        from netrecon.analysis import _roc_auc
        auc = _roc_auc(scores, positive)
        # Mann-Whitney U / (n1*n0) with tie correction, an independent route
        ranks = stats.rankdata(scores)
        n1 = positive.sum()
        n0 = (~positive).sum()
        u = ranks[positive].sum() - n1 * (n1 + 1) / 2
        assert auc == pytest.approx(u / (n1 * n0), abs=1e-12)


class TestGroupStatsAndNorms:
    def test_group_stats_pairs(self):
        rows = [("a", 0, None, "CN", 1.0), ("b", 0, None, "CN", 1.2),
                ("c", 0, None, "AD", 2.0), ("d", 0, None, "AD", 2.4),
                ("e", 0, None, "MCI", 1.5), ("f", 0, None, "MCI", 1.6)]
        stats_out = group_norm_stats(rows)
        assert set(stats_out.groups) == {"CN", "MCI", "AD"}
        assert set(stats_out.pairwise) == {("AD", "CN"), ("AD", "MCI"),
                                           ("CN", "MCI")}

    def test_norm_trajectories_table(self, tiny_atlas, tiny_spec):
        rng = np.random.default_rng(11)
        recs = [
            ParcelTimeSeries("s2", 1, "AD", 80.0, rng.normal(size=(16, 16))),
            ParcelTimeSeries("s1", 0, "CN", 70.0, rng.normal(size=(16, 16))),
            ParcelTimeSeries("s1", 1, "CN", 70.5, rng.normal(size=(16, 16))),
        ]
        cfg = ModelConfig(d_emb=16, enc_layers=1, dec_layers=1, heads=2,
                          d_mlp=16, token_dim=16, max_tokens=8, dtype="float64")
        state = init_model(cfg, seed=0)
        rows = norm_trajectories(state, recs, tiny_atlas, tiny_spec, seed=1)
        assert len(rows) == 3
        assert [r[0] for r in rows] == ["s1", "s1", "s2"]  # sorted
        # duplicate recording gives identical norm
        rows2 = norm_trajectories(state, [recs[0], recs[0]], tiny_atlas,
                                  tiny_spec, seed=1)
        assert rows2[0][4] == rows2[1][4]
