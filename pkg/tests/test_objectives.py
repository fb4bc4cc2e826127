import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relpos import tensor as T
from relpos.corpus import MASK, ConfigurationError
from relpos.model import ModelConfig, TransformerModel
from relpos.objectives import (
    CorruptionPlan,
    EmptyPairSet,
    ReadoutHead,
    make_readout,
    mlm_loss,
    mlm_objective,
    num_relpos_classes,
    objective,
    rel_pos_labels,
    relpos_logits,
    sample_corruption,
    sample_token_mask,
    select_pairs,
    selected_count,
    variant_loss,
)
from relpos.tensor import Tensor


def enumerate_pairs(k, selected, variant):
    """Brute-force pair rule, written independently of select_pairs."""
    s = set(selected)
    out = []
    for i, j in itertools.product(range(k), repeat=2):
        if variant in ("pplm", "pplm-binary"):
            keep = True
        elif variant == "pplm-some":
            keep = i in s and j in s
        else:
            keep = i in s or j in s
        if keep:
            out.append((i, j))
    return out


class TestSampleCorruption:
    def test_rate_zero_is_identity(self):
        plan = sample_corruption(10, 0.0, "permute", seed=0)
        assert len(plan.selected) == 0
        np.testing.assert_array_equal(plan.pi, np.arange(10))

    def test_count_is_floor(self):
        assert len(sample_corruption(128, 0.6, "permute", seed=0).selected) == 76
        assert len(sample_corruption(128, 0.6, "mask", seed=0).selected) == 76
        assert selected_count(100, 0.29) == 29

    def test_deterministic(self):
        a, b = sample_corruption(20, 0.5, "permute", 9), sample_corruption(20, 0.5, "permute", 9)
        np.testing.assert_array_equal(a.pi, b.pi)
        np.testing.assert_array_equal(a.selected, b.selected)

    def test_mask_mode_keeps_identity_pi(self):
        plan = sample_corruption(12, 0.5, "mask", 3)
        np.testing.assert_array_equal(plan.pi, np.arange(12))
        idx = plan.position_index(32)
        assert (idx[plan.selected] == 32).all()

    def test_bad_rate(self):
        with pytest.raises(ConfigurationError):
            sample_corruption(8, 1.5, "permute", 0)

    def test_fixed_point_fraction_matches_uniform_permutation(self):
        k, n = 8, 100_000
        fixed = 0
        for s in range(n):
            pi = sample_corruption(k, 1.0, "permute", s).pi
            fixed += int((pi == np.arange(k)).sum())
        frac = fixed / (k * n)
        # a uniform permutation has one fixed point on average with variance one
        sigma = 1.0 / (k * math.sqrt(n))
        assert abs(frac - 1 / k) < 3 * sigma


class TestRelPosLabels:
    def test_small_offsets(self):
        lab = rel_pos_labels(3, 3)
        np.testing.assert_array_equal(lab.offsets, [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]])

    def test_class_indexing(self):
        lab = rel_pos_labels(128, 128)
        assert lab.n_p == 255
        assert lab.class_index[127, 0] == 0  # offset -127
        assert lab.class_index[5, 5] == 127
        assert lab.class_index.max() == 254

    def test_binary_rule_on_swap(self):
        plan = CorruptionPlan("permute", 2 / 3, 3, np.array([0, 1]), np.array([1, 0, 2]))
        bc = rel_pos_labels(3, 3, plan).binary_correct
        expected = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        np.testing.assert_array_equal(bc, expected)

    def test_k_exceeds_L(self):
        with pytest.raises(ConfigurationError):
            rel_pos_labels(5, 4)

    def test_none_mode_all_correct(self):
        assert rel_pos_labels(6, 8, CorruptionPlan.identity(6)).binary_correct.all()


@settings(max_examples=300, deadline=None)
@given(
    k=st.integers(2, 16),
    rate=st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.6, 0.75, 1.0]),
    seed=st.integers(0, 2**32 - 1),
)
def test_corruption_and_label_invariants(k, rate, seed):
    plan = sample_corruption(k, rate, "permute", seed)
    s = plan.selected
    # bijection on S, identity elsewhere
    assert sorted(plan.pi[s].tolist()) == sorted(s.tolist())
    rest = np.setdiff1d(np.arange(k), s)
    np.testing.assert_array_equal(plan.pi[rest], rest)
    lab = rel_pos_labels(k, 16, plan)
    np.testing.assert_array_equal(lab.offsets, -lab.offsets.T)
    assert (np.diag(lab.offsets) == 0).all()
    assert lab.class_index.min() >= 0 and lab.class_index.max() <= lab.n_p - 1
    assert (np.diag(lab.binary_correct) == 1).all()


@pytest.mark.parametrize("k", [1, 2, 5, 9, 16])
@pytest.mark.parametrize("rate", [0.0, 0.25, 0.5, 1.0])
@pytest.mark.parametrize("variant", ["pmlm", "pplm", "pplm-some", "pplm-binary"])
def test_pairs_match_enumeration(k, rate, variant):
    mode = "mask" if variant == "pmlm" else "permute"
    plan = sample_corruption(k, rate, mode, seed=k)
    expected = enumerate_pairs(k, plan.selected.tolist(), variant)
    if not expected:
        with pytest.raises(EmptyPairSet):
            select_pairs(plan, variant)
        return
    assert list(map(tuple, select_pairs(plan, variant))) == expected


def test_pair_counts_at_paper_length():
    assert len(select_pairs(sample_corruption(128, 0.6, "permute", 0), "pplm")) == 16384
    assert len(select_pairs(sample_corruption(128, 0.6, "permute", 0), "pplm-some")) == 76**2
    plan = CorruptionPlan("mask", 0.25, 4, np.array([1]), np.arange(4))
    assert len(select_pairs(plan, "pmlm")) == 7


def test_pplm_pairs_contain_some_pairs():
    plan = sample_corruption(12, 0.5, "permute", 1)
    full = set(map(tuple, select_pairs(plan, "pplm")))
    some = set(map(tuple, select_pairs(plan, "pplm-some")))
    assert some < full


def test_variant_plan_mismatch():
    with pytest.raises(ValueError):
        select_pairs(sample_corruption(8, 0.5, "mask", 0), "pplm")
    with pytest.raises(ValueError):
        select_pairs(sample_corruption(8, 0.5, "permute", 0), "pmlm")


class TestReadout:
    def test_zero_scores_zero_bias_uniform(self):
        ro = ReadoutHead(4, num_relpos_classes(8))
        scores = Tensor(np.zeros((1, 3, 3, 4)))
        pairs = [np.argwhere(np.ones((3, 3), dtype=bool))]
        p = T.softmax(relpos_logits(scores, ro, pairs)).data
        np.testing.assert_allclose(p, 1 / 15, rtol=1e-6)

    def test_rows_normalised(self):
        ro = ReadoutHead(3, 9, init_std=1.0, seed=2)
        scores = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 3)))
        pairs = [np.array([[0, 1], [3, 2]]), np.array([[1, 1]])]
        p = T.softmax(relpos_logits(scores, ro, pairs)).data
        assert p.shape == (3, 9)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)

    def test_hand_checked_affine(self, f64):
        ro = ReadoutHead(2, 3)
        w = np.array([[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]])
        b = np.array([0.1, 0.2, 0.3])
        ro.params["psi.w"].data[:] = w
        ro.params["psi.b"].data[:] = b
        scores = np.zeros((1, 2, 2, 2))
        scores[0, 0, 1] = [0.5, -1.0]
        out = relpos_logits(Tensor(scores), ro, [np.array([[0, 1]])]).data[0]
        expected = [0.5 * 1.0 + -1.0 * 2.0 + 0.1, 0.5 * 0.0 + -1.0 * 1.0 + 0.2, 0.5 * -1.0 + -1.0 * 0.5 + 0.3]
        np.testing.assert_allclose(out, expected)

    def test_pair_rows_follow_batch_layout(self, f64):
        ro = ReadoutHead(2, 3, init_std=1.0)
        scores = np.random.default_rng(3).normal(size=(2, 3, 3, 2))
        pairs = [np.array([[2, 0]]), np.array([[0, 2], [1, 1]])]
        out = relpos_logits(Tensor(scores), ro, pairs).data
        w, b = ro.params["psi.w"].data, ro.params["psi.b"].data
        np.testing.assert_allclose(out[0], scores[0, 2, 0] @ w + b)
        np.testing.assert_allclose(out[2], scores[1, 1, 1] @ w + b)

    def test_mlp_variant_and_binary_head(self):
        assert make_readout("pplm-binary", 4, 8).num_classes == 2
        mlp = make_readout("pplm", 4, 8, kind="mlp")
        assert mlp(Tensor(np.zeros((5, 4)))).shape == (5, 15)


class TestVariantLoss:
    def test_near_one_hot(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = logits[1, 3] = 50.0
        assert variant_loss(Tensor(logits), np.array([1, 3])).item() < 1e-3

    def test_uniform(self, f64):
        assert variant_loss(Tensor(np.zeros((4, 255))), np.zeros(4, dtype=int)).item() == pytest.approx(math.log(255))
        assert math.log(255) == pytest.approx(5.541, abs=1e-3)

    def test_mean_of_independent_cross_entropies(self, f64):
        logits = np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 3.0], [2.0, 1.0, 1.0]])
        targets = np.array([2, 2, 1])
        per_pair = [math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(logits, targets)]
        assert variant_loss(Tensor(logits), targets).item() == pytest.approx(sum(per_pair) / 3, rel=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyPairSet):
            variant_loss(Tensor(np.zeros((0, 3))), np.zeros(0, dtype=int))


SMALL = ModelConfig(num_layers=1, hidden_size=8, intermediate_size=16, num_heads=2, max_positions=8, vocab_size=17)


class TestMLM:
    def test_slot_count(self):
        assert len(sample_token_mask(128, 0.3, 0).token_mask_targets) == 38

    def test_masks_tokens_not_positions(self, monkeypatch):
        m = TransformerModel(SMALL, seed=0)
        seen = {}
        orig = m.embed

        def spy(ids, plans=None):
            seen["ids"], seen["plans"] = ids.copy(), plans
            return orig(ids, plans)

        monkeypatch.setattr(m, "embed", spy)
        ids = np.full((2, 8), 5)
        out = mlm_objective(m, ids, 0.5, seed=0, mode="eval")
        assert seen["plans"] is None
        assert (seen["ids"] == MASK).sum() == 8
        assert out.count == 8 and (out.targets == 5).all()

    def test_uniform_output_gives_log_vocab(self, f64):
        m = TransformerModel(SMALL, seed=0)
        m["target_emb"].data[:] = 0
        ids = np.random.default_rng(0).integers(3, 17, size=(2, 8))
        assert mlm_loss(ids, m, 0.5, seed=0).item() == pytest.approx(math.log(17))

    def test_rate_zero_rejected(self):
        with pytest.raises(ConfigurationError):
            mlm_loss(np.full((1, 8), 4), TransformerModel(SMALL), 0.0, seed=0)


def test_rate_zero_binary_targets_all_correct():
    m = TransformerModel(SMALL, seed=0)
    ro = make_readout("pplm-binary", 2, 8)
    ids = np.random.default_rng(0).integers(3, 17, size=(3, 8))
    out = objective("pplm-binary", m, ro, ids, 0.0, seed=0, mode="eval")
    assert (out.targets == 1).all() and out.count == 3 * 64
    # a constant "correct" predictor reaches the zero-entropy minimum
    ro.params["binary_psi.w"].data[:] = 0
    ro.params["binary_psi.b"].data[:] = [-30.0, 30.0]
    assert objective("pplm-binary", m, ro, ids, 0.0, seed=0, mode="eval").loss.item() < 1e-6


def test_empty_pair_set_is_signalled():
    m = TransformerModel(SMALL, seed=0)
    ro = make_readout("pplm-some", 2, 8)
    with pytest.raises(EmptyPairSet):
        objective("pplm-some", m, ro, np.full((2, 8), 4), 0.1, seed=0)


@pytest.mark.parametrize("variant", ["pmlm", "pplm", "pplm-some", "pplm-binary", "mlm"])
def test_objective_counts_match_select_pairs(variant):
    m = TransformerModel(SMALL, seed=0)
    ro = make_readout(variant, 2, 8) if variant != "mlm" else None
    ids = np.random.default_rng(0).integers(3, 17, size=(3, 8))
    rate = 0.5
    out = objective(variant, m, ro, ids, rate, seed=(1, 2), mode="eval")
    if variant == "mlm":
        assert out.count == 3 * 4
    else:
        mode = "mask" if variant == "pmlm" else "permute"
        expected = sum(len(select_pairs(sample_corruption(8, rate, mode, (1, 2, r)), variant)) for r in range(3))
        assert out.count == expected
    assert np.isfinite(out.loss.item())
