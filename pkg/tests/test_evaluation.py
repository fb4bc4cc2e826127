import math

import numpy as np
import pytest

from relpos.corpus import ConfigurationError
from relpos.evaluation import (
    accuracy,
    body_flops_per_sequence,
    cost_report,
    flop_estimate,
    label_density,
    majority_baseline,
    make_probe,
    mlm_accuracy,
    mlm_crossover_vocab_size,
    probe_finetune,
    relpos_accuracy,
)
from relpos.model import ModelConfig, TransformerModel
from relpos.objectives import (
    CORRUPTION_MODE,
    VARIANTS,
    EmptyPairSet,
    make_readout,
    num_relpos_classes,
    pair_targets,
    rel_pos_labels,
    sample_corruption,
    sample_token_mask,
    select_pairs,
)

SMALL = ModelConfig(num_layers=1, hidden_size=16, intermediate_size=32, num_heads=2, max_positions=8, vocab_size=40)


def enumerated_count(k, variant, rate, seed=0):
    if variant == "mlm":
        return len(sample_token_mask(k, rate, seed).token_mask_targets)
    plan = sample_corruption(k, rate, CORRUPTION_MODE[variant], seed)
    sel = set(plan.selected.tolist())
    if variant == "pmlm":
        keep = [(i, j) for i in range(k) for j in range(k) if i in sel or j in sel]
    elif variant == "pplm-some":
        keep = [(i, j) for i in range(k) for j in range(k) if i in sel and j in sel]
    else:
        keep = [(i, j) for i in range(k) for j in range(k)]
    try:
        assert len(select_pairs(plan, variant)) == len(keep)
    except EmptyPairSet:
        assert keep == []
    return len(keep)


class TestLabelDensity:
    def test_paper_length(self):
        assert label_density(128, "mlm", 0.3) == 38
        assert label_density(128, "pplm", 0.6) == 16384
        assert label_density(128, "pplm-some", 0.6) == 76**2 == 5776
        assert label_density(128, "pmlm", 0.6) == 2 * 128 * 76 - 76**2 == 13680
        assert 16384 / 38 == pytest.approx(431, abs=1)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_matches_enumeration(self, variant):
        for k in range(2, 17):
            for rate in (0.0, 0.25, 0.5, 1.0):
                assert label_density(k, variant, rate) == enumerated_count(k, variant, rate, seed=k), (k, rate)

    def test_rate_zero(self):
        assert [label_density(128, v, 0.0) for v in ("mlm", "pmlm", "pplm-some")] == [0, 0, 0]
        assert label_density(128, "pplm", 0.0) == 16384

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            label_density(8, "clm", 0.5)


class TestFlops:
    def test_paper_preset_ordering(self):
        cfg = ModelConfig.paper()
        mlm = flop_estimate(cfg, "mlm", 0.3)
        pplm = flop_estimate(cfg, "pplm", 0.6)
        pmlm = flop_estimate(cfg, "pmlm", 0.6)
        assert mlm.head_flops_per_sequence == 2 * 38 * 256 * 50265
        assert pplm.head_flops_per_sequence == 2 * 16384 * 16 * 255
        assert mlm.head_flops_per_sequence == pytest.approx(9.78e8, rel=1e-3)
        assert pplm.head_flops_per_sequence == pytest.approx(1.34e8, rel=1e-2)
        assert mlm.head_flops_per_sequence > pplm.head_flops_per_sequence
        assert mlm.head_flops_per_sequence > pmlm.head_flops_per_sequence
        assert mlm.head_flops_per_sequence / pplm.head_flops_per_sequence > 7

    def test_body_identical_across_variants(self):
        cfg = ModelConfig.paper()
        bodies = {flop_estimate(cfg, v, 0.5, batch_size=4).body_flops_per_batch for v in VARIANTS}
        assert bodies == {4 * body_flops_per_sequence(cfg, 128)}

    def test_mlp_readout_adds_hidden_term(self):
        cfg = ModelConfig.paper()
        lin = flop_estimate(cfg, "pplm", 0.6).head_flops_per_sequence
        mlp = flop_estimate(cfg, "pplm", 0.6, readout="mlp").head_flops_per_sequence
        assert mlp == 16384 * 2 * (16 * 64 + 64 * 255) and mlp != lin

    def test_zero_rate_mlm_has_no_head_cost(self):
        assert flop_estimate(ModelConfig.paper(), "mlm", 0.0).head_flops_per_sequence == 0

    def test_crossover_solves_equality(self):
        cfg = ModelConfig.paper()
        v_star = mlm_crossover_vocab_size(cfg, 128, 0.3)
        # same inequality solved by hand: 2*38*h*V = 2*k*k*n_h*n_p
        assert v_star == pytest.approx(128 * 128 * 16 * 255 / (38 * 256))
        small = ModelConfig(**{**cfg.to_dict(), "vocab_size": int(v_star) - 1})
        assert flop_estimate(small, "mlm", 0.3).head_flops_per_sequence < flop_estimate(small, "pplm", 0.6).head_flops_per_sequence

    def test_report_is_deterministic(self):
        assert cost_report(ModelConfig.paper(), 128) == cost_report(ModelConfig.paper(), 128)


def _oracle(L):
    def predict(ids, plans, pairs):
        k = np.asarray(ids).shape[1]
        rows = []
        for plan, p in zip(plans, pairs):
            t = pair_targets(rel_pos_labels(k, L, plan), p, "pplm")
            one_hot = np.full((len(t), num_relpos_classes(L)), -1.0)
            one_hot[np.arange(len(t)), t] = 1.0
            rows.append(one_hot)
        return np.concatenate(rows)
    return predict


class TestRelposAccuracy:
    batches = [np.random.default_rng(i).integers(3, 40, size=(4, 8)) for i in range(3)]

    def test_oracle_is_exact(self):
        model = TransformerModel(SMALL, seed=0)
        assert relpos_accuracy(model, None, self.batches, "pplm", 0.5, predict=_oracle(8)) == 1.0

    def test_uniform_random_predictor(self):
        L, k, n_p = 32, 32, 63
        rng = np.random.default_rng(0)
        batches = [np.zeros((8, k), dtype=np.int64) + 3 for _ in range(4)]
        model = TransformerModel(ModelConfig(num_layers=1, hidden_size=8, intermediate_size=8, num_heads=2,
                                             max_positions=L, vocab_size=10), seed=0)
        acc = relpos_accuracy(model, None, batches, "pplm", 0.6,
                              predict=lambda ids, plans, pairs: rng.random((sum(len(p) for p in pairs), n_p)))
        n = 4 * 8 * k * k
        sigma = math.sqrt((1 / n_p) * (1 - 1 / n_p) / n)
        assert abs(acc - 1 / n_p) < 4 * sigma

    @pytest.mark.parametrize("variant", ["pmlm", "pplm", "pplm-some", "pplm-binary"])
    def test_model_path_in_unit_interval(self, variant):
        model = TransformerModel(SMALL, seed=0)
        ro = make_readout(variant, 2, 8, seed=1)
        acc = relpos_accuracy(model, ro, self.batches, variant, 0.5)
        assert 0.0 <= acc <= 1.0

    def test_rejects_mlm(self):
        with pytest.raises(ValueError):
            relpos_accuracy(None, None, self.batches, "mlm", 0.3)

    def test_mlm_accuracy_range(self):
        model = TransformerModel(SMALL, seed=0)
        assert 0.0 <= mlm_accuracy(model, self.batches, 0.5) <= 1.0

    def test_accuracy_helper(self):
        assert accuracy(np.array([[0, 1], [1, 0]]), np.array([1, 1])) == 0.5


class TestProbe:
    def test_balanced_and_disjoint_seeds(self):
        p = make_probe("order", num_classes=3, seq_len=16, vocab_size=50, n_train=300, n_test=300, seed=0)
        for labels in (p.train_labels, p.test_labels):
            frac = np.bincount(labels, minlength=3) / len(labels)
            assert np.all(np.abs(frac - 1 / 3) <= 0.01)
        assert not np.array_equal(p.train_ids[:10], p.test_ids[:10])

    def test_order_label_is_first_marker(self):
        p = make_probe("order", num_classes=3, seq_len=16, vocab_size=50, n_train=60, n_test=30, seed=2)
        markers = np.array([3, 4, 5])
        for ids, y in zip(p.train_ids, p.train_labels):
            first = next(t for t in ids if t in markers)
            assert first == markers[y]
            assert sorted(t for t in ids if t in markers) == [3, 4, 5]

    def test_bag_of_tokens_carries_no_label(self):
        # every sequence holds each marker exactly once, so counts alone cannot classify
        p = make_probe("order", num_classes=3, seq_len=16, vocab_size=50, n_train=90, n_test=3, seed=1)
        counts = np.stack([(p.train_ids == m).sum(1) for m in (3, 4, 5)], 1)
        assert np.all(counts == 1)

    def test_majority_baseline_is_a_third(self):
        p = make_probe("order", num_classes=3, seq_len=16, vocab_size=50, n_train=300, n_test=300, seed=0)
        assert majority_baseline(p) == pytest.approx(1 / 3, abs=0.01)

    def test_separable_probe_learned(self):
        cfg = ModelConfig(num_layers=1, hidden_size=32, intermediate_size=64, num_heads=4, max_positions=16, vocab_size=60)
        p = make_probe("first-token", num_classes=3, seq_len=16, vocab_size=60, n_train=600, n_test=300, seed=0)
        assert probe_finetune(TransformerModel(cfg, seed=0), p, epochs=3, seed=0) > 0.95

    def test_head_size_mismatch(self):
        p = make_probe("order", num_classes=3, seq_len=8, vocab_size=40, n_train=30, n_test=30)
        with pytest.raises(ConfigurationError):
            probe_finetune(TransformerModel(SMALL, seed=0), p, epochs=1, num_classes=2)

    def test_finetune_leaves_source_untouched(self):
        model = TransformerModel(SMALL, seed=0)
        before = {n: p.data.copy() for n, p in model.params.items()}
        probe_finetune(model, make_probe("order", 3, 8, 40, 30, 30), epochs=1)
        assert all(np.array_equal(before[n], p.data) for n, p in model.params.items())

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            make_probe("parity")
        with pytest.raises(ConfigurationError):
            make_probe("order", num_classes=8, seq_len=8)
