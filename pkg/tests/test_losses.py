import math

import numpy as np
import pytest

from damex.autodiff import Tensor, finite_diff_check
from damex.errors import DegenerateBatchError, ParameterError
from damex.gating import RouterParams, gate
from damex.losses import (
    LossBundle,
    LossConfig,
    damex_loss,
    importance_loss,
    load_balancing_loss,
    load_loss,
    task_cross_entropy,
    total_loss,
)
from damex.mapping import MappingTable

# Var(L)/Mean(L)^2 for L = [2*Phi(0.9), 2*Phi(0.1)] at sigma = 0.5, computed
# with a 60-digit erf series oracle (see test_autodiff.erf_series).
LOAD_LOSS_ORACLE = 0.06216921462228306


class TestImportanceLoss:
    def test_balanced_probs_give_zero(self):
        loss = importance_loss(Tensor([[0.5, 0.5], [0.5, 0.5]]))
        assert loss.data[0, 0] == 0.0

    def test_hand_evaluated_one_hot_batch(self):
        # I = [2, 0]: mean 1, population variance 1 -> loss 1
        loss = importance_loss(Tensor([[1.0, 0.0], [1.0, 0.0]]))
        assert loss.data[0, 0] == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("num_experts,num_tokens", [(2, 1), (3, 5), (8, 17)])
    def test_uniform_probs_give_zero(self, num_experts, num_tokens):
        probs = np.full((num_tokens, num_experts), 1.0 / num_experts)
        assert importance_loss(Tensor(probs)).data[0, 0] == pytest.approx(0.0, abs=1e-24)

    def test_all_masked_out_raises(self):
        with pytest.raises(DegenerateBatchError):
            importance_loss(Tensor([[0.5, 0.5]]), mask=[False])


class TestLoadLoss:
    def test_uniform_probs_give_zero(self):
        probs = np.full((6, 4), 0.25)
        assert load_loss(Tensor(probs), gate_noise=1.0).data[0, 0] == pytest.approx(0.0, abs=1e-24)

    def test_matches_high_precision_oracle(self):
        probs = Tensor([[0.9, 0.1], [0.9, 0.1]])
        loss = load_loss(probs, gate_noise=1.0)
        assert loss.data[0, 0] == pytest.approx(LOAD_LOSS_ORACLE, abs=1e-12)

    def test_single_expert_gives_zero(self):
        assert load_loss(Tensor([[1.0], [1.0]]), gate_noise=1.0).data[0, 0] == 0.0

    def test_rejects_nonpositive_gate_noise(self):
        with pytest.raises(ParameterError):
            load_loss(Tensor([[0.5, 0.5]]), gate_noise=0.0)


class TestLoadBalancingLoss:
    @pytest.mark.parametrize("imp,load,expected", [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5)])
    def test_trivial_pairs(self, imp, load, expected):
        assert load_balancing_loss(imp, load).data[0, 0] == expected

    def test_random_pair_matches_mean(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(0, 5, size=2)
        assert load_balancing_loss(a, b).data[0, 0] == pytest.approx((a + b) / 2, rel=1e-15)


class TestDamexLoss:
    def test_one_hot_at_mapped_expert_is_zero(self):
        table = MappingTable({0: (1,)}, num_experts=3)
        loss = damex_loss(Tensor([[0.0, 1.0, 0.0]]), [0], table)
        assert loss.data[0, 0] == 0.0

    def test_uniform_probs_singleton_mapping_is_log_e(self):
        table = MappingTable({0: (2,)}, num_experts=4)
        loss = damex_loss(Tensor([[0.25] * 4]), [0], table)
        assert loss.data[0, 0] == pytest.approx(math.log(4.0), rel=1e-12)

    def test_two_expert_mapping_matched_pair_is_log_two(self):
        table = MappingTable({0: (0, 1)}, num_experts=4)
        loss = damex_loss(Tensor([[0.5, 0.5, 0.0, 0.0]]), [0], table)
        assert loss.data[0, 0] == pytest.approx(math.log(2.0), rel=1e-12)

    def test_bounded_below_by_target_entropy(self):
        rng = np.random.default_rng(1)
        table = MappingTable({0: (0, 2)}, num_experts=4)
        entropy = math.log(2.0)
        for _ in range(100):
            logits = rng.normal(scale=2.0, size=(1, 4))
            probs = Tensor(logits).softmax_rows()
            loss = damex_loss(probs, [0], table).data[0, 0]
            assert loss >= entropy - 1e-12

    def test_unmapped_dataset_raises(self):
        from damex.errors import MappingError

        table = MappingTable({0: (0,)}, num_experts=2)
        with pytest.raises(MappingError):
            damex_loss(Tensor([[0.5, 0.5]]), [3], table)


class TestTotalLoss:
    def test_zero_weight_reduces_to_task(self):
        cfg = LossConfig(aux_weight=0.0, aux_mode="both")
        total, bundle = total_loss(1.5, 0.3, 0.2, 0.7, cfg)
        assert total.data[0, 0] == 1.5
        assert bundle.total == 1.5

    @pytest.mark.parametrize(
        "mode,aux", [("load_balancing", 2.0), ("damex", 2.0), ("both", 2.0)]
    )
    def test_weighted_sum(self, mode, aux):
        cfg = LossConfig(aux_weight=0.1, aux_mode=mode)
        if mode == "load_balancing":
            total, _ = total_loss(1.0, 3.0, 1.0, 99.0, cfg)  # lb = 2
        elif mode == "damex":
            total, _ = total_loss(1.0, 99.0, 99.0, 2.0, cfg)
        else:
            total, _ = total_loss(1.0, 1.5, 0.5, 1.0, cfg)  # lb + damex = 2
        assert total.data[0, 0] == pytest.approx(1.2, rel=1e-15)

    def test_bundle_reports_all_parts(self):
        cfg = LossConfig(aux_weight=0.5, aux_mode="load_balancing")
        _, bundle = total_loss(1.0, 0.4, 0.6, 0.9, cfg)
        assert bundle == LossBundle(
            task=1.0, importance=0.4, load=0.6, load_balancing=0.5, damex=0.9, total=1.25
        )

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            LossConfig(aux_weight=-0.1)
        with pytest.raises(ParameterError):
            LossConfig(aux_mode="bogus")
        with pytest.raises(ParameterError):
            LossConfig(aux_mode="load_balancing", gate_noise=0.0)


class TestScaleFreeness:
    def test_batch_duplication_leaves_balance_losses_unchanged(self):
        rng = np.random.default_rng(2)
        probs = Tensor(rng.normal(size=(9, 4))).softmax_rows()
        doubled = Tensor(np.vstack([probs.data, probs.data]))
        for fn in (importance_loss, lambda p, mask=None: load_loss(p, 1.0, mask)):
            base = fn(Tensor(probs.data)).data[0, 0]
            dup = fn(doubled).data[0, 0]
            assert abs(base - dup) < 1e-12

    def test_balance_losses_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            probs = Tensor(rng.normal(size=(6, 3))).softmax_rows()
            imp = importance_loss(probs).data[0, 0]
            load = load_loss(probs, 1.0).data[0, 0]
            assert imp >= 0 and load >= 0
            sums = probs.data.sum(axis=0)
            if np.ptp(sums) > 1e-9:
                assert imp > 0


class TestForegroundMasking:
    def test_background_tokens_never_change_auxiliary_losses(self):
        rng = np.random.default_rng(4)
        fg = Tensor(rng.normal(size=(7, 3))).softmax_rows().data
        bg = Tensor(rng.normal(size=(4, 3))).softmax_rows().data
        combined = np.vstack([fg, bg])
        mask = np.array([True] * 7 + [False] * 4)
        table = MappingTable({0: (0,), 1: (2,)}, num_experts=3)
        ids_fg = np.array([0, 1] * 4)[:7]
        ids_all = np.concatenate([ids_fg, np.full(4, 0)])

        assert (
            importance_loss(Tensor(combined), mask).data[0, 0]
            == importance_loss(Tensor(fg)).data[0, 0]
        )
        assert (
            load_loss(Tensor(combined), 1.0, mask).data[0, 0]
            == load_loss(Tensor(fg), 1.0).data[0, 0]
        )
        assert (
            damex_loss(Tensor(combined), ids_all, table, mask).data[0, 0]
            == damex_loss(Tensor(fg), ids_fg, table).data[0, 0]
        )


class TestGradients:
    """Every loss, as a function of router weights, passes the FD check."""

    def _setup(self, seed):
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(size=(4, 5)))
        x = Tensor(rng.normal(size=(6, 5)))
        mask = np.array([True, True, False, True, True, True])
        return w, x, mask

    def _probs(self, w, x):
        return gate(x, RouterParams(weights=w)).probs

    @pytest.mark.parametrize("seed", range(5))
    def test_importance(self, seed):
        w, x, mask = self._setup(seed)
        f = lambda: importance_loss(self._probs(w, x), mask)
        assert finite_diff_check(f, w, eps=1e-5) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_load(self, seed):
        w, x, mask = self._setup(seed)
        f = lambda: load_loss(self._probs(w, x), 1.0, mask)
        assert finite_diff_check(f, w, eps=1e-5) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_damex(self, seed):
        w, x, mask = self._setup(seed)
        table = MappingTable({0: (0,), 1: (1, 3)}, num_experts=4)
        ids = np.array([0, 1, 0, 1, 0, 1])
        f = lambda: damex_loss(self._probs(w, x), ids, table, mask)
        assert finite_diff_check(f, w, eps=1e-5) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_task_cross_entropy(self, seed):
        w, x, mask = self._setup(seed)
        labels = np.array([0, 3, 1, 2, 0, 1])
        f = lambda: task_cross_entropy(x @ w.transpose(), labels, mask)
        assert finite_diff_check(f, [w, x], eps=1e-5) < 1e-4

    def test_combined_objective(self):
        w, x, mask = self._setup(99)
        table = MappingTable({0: (0,), 1: (1,)}, num_experts=4)
        ids = np.array([0, 1, 0, 1, 0, 1])
        labels = np.array([0, 3, 1, 2, 0, 1])
        cfg = LossConfig(aux_weight=0.1, aux_mode="both", gate_noise=1.0)

        def f():
            probs = self._probs(w, x)
            task = task_cross_entropy(x @ w.transpose(), labels, mask)
            total, _ = total_loss(
                task,
                importance_loss(probs, mask),
                load_loss(probs, cfg.gate_noise, mask),
                damex_loss(probs, ids, table, mask),
                cfg,
            )
            return total

        assert finite_diff_check(f, [w, x], eps=1e-5) < 1e-4
