import math

import numpy as np
import pytest

from absorber import tensor as T
from absorber.absorption import (AbsorptionConfig, AbsorptionConfigError, AbsorptionReport, OptimizationError,
                                 absorb_context, capture_oracle_trace, sync_loss, token_distribution_loss,
                                 ttt_reconstruction_loss)
from absorber.model import HiddenStateTrace, ModelConfig, forward_full, init_model
from absorber.optim import AdamState, AdamW, adamw_step

SMALL = ModelConfig(num_layers=2, hidden_dim=32, num_heads=4, mlp_dim=64, max_positions=256)


@pytest.fixture(scope="module")
def small():
    return init_model(SMALL, seed=11)


def tokens(seed, length):
    return [int(t) for t in np.random.default_rng(seed).integers(0, 256, length)]


def trace(array):
    array = np.asarray(array, dtype=np.float64)
    return HiddenStateTrace(np.arange(array.shape[0]), T.TensorNode(array))


class TestSyncLoss:
    def test_worked_example(self):
        # m=1, L=0, d=2: |1 - 0| + |2 - 0| over one position
        cfg = AbsorptionConfig(n=0, m=1)
        assert sync_loss(trace([[[1.0, 2.0]]]), trace([[[0.0, 0.0]]]), cfg).item() == 3.0

    def test_per_element(self):
        cfg = AbsorptionConfig(n=0, m=1, norm_mode="per_element")
        assert sync_loss(trace([[[1.0, 2.0]]]), trace([[[0.0, 0.0]]]), cfg).item() == 1.5

    def test_l2(self):
        cfg = AbsorptionConfig(n=0, m=1, loss_norm="L2")
        assert sync_loss(trace([[[1.0, 2.0]]]), trace([[[0.0, 0.0]]]), cfg).item() == pytest.approx(5.0)

    def test_identical_is_zero(self):
        a = np.random.default_rng(0).standard_normal((4, 3, 5))
        assert sync_loss(trace(a), trace(a), AbsorptionConfig()).item() == 0.0

    def test_layer_mismatch(self):
        with pytest.raises(T.ContractError, match="layer"):
            sync_loss(trace(np.zeros((2, 3, 4))), trace(np.zeros((2, 2, 4))), AbsorptionConfig())

    def test_position_mismatch(self):
        with pytest.raises(T.ContractError):
            sync_loss(trace(np.zeros((2, 3, 4))), trace(np.zeros((3, 3, 4))), AbsorptionConfig())


class TestOtherObjectives:
    def test_kl_one_hot_vs_uniform(self):
        kl = token_distribution_loss(np.array([[0.0, -1e4]]), T.TensorNode(np.zeros((1, 2)))).item()
        assert kl == pytest.approx(math.log(2))

    def test_kl_identical(self):
        x = np.random.default_rng(1).standard_normal((3, 7))
        assert token_distribution_loss(x, T.TensorNode(x)).item() == pytest.approx(0.0, abs=1e-12)

    def test_ttt_matches_cross_entropy_oracle(self, small):
        x = tokens(2, 12)
        logits, _ = forward_full(small, x[:-1])
        lg = logits.astype(np.float64)
        expected = np.mean([np.log(np.exp(lg[i] - lg[i].max()).sum()) + lg[i].max() - lg[i, x[i + 1]]
                            for i in range(len(x) - 1)])
        assert ttt_reconstruction_loss(small, x).item() == pytest.approx(expected, rel=1e-5)

    def test_ttt_needs_two_tokens(self, small):
        with pytest.raises(T.ContractError):
            ttt_reconstruction_loss(small, [5])


class TestAdamW:
    def scalar_reference(self, p, target, steps, lr, b1, b2, wd, eps=1e-8):
        m = v = 0.0
        out = []
        for t in range(1, steps + 1):
            g = p - target
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p * (1 - lr * wd)
            p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            out.append(p)
        return out

    @pytest.mark.parametrize("wd", [0.0, 0.1])
    def test_quadratic_matches_scalar_loop(self, wd):
        params = {"p": np.array([0.5])}
        state = AdamState()
        got = []
        for _ in range(10):
            adamw_step(params, {"p": params["p"] - 3.0}, state, 0.1, 0.9, 0.999, wd)
            got.append(float(params["p"][0]))
        np.testing.assert_allclose(got, self.scalar_reference(0.5, 3.0, 10, 0.1, 0.9, 0.999, wd), rtol=1e-12)

    def test_first_step_is_lr_sized(self):
        params = {"p": np.array([0.0, 0.0])}
        adamw_step(params, {"p": np.array([2.0, -0.5])}, AdamState(), 0.01)
        np.testing.assert_allclose(params["p"], [-0.01, 0.01], rtol=1e-6)

    def test_missing_grad_untouched(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        AdamW(params, lr=0.1).step({"a": np.ones(2)})
        np.testing.assert_array_equal(params["b"], 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step({"a": np.ones(2)}, {"a": np.ones(3)}, AdamState(), 0.1)


class TestConfig:
    @pytest.mark.parametrize("changes,needle", [
        ({"n": -1}, "n must be"),
        ({"m": 0}, "m must be"),
        ({"max_steps": -1}, "max_steps"),
        ({"lr": 0.0}, "lr"),
        ({"epsilon": -1.0}, "epsilon"),
        ({"norm_mode": "sum"}, "norm_mode"),
        ({"loss_norm": "L3"}, "loss_norm"),
        ({"alignment_target": "logits"}, "alignment_target"),
        ({"position_mode": "none"}, "position_mode"),
        ({"lora_rank": 0}, "lora_rank"),
        ({"lora_targets": ("wq", "wz")}, "lora_targets"),
        ({"beta1": 1.0}, "beta"),
        ({"weight_decay": -0.1}, "weight_decay"),
    ])
    def test_each_failure_named(self, changes, needle):
        with pytest.raises(AbsorptionConfigError, match=needle):
            AbsorptionConfig().replace(**changes)

    def test_defaults(self):
        cfg = AbsorptionConfig()
        assert (cfg.n, cfg.m, cfg.max_steps, cfg.lr) == (32, 64, 200, 5e-4)

    def test_epsilon_scaling(self):
        cfg = AbsorptionConfig()
        assert cfg.resolved_epsilon(4, 128) == pytest.approx(0.01 * 5 * 128)
        assert cfg.replace(norm_mode="per_element").resolved_epsilon(4, 128) == 0.01
        assert cfg.replace(epsilon=0.5).resolved_epsilon(4, 128) == 0.5


class TestReport:
    def test_empty(self):
        r = AbsorptionReport()
        assert r.steps == 0 and math.isnan(r.initial_loss)

    def test_csv(self):
        r = AbsorptionReport(losses=[2.0, 1.0])
        assert r.to_csv() == "step,loss\n0,2.0\n1,1.0\n"


class TestAbsorbContext:
    def cfg(self, **kw):
        base = dict(n=8, m=8, max_steps=6, lr=1e-3, lora_rank=2, lora_alpha=4.0)
        base.update(kw)
        return AbsorptionConfig(**base)

    def test_empty_context_is_identity(self, small):
        cfg = self.cfg(n=0)
        adapters, report = absorb_context(small, [], tokens(3, 8), cfg)
        assert report.losses == [0.0]
        assert report.terminated_by == "threshold" and report.optimizer_steps == 0
        assert adapters.is_zero()

    def test_zero_sync_loss_means_equal_logits(self, small):
        # with nothing absorbed the student on Y is the oracle on Y
        y = tokens(21, 8)
        adapters, report = absorb_context(small, [], y, self.cfg(n=0))
        assert report.final_loss == 0.0
        student, _ = forward_full(small, y, adapters=adapters)
        oracle, _ = forward_full(small, y)
        assert np.abs(student - oracle).max() <= 1e-5

    def test_zero_steps(self, small):
        adapters, report = absorb_context(small, tokens(4, 8), tokens(5, 8), self.cfg(max_steps=0))
        assert report.steps == 0 and report.terminated_by == "max_steps" and adapters.is_zero()

    def test_base_weights_frozen(self, small):
        before = small.copy()
        absorb_context(small, tokens(6, 8), tokens(7, 8), self.cfg())
        assert small.equals(before)

    def test_oracle_trace_is_stable(self, small):
        xy = tokens(8, 16)
        a = capture_oracle_trace(small, xy, 8, 8)
        b = capture_oracle_trace(small, xy, 8, 8)
        assert a.array().tobytes() == b.array().tobytes()
        np.testing.assert_array_equal(a.positions, np.arange(8, 16))

    def test_loss_decreases(self, small):
        _, report = absorb_context(small, tokens(9, 8), tokens(10, 8), self.cfg(max_steps=30))
        assert report.final_loss < report.initial_loss
        assert report.steps == report.optimizer_steps == 30

    def test_threshold_stops_early(self, small):
        _, report = absorb_context(small, tokens(9, 8), tokens(10, 8), self.cfg(epsilon=1e9))
        assert report.steps == 1 and report.optimizer_steps == 0 and report.terminated_by == "threshold"

    def test_zero_threshold_runs_all_steps(self, small):
        _, report = absorb_context(small, tokens(9, 8), tokens(10, 8), self.cfg(epsilon=0.0))
        assert report.steps == 6 and report.terminated_by == "max_steps"

    def test_deterministic(self, small):
        args = (small, tokens(11, 8), tokens(12, 8), self.cfg())
        a, ra = absorb_context(*args, seed=3)
        b, rb = absorb_context(*args, seed=3)
        assert ra.losses == rb.losses
        assert all(np.array_equal(a.pairs[k][0], b.pairs[k][0]) for k in a.pairs)

    @pytest.mark.parametrize("target", ["token_distribution", "ttt_reconstruction"])
    def test_other_targets_run(self, small, target):
        _, report = absorb_context(small, tokens(13, 8), tokens(14, 8), self.cfg(alignment_target=target))
        assert report.steps == 6 and report.final_loss < report.initial_loss

    def test_reset_mode_runs(self, small):
        _, report = absorb_context(small, tokens(15, 8), tokens(16, 8), self.cfg(position_mode="reset"))
        assert report.final_loss < report.initial_loss

    def test_wrong_lengths(self, small):
        with pytest.raises(T.ContractError):
            absorb_context(small, tokens(1, 7), tokens(2, 8), self.cfg())

    def test_divergence_raises(self, small):
        with pytest.raises(OptimizationError), np.errstate(over="ignore", invalid="ignore"):
            absorb_context(small, tokens(17, 8), tokens(18, 8), self.cfg(lr=1e30, max_steps=5))

    def test_callback_sees_every_loss(self, small):
        seen = []
        _, report = absorb_context(small, tokens(19, 8), tokens(20, 8), self.cfg(),
                                   callback=lambda s, l: seen.append((s, l)))
        assert [l for _, l in seen] == report.losses
