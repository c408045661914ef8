import numpy as np
import pytest

from caat.attacks import AttackConfig
from caat.criticality import BottleneckSet, select_top_tau
from caat.errors import ConfigError, ContractError, DimensionError, DivergenceError
from caat.peft import allocate, uniform_plan
from caat.train import (EvalResult, PeftModel, TrainConfig, caat_train, cosine_lr, evaluate,
                        full_at_train, masked_update, read_metrics, write_metrics)

ATTACK = AttackConfig(budget=0.05, step_size=0.025, steps=2, random_init=True)


def quick(**kw):
    base = dict(epochs=2, batch_size=8, learning_rate=1e-3, attack=ATTACK, eval_every=1)
    return TrainConfig(**{**base, **kw})


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 0.1) == 0.1
        assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05)
        assert cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-18)

    def test_monotone(self):
        lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(5, 4, 0.1)


class TestMaskedUpdate:
    def test_all_ones_is_sgd(self, rng):
        theta, grad = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        np.testing.assert_array_equal(masked_update(theta, grad, np.ones((3, 4)), 0.1),
                                      theta - 0.1 * grad)

    def test_all_zero_is_noop(self, rng):
        theta = rng.normal(size=(3, 4))
        out = masked_update(theta, rng.normal(size=(3, 4)), np.zeros((3, 4)), 0.1)
        np.testing.assert_array_equal(out, theta)

    def test_hand_case(self):
        out = masked_update(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)),
                            np.array([[1, 0], [0, 1]]), 0.5)
        np.testing.assert_array_equal(out, [[0.5, 2.0], [3.0, 3.5]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            masked_update(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)), 0.1)

    def test_frozen_bits_survive_many_steps(self, rng):
        theta = rng.normal(size=(8, 8))
        mask = rng.random((8, 8)) < 0.2
        current = theta.copy()
        for _ in range(100):
            current = masked_update(current, rng.normal(size=(8, 8)), mask, 0.01)
        assert current[~mask].tobytes() == theta[~mask].tobytes()
        assert np.all(current[mask] != theta[mask])


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(weight_decay=-1.0),
        dict(lr_schedule="step"), dict(optimizer="lamb"), dict(adversarial_regen="never"),
        dict(rank=0), dict(peft_learning_rate=-1.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_default_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.rank, cfg.tau, cfg.learning_rate) == (30, 16, 0.05, 1e-3)
        assert cfg.lr_schedule == "cosine" and cfg.optimizer == "adamw"


class TestFullAT:
    def test_log_and_purity(self, small_store, small_data):
        before = small_store.copy()
        result = full_at_train(small_store, small_data, quick(), small_data, [ATTACK])
        assert small_store.equals(before)
        assert not result.store.equals(before)
        assert [r["epoch"] for r in result.log] == [1, 2]
        final = result.final
        assert final["trainable_params"] == small_store.size
        assert final["tuned_fraction"] == 1.0
        assert set(final["robust_acc"]) == {"pgd-2"}

    def test_deterministic(self, small_store, small_data):
        a = full_at_train(small_store, small_data, quick(), small_data, [ATTACK])
        b = full_at_train(small_store, small_data, quick(), small_data, [ATTACK])
        assert a.store.equals(b.store)
        assert a.log == b.log

    def test_seed_changes_run(self, small_store, small_data):
        a = full_at_train(small_store, small_data, quick(seed=0))
        b = full_at_train(small_store, small_data, quick(seed=1))
        assert not a.store.equals(b.store)

    def test_clean_training_lowers_loss(self, small_store, small_data):
        cfg = quick(epochs=6, learning_rate=5e-4, attack=AttackConfig(budget=0.0))
        log = full_at_train(small_store, small_data, cfg).log
        assert log[-1]["train_loss"] < log[0]["train_loss"]

    def test_static_dataset_mode(self, small_store, small_data):
        result = full_at_train(small_store, small_data, quick(adversarial_regen="static-dataset"))
        assert np.isfinite(result.final["train_loss"])

    def test_sgd_constant(self, small_store, small_data):
        cfg = quick(optimizer="sgd", lr_schedule="constant", learning_rate=0.01)
        assert full_at_train(small_store, small_data, cfg).final["lr"] == 0.01

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, small_store, small_data):
        cfg = quick(optimizer="sgd", lr_schedule="constant", learning_rate=1e200, epochs=3)
        with pytest.raises(DivergenceError):
            full_at_train(small_store, small_data, cfg)

    def test_empty_train(self, small_store, small_data):
        with pytest.raises(ContractError):
            full_at_train(small_store, small_data.take(np.arange(0)), quick())


class TestCAAT:
    def test_empty_plan_is_noop(self, small_store, small_data):
        plan = allocate(small_store, BottleneckSet([], small_store.size))
        result = caat_train(small_store, small_data, plan, quick())
        assert result.store.equals(small_store)
        assert result.final["trainable_params"] == 0 and result.final["train_loss"] is None

    def test_mask_entries_only(self, small_store, small_data, rng):
        b = select_top_tau(rng.random(small_store.size), 300)
        plan = allocate(small_store, b, indirect="none")
        result = caat_train(small_store, small_data, plan, quick())
        before, after = small_store.flatten(), result.store.flatten()
        member = b.membership()
        assert after[~member].tobytes() == before[~member].tobytes()
        assert np.count_nonzero(after[member] != before[member]) > 0.9 * len(b)
        assert result.final["trainable_params"] == 300

    def test_lora_merged_matches_unmerged(self, small_store, small_data, rng):
        plan = uniform_plan(small_store, rank=2)
        result = caat_train(small_store, small_data, plan, quick(learning_rate=1e-2))
        x = small_data.images[:5]
        merged = result.store(x).data
        unmerged = result.model(x).data
        assert np.max(np.abs(merged - unmerged)) < 1e-10
        assert not result.store.equals(small_store)
        # LoRA leaves biases, norms and the embeddings' 1-D entries alone
        for path in small_store.paths:
            if small_store[path].ndim < 2:
                np.testing.assert_array_equal(result.store[path], small_store[path])

    def test_adapter_plan(self, small_store, small_data):
        plan = uniform_plan(small_store, branch="adapter", rank=2)
        result = caat_train(small_store, small_data, plan, quick())
        assert "blocks.0.attn.qkv.adapter.down" in result.store.paths
        assert result.final["trainable_params"] == plan.trainable_params

    def test_peft_learning_rate(self, small_store, small_data):
        plan = uniform_plan(small_store, rank=2)
        cfg = quick(lr_schedule="constant", peft_learning_rate=0.02)
        assert caat_train(small_store, small_data, plan, cfg).final["lr"] == 0.02

    def test_plan_store_mismatch(self, small_store, tiny_store, small_data):
        plan = allocate(tiny_store, BottleneckSet([], tiny_store.size))
        with pytest.raises(ContractError):
            caat_train(small_store, small_data, plan, quick())


class TestEvaluate:
    def test_zero_budget_equals_clean(self, small_store, small_data):
        r = evaluate(small_store, small_data, {"none": AttackConfig(budget=0.0)})
        assert r.robust_acc["none"] == r.clean_acc
        assert r.count == len(small_data)

    def test_attack_never_helps_much(self, small_store, small_data):
        r = evaluate(small_store, small_data, [AttackConfig(budget=0.1, step_size=0.025, steps=5)])
        assert r.robust_acc["pgd-5"] <= r.clean_acc

    def test_peft_model_callable(self, small_store, small_data):
        r = evaluate(PeftModel(small_store), small_data)
        assert r == evaluate(small_store, small_data)

    def test_empty(self, small_store, small_data):
        with pytest.raises(ContractError):
            evaluate(small_store, small_data.take(np.arange(0)))

    def test_to_dict(self):
        assert EvalResult(50.0, {"pgd-10": 25.0}, 4).to_dict() == \
            {"clean_acc": 50.0, "robust_acc": {"pgd-10": 25.0}, "count": 4}


def test_metrics_round_trip(tmp_path):
    records = [{"epoch": 1, "robust_acc": {"pgd-10": 12.5}, "clean_acc": None}]
    write_metrics(tmp_path / "m.jsonl", records)
    assert read_metrics(tmp_path / "m.jsonl") == records
    assert (tmp_path / "m.jsonl").read_text().startswith('{"clean_acc"')
