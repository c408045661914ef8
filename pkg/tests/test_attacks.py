import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caat import autodiff as ad
from caat.attacks import (AttackConfig, attack_loss, cw20, cw_margin_loss, fgsm, mean_loss,
                          pgd, pgd10, project)
from caat.autodiff import Tensor
from caat.errors import ConfigError, ContractError


class Scalar:
    """Two-class model whose second logit is a function of the first pixel."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, images):
        images = ad.as_tensor(images)
        b = images.shape[0]
        first = ad.reshape(images, (b, -1))[:, 0:1]
        s = self.fn(first)
        return ad.concat([s * 0.0, s], axis=1)


class Linear:
    def __init__(self, w):
        self.w = Tensor(w.reshape(-1, 1))

    def __call__(self, images):
        images = ad.as_tensor(images)
        s = ad.matmul(ad.reshape(images, (images.shape[0], -1)), self.w)
        return ad.concat([s * 0.0, s], axis=1)


class TestAttackConfig:
    def test_default_hyperparameters(self):
        cfg = pgd10()
        assert (cfg.budget, cfg.step_size, cfg.steps) == (8 / 255, 1 / 255, 10)
        assert cfg.loss_kind == "ce" and not cfg.random_init
        assert cw20().steps == 20 and cw20().loss_kind == "cw"

    @pytest.mark.parametrize("kwargs", [
        dict(budget=-0.1),
        dict(budget=0.1, step_size=0.2),
        dict(budget=0.1, step_size=0.0),
        dict(steps=0),
        dict(loss_kind="hinge"),
        dict(margin_kappa=-1.0),
        dict(budget=float("nan")),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AttackConfig(**kwargs)

    def test_zero_budget_is_identity(self, small_store, rng):
        x = rng.random((3, 3, 8, 8))
        out = pgd(small_store, x, [0, 1, 0], AttackConfig(budget=0.0))
        np.testing.assert_array_equal(out, x)
        assert out is not x


class TestPGD:
    def test_constant_model_is_fixed_point(self, rng):
        model = Scalar(lambda t: t * 0.0 + 1.0)
        x = rng.random((4, 1, 2, 2))
        np.testing.assert_array_equal(pgd(model, x, [0, 1, 0, 1], pgd10()), x)
        np.testing.assert_array_equal(fgsm(model, x, [0, 1, 0, 1], pgd10()), x)

    @pytest.mark.parametrize("x0, expected", [(0.3, 0.2), (0.7, 0.8), (0.45, 0.35)])
    def test_quadratic_maximizer_hits_boundary(self, x0, expected):
        # CE with label 0 grows with (x - 0.5)^2, so ascent moves away from 0.5
        model = Scalar(lambda t: (t - 0.5) * (t - 0.5) * 10.0)
        x = np.full((1, 1, 1, 1), x0)
        cfg = AttackConfig(budget=0.1, step_size=0.01, steps=30)
        out = pgd(model, x, [0], cfg)
        assert out.item() == pytest.approx(expected, abs=1e-15)

    def test_linear_fgsm_closed_form(self, rng):
        w = rng.normal(size=12)
        x = rng.uniform(0.2, 0.8, size=(1, 3, 2, 2))
        out = fgsm(Linear(w), x, [0], AttackConfig(budget=0.05, step_size=0.01))
        np.testing.assert_allclose((out - x).reshape(-1), 0.05 * np.sign(w), atol=1e-15)

    def test_fgsm_bit_equals_pgd1(self, small_store, rng):
        x = rng.random((6, 3, 8, 8))
        y = np.array([0, 1, 1, 0, 1, 0])
        cfg = AttackConfig(budget=8 / 255, step_size=1 / 255, steps=10, random_init=True)
        one = AttackConfig(budget=8 / 255, step_size=8 / 255, steps=1, random_init=False)
        np.testing.assert_array_equal(fgsm(small_store, x, y, cfg), pgd(small_store, x, y, one))

    def test_constraints_and_purity(self, small_store, rng):
        x = rng.random((8, 3, 8, 8))
        x0, before = x.copy(), small_store.copy()
        y = rng.integers(0, 2, 8)
        cfg = AttackConfig(budget=0.1, step_size=0.03, steps=5, random_init=True)
        out = pgd(small_store, x, y, cfg, np.random.default_rng(0))
        assert np.max(np.abs(out - x)) <= 0.1
        assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_array_equal(x, x0)
        assert small_store.equals(before)

    def test_pgd_beats_fgsm_on_average(self, small_store, small_data):
        x, y = small_data.images, small_data.labels
        cfg = AttackConfig(budget=0.1, step_size=0.025, steps=10)
        assert mean_loss(small_store, pgd(small_store, x, y, cfg), y, cfg) >= \
            mean_loss(small_store, fgsm(small_store, x, y, cfg), y, cfg)

    def test_attack_raises_loss(self, small_store, small_data):
        x, y = small_data.images, small_data.labels
        cfg = AttackConfig(budget=0.1, step_size=0.025, steps=10)
        assert mean_loss(small_store, pgd(small_store, x, y, cfg), y, cfg) >= \
            mean_loss(small_store, x, y, cfg)

    def test_seeded_random_start_is_reproducible(self, small_store, rng):
        x = rng.random((2, 3, 8, 8))
        cfg = AttackConfig(budget=0.1, step_size=0.02, steps=2, random_init=True)
        a = pgd(small_store, x, [0, 1], cfg, np.random.default_rng(7))
        b = pgd(small_store, x, [0, 1], cfg, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_rejects_out_of_range_pixels(self, small_store):
        with pytest.raises(ContractError):
            pgd(small_store, np.full((1, 3, 8, 8), 1.5), [0], pgd10())

    def test_cw_protocol_runs(self, small_store, small_data):
        out = pgd(small_store, small_data.images[:4], small_data.labels[:4], cw20(budget=0.1, step_size=0.01))
        assert np.max(np.abs(out - small_data.images[:4])) <= 0.1


@given(arrays(np.float64, (3, 5), elements=st.floats(0, 1)),
       arrays(np.float64, (3, 5), elements=st.floats(-2, 2)),
       st.floats(1e-6, 0.5))
def test_projection_exact(x, noise, budget):
    out = project(x + noise, x, budget)
    assert np.all(np.abs(out - x) <= budget)
    assert np.all((out >= 0.0) & (out <= 1.0))


@given(st.floats(0.01, 0.9), st.floats(1e-4, 1.0))
def test_projection_in_awkward_floats(center, budget):
    # values where x + budget rounds up past the ball in floating point
    x = np.array([center, np.nextafter(center, 1.0), 1.0 / 3.0])
    out = project(x + budget, x, budget)
    assert np.all(out - x <= budget)


class TestCWMargin:
    def test_two_class(self):
        assert cw_margin_loss(np.array([[5.0, 1.0]]), [0]).item() == -4.0

    def test_tie(self):
        assert cw_margin_loss(np.array([[2.0, 2.0, 2.0]]), [1]).item() == 0.0

    def test_kappa_clamps(self):
        assert cw_margin_loss(np.array([[0.0, 3.0]]), [0], kappa=1.0).item() == 1.0
        assert cw_margin_loss(np.array([[0.0, 3.0]]), [0], kappa=10.0).item() == 3.0

    def test_runner_up_tie_goes_to_lowest_index(self):
        z = np.array([[1.0, 4.0, 4.0, 0.0]])
        with ad.Tape() as tape:
            t = Tensor(z, requires_grad=True)
            tape.backward(cw_margin_loss(t, [0], kappa=10.0))
        np.testing.assert_array_equal(t.grad, [[-1.0, 1.0, 0.0, 0.0]])

    def test_needs_two_classes(self):
        with pytest.raises(ContractError):
            cw_margin_loss(np.zeros((2, 1)), [0, 0])

    def test_negative_kappa(self):
        with pytest.raises(ConfigError):
            cw_margin_loss(np.zeros((1, 2)), [0], kappa=-1.0)

    def test_gradient(self, rng):
        z = rng.normal(size=(4, 5))
        y = [0, 3, 2, 4]
        assert ad.gradcheck(lambda t: cw_margin_loss(t, y), [z]) < 1e-6

    def test_dispatch(self):
        z = np.array([[5.0, 1.0]])
        assert attack_loss(z, [0], cw20()).item() == -4.0
        assert attack_loss(z, [0], pgd10()).item() == pytest.approx(np.log1p(np.exp(-4.0)))
