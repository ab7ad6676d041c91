import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cagan import losses as L
from cagan.errors import ConfigError, NumericalError, ShapeError

from .conftest import random_soft_masks


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def chw_masks(m_hwc):
    return t(np.moveaxis(m_hwc, -1, 0))


# --- scalar loop oracles (independent of the vectorized path) ---------------


def loop_global_l1(y, y_hat):
    c, h, w = y.shape
    total = 0.0
    for k in range(c):
        for i in range(h):
            for j in range(w):
                total += abs(y[k, i, j] - y_hat[k, i, j])
    return total / (h * w)


def loop_region_mae(y, y_hat, labels, comp):
    """Mean absolute error over pixels labelled ``comp`` (channels summed)."""
    c, h, w = y.shape
    total, count = 0.0, 0
    for i in range(h):
        for j in range(w):
            if labels[i, j] == comp:
                count += 1
                for k in range(c):
                    total += abs(y[k, i, j] - y_hat[k, i, j])
    return total / count if count else 0.0


def two_by_two():
    y = np.array([[[1.0, 1.0], [0.0, 0.0]]])
    y_hat = np.zeros_like(y)
    m = np.zeros((8, 2, 2))
    m[0] = [[1, 0], [1, 0]]
    m[7] = 1 - m[0]
    return t(y), t(y_hat), t(m)


class TestGlobalL1:
    def test_identity(self, rng):
        y = t(rng.uniform(-1, 1, (3, 5, 5)))
        assert L.global_l1(y, y).item() == 0.0

    def test_constant_difference(self):
        assert L.global_l1(torch.ones(1, 4, 4), -torch.ones(1, 4, 4)).item() == 2.0

    def test_matches_loop(self, rng):
        y, y_hat = rng.uniform(-1, 1, (2, 1, 4, 4))
        assert abs(L.global_l1(t(y), t(y_hat)).item() - loop_global_l1(y, y_hat)) <= 1e-6

    def test_multichannel_divides_by_pixels_only(self):
        assert L.global_l1(torch.ones(3, 2, 2), torch.zeros(3, 2, 2)).item() == 3.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            L.global_l1(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))

    def test_batch_mean(self, rng):
        y, y_hat = t(rng.uniform(-1, 1, (3, 1, 4, 4))), t(rng.uniform(-1, 1, (3, 1, 4, 4)))
        per = [L.global_l1(y[i], y_hat[i]).item() for i in range(3)]
        assert abs(L.global_l1(y, y_hat).item() - sum(per) / 3) < 1e-12


class TestComponentLosses:
    def test_all_ones_mask_equals_global(self, rng):
        y, y_hat = t(rng.uniform(-1, 1, (1, 6, 6))), t(rng.uniform(-1, 1, (1, 6, 6)))
        m = torch.zeros(8, 6, 6, dtype=torch.float64)
        m[2] = 1
        assert abs(L.component_global_l1(y, y_hat, m, 2) - L.global_l1(y, y_hat)).item() < 1e-12

    def test_zero_mask(self, rng):
        y, y_hat = t(rng.uniform(-1, 1, (1, 6, 6))), t(rng.uniform(-1, 1, (1, 6, 6)))
        m = torch.zeros(8, 6, 6, dtype=torch.float64)
        m[7] = 1
        assert L.component_global_l1(y, y_hat, m, 0).item() == 0.0

    def test_two_by_two_enumeration(self):
        y, y_hat, m = two_by_two()
        assert L.component_global_l1(y, y_hat, m, 0).item() == pytest.approx(0.25, abs=1e-12)
        assert L.balanced_component_l1(y, y_hat, m, 0).item() == pytest.approx(0.5, abs=1e-12)

    def test_uniform_gamma(self):
        m = torch.full((8, 4, 4), 1 / 8, dtype=torch.float64)
        for c in range(8):
            assert L.inverse_frequency(m, c).item() == 8.0

    def test_empty_component_guard(self, rng):
        y, y_hat = t(rng.uniform(-1, 1, (1, 4, 4))), t(rng.uniform(-1, 1, (1, 4, 4)))
        m = torch.zeros(8, 4, 4, dtype=torch.float64)
        m[7] = 1
        v = L.balanced_component_l1(y, y_hat, m, 3, epsilon_mass=1e-6)
        assert v.item() == 0.0 and math.isfinite(v.item())

    def test_empty_component_has_finite_gradient(self, rng):
        y = t(rng.uniform(-1, 1, (1, 4, 4)))
        y_hat = t(rng.uniform(-1, 1, (1, 4, 4))).requires_grad_()
        m = torch.zeros(8, 4, 4, dtype=torch.float64)
        m[7] = 1
        L.compositional_l1(y, y_hat, m).backward()
        assert torch.isfinite(y_hat.grad).all()

    def test_component_index_range(self):
        y, y_hat, m = two_by_two()
        with pytest.raises(IndexError):
            L.component_global_l1(y, y_hat, m, 8)

    def test_mask_shape_mismatch(self):
        y, y_hat, _ = two_by_two()
        with pytest.raises(ShapeError):
            L.compositional_l1(y, y_hat, torch.ones(8, 3, 2))

    def test_single_component_equals_global(self, rng):
        y, y_hat = t(rng.uniform(-1, 1, (1, 5, 5))), t(rng.uniform(-1, 1, (1, 5, 5)))
        m = torch.ones(1, 5, 5, dtype=torch.float64)
        assert abs(L.compositional_l1(y, y_hat, m) - L.global_l1(y, y_hat)).item() < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_hard_masks_region_oracle(self, seed):
        rng = np.random.default_rng(seed)
        y, y_hat = rng.uniform(-1, 1, (2, 3, 7, 7))
        labels = rng.integers(0, 8, (7, 7))
        m = np.moveaxis(np.eye(8)[labels], -1, 0)
        expected = sum(loop_region_mae(y, y_hat, labels, c) for c in range(8))
        got = L.compositional_l1(t(y), t(y_hat), t(m)).item()
        assert abs(got - expected) <= 1e-6
        for c in range(8):
            assert abs(L.balanced_component_l1(t(y), t(y_hat), t(m), c).item()
                       - loop_region_mae(y, y_hat, labels, c)) <= 1e-6

    def test_identity_is_zero(self, rng):
        y = t(rng.uniform(-1, 1, (1, 5, 5)))
        assert L.compositional_l1(y, y, chw_masks(random_soft_masks(rng, 5, 5))).item() == 0.0


class TestMixAndObjective:
    def test_endpoints(self, rng):
        y, y_hat = t(rng.uniform(-1, 1, (1, 6, 6))), t(rng.uniform(-1, 1, (1, 6, 6)))
        m = chw_masks(random_soft_masks(rng, 6, 6))
        assert L.mixed_reconstruction_loss(y, y_hat, m, L.LossWeights(alpha=0.0)).item() == L.global_l1(y, y_hat).item()
        assert (L.mixed_reconstruction_loss(y, y_hat, m, L.LossWeights(alpha=1.0)).item()
                == L.compositional_l1(y, y_hat, m).item())

    def test_default_alpha_on_fixture(self):
        # error only inside component 0: compositional 1/2, global 1/4
        _, y_hat, m = two_by_two()
        y = t([[[1.0, 0.0], [0.0, 0.0]]])
        v = L.mixed_reconstruction_loss(y, y_hat, m, L.LossWeights(alpha=0.7))
        assert v.item() == pytest.approx(0.7 * 0.5 + 0.3 * 0.25, abs=1e-12)
        assert v.item() == pytest.approx(0.425, abs=1e-12)

    def test_objective(self):
        w = L.LossWeights(lam=100.0)
        assert L.generator_objective(0.6931, 0.425, w) == pytest.approx(43.1931, abs=1e-9)
        assert L.generator_objective(0.6931, 0.425, L.LossWeights(lam=0.0)) == 0.6931
        assert L.generator_objective(0.6931, 0.0, w) == 0.6931

    @pytest.mark.parametrize("kw", [{"alpha": -0.1}, {"alpha": 1.1}, {"lam": -1}, {"epsilon_mass": 0}])
    def test_weights_validation(self, kw):
        with pytest.raises(ConfigError):
            L.LossWeights(**kw)


class TestAdversarial:
    def test_half(self):
        d = torch.full((1, 1, 6, 6), 0.5, dtype=torch.float64)
        loss_d, loss_g = L.adversarial_losses(d, d)
        assert loss_d.item() == pytest.approx(-2 * math.log(0.5), abs=1e-12)
        assert loss_g.item() == pytest.approx(-math.log(0.5), abs=1e-12)

    def test_perfect_discriminator_limit(self):
        loss_d, _ = L.adversarial_losses(torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        assert 0 <= loss_d.item() < 1e-6

    def test_nonfinite(self):
        with pytest.raises(NumericalError):
            L.adversarial_losses(torch.tensor([0.5, float("nan")]), torch.tensor([0.5, 0.5]))

    def test_logit_forms_agree(self, rng):
        real, fake = t(rng.normal(size=(1, 1, 5, 5))), t(rng.normal(size=(1, 1, 5, 5)))
        loss_d, loss_g = L.adversarial_losses(torch.sigmoid(real), torch.sigmoid(fake))
        assert L.discriminator_loss_from_logits(real, fake).item() == pytest.approx(loss_d.item(), abs=1e-10)
        assert L.generator_adv_loss_from_logits(fake).item() == pytest.approx(loss_g.item(), abs=1e-10)

    def test_extreme_logits_finite(self):
        big = torch.tensor([1e4, -1e4])
        assert torch.isfinite(L.discriminator_loss_from_logits(big, -big))
        assert torch.isfinite(L.generator_adv_loss_from_logits(-big))


# --- invariants ----------------------------------------------------------------


@given(st.integers(0, 10_000), st.integers(2, 9), st.sampled_from([1, 3]))
@settings(max_examples=40, deadline=None)
def test_additivity_over_components(seed, size, channels):
    rng = np.random.default_rng(seed)
    y, y_hat = rng.uniform(-1, 1, (2, channels, size, size))
    m = chw_masks(random_soft_masks(rng, size, size))
    total = sum(L.component_global_l1(t(y), t(y_hat), m, c) for c in range(8))
    assert abs(total - L.global_l1(t(y), t(y_hat))).item() <= 1e-5


@given(st.integers(0, 10_000), st.floats(0.01, 50))
@settings(max_examples=30, deadline=None)
def test_scale_covariance(seed, k):
    rng = np.random.default_rng(seed)
    y, y_hat = rng.uniform(-1, 1, (2, 1, 6, 6))
    m = chw_masks(random_soft_masks(rng, 6, 6))
    y_scaled = y_hat + k * (y - y_hat)
    w = L.LossWeights(alpha=0.3)
    for fn in (
        lambda a, b: L.global_l1(a, b),
        lambda a, b: L.component_global_l1(a, b, m, 2),
        lambda a, b: L.balanced_component_l1(a, b, m, 5),
        lambda a, b: L.compositional_l1(a, b, m),
        lambda a, b: L.mixed_reconstruction_loss(a, b, m, w),
    ):
        base = fn(t(y), t(y_hat)).item()
        assert fn(t(y_scaled), t(y_hat)).item() == pytest.approx(k * base, rel=1e-9, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    y, y_hat = rng.uniform(-1, 1, (2, 1, 5, 5))
    m = np.moveaxis(random_soft_masks(rng, 5, 5), -1, 0)
    perm = rng.permutation(25)

    def shuffle(a):
        return a.reshape(a.shape[0], -1)[:, perm].reshape(a.shape)

    w = L.LossWeights()
    a = L.mixed_reconstruction_loss(t(y), t(y_hat), t(m), w).item()
    b = L.mixed_reconstruction_loss(t(shuffle(y)), t(shuffle(y_hat)), t(shuffle(m)), w).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_gradient_matches_finite_differences(rng):
    y = rng.uniform(-1, 1, (1, 8, 8))
    delta = rng.uniform(0.02, 0.5, y.shape) * rng.choice([-1, 1], y.shape)
    y_hat = t(y + delta).requires_grad_()
    m = chw_masks(random_soft_masks(rng, 8, 8))
    loss = L.mixed_reconstruction_loss(t(y), y_hat, m)
    (grad,) = torch.autograd.grad(loss, y_hat)
    h = 1e-3
    base = y_hat.detach().clone()
    for idx in [(0, 0, 0), (0, 3, 5), (0, 7, 7), (0, 4, 1)]:
        plus, minus = base.clone(), base.clone()
        plus[idx] += h
        minus[idx] -= h
        fd = (L.mixed_reconstruction_loss(t(y), plus, m) - L.mixed_reconstruction_loss(t(y), minus, m)).item() / (2 * h)
        assert abs(fd - grad[idx].item()) <= 1e-3 * max(abs(fd), 1e-12)
