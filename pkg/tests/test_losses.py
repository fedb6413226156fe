import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylecond.losses import critic_gradient_norms, gradient_penalty, interpolate, wgan_d_loss, wgan_g_loss


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


class TestWassersteinTerms:
    def test_d_loss_examples(self):
        assert wgan_d_loss(t(1, 1), t(0, 0)).item() == -1.0
        assert wgan_d_loss(t(0.3, -2), t(0.3, -2)).item() == 0.0
        assert wgan_d_loss(t(2, 0), t(1, 3)).item() == 1.0

    def test_d_loss_size_mismatch(self):
        with pytest.raises(ValueError):
            wgan_d_loss(t(1, 2), t(1))

    def test_g_loss_examples(self):
        assert wgan_g_loss(t(0)).item() == 0.0
        assert wgan_g_loss(t(1, 3)).item() == -2.0

    def test_g_loss_empty(self):
        with pytest.raises(ValueError):
            wgan_g_loss(torch.zeros(0))

    def test_generator_step_raises_critic_score(self):
        torch.manual_seed(0)
        critic = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.Tanh(), torch.nn.Linear(8, 1))
        for p in critic.parameters():
            p.requires_grad_(False)
        gen = torch.nn.Linear(3, 4)
        z = torch.randn(16, 3)
        opt = torch.optim.SGD(gen.parameters(), lr=1e-2)
        before = critic(gen(z)).mean().item()
        opt.zero_grad()
        wgan_g_loss(critic(gen(z)).squeeze(1)).backward()
        opt.step()
        assert critic(gen(z)).mean().item() > before


class LinearCritic:
    def __init__(self, w):
        self.w = w

    def __call__(self, x, y):
        return x.flatten(1) @ self.w


class TestGradientPenalty:
    def test_zero_weight(self):
        real, fake = torch.randn(4, 3, 4, 4), torch.randn(4, 3, 4, 4)
        assert gradient_penalty(LinearCritic(torch.randn(48)), real, fake, torch.zeros(4, 0), lam=0).item() == 0.0

    def test_unit_linear_critic(self):
        w = torch.randn(48, dtype=torch.float64)
        w /= w.norm()
        real, fake = torch.randn(5, 3, 4, 4, dtype=torch.float64), torch.randn(5, 3, 4, 4, dtype=torch.float64)
        assert gradient_penalty(LinearCritic(w), real, fake, torch.zeros(5, 0)).item() < 1e-6

    def test_scaled_linear_critic(self):
        # gradient norm 3 everywhere: penalty = lam * (3 - 1)^2
        w = torch.zeros(48, dtype=torch.float64)
        w[0] = 3.0
        real = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        assert gradient_penalty(LinearCritic(w), real, real.clone(), torch.zeros(2, 0), lam=10).item() == pytest.approx(40.0)

    def test_condition_maps_not_differentiated(self):
        # a critic reading Y heavily still has unit image gradient
        w = torch.zeros(48, dtype=torch.float64)
        w[5] = 1.0

        def critic(x, y):
            return x.flatten(1) @ w + 100.0 * y.sum(dim=1)

        y = torch.ones(3, 2, dtype=torch.float64)
        real = torch.randn(3, 3, 4, 4, dtype=torch.float64)
        assert gradient_penalty(critic, real, -real, y).item() < 1e-12

    def test_interpolates_on_segment(self):
        real, fake = torch.zeros(6, 2), torch.ones(6, 2)
        x = interpolate(real, fake, torch.Generator().manual_seed(0))
        assert torch.all((x >= 0) & (x <= 1))
        assert torch.all(x[:, 0] == x[:, 1])  # one eps per sample

    def test_finite_differences_on_small_critic(self):
        torch.manual_seed(0)
        net = torch.nn.Sequential(
            torch.nn.Conv2d(3, 4, 3, padding=1), torch.nn.Tanh(), torch.nn.Flatten(), torch.nn.Linear(64, 1)
        ).double()

        def critic(x, y):
            return net(x).squeeze(1)

        x = torch.randn(3, 3, 4, 4, dtype=torch.float64)
        analytic = critic_gradient_norms(critic, x, torch.zeros(3, 0), create_graph=False)
        h = 1e-5
        numeric = torch.zeros(3, dtype=torch.float64)
        with torch.no_grad():
            for i in range(3):
                grad = torch.zeros(48, dtype=torch.float64)
                for j in range(48):
                    step = torch.zeros(48, dtype=torch.float64)
                    step[j] = h
                    plus = critic((x[i].flatten() + step).view(1, 3, 4, 4), None)
                    minus = critic((x[i].flatten() - step).view(1, 3, 4, 4), None)
                    grad[j] = (plus - minus).item() / (2 * h)
                numeric[i] = grad.norm()
        assert torch.allclose(analytic, numeric, rtol=1e-3, atol=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 50))
    def test_non_negative(self, seed, lam):
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(12, generator=g)
        real, fake = torch.randn(3, 3, 2, 2, generator=g), torch.randn(3, 3, 2, 2, generator=g)
        assert gradient_penalty(LinearCritic(w), real, fake, torch.zeros(3, 0), lam=lam, generator=g).item() >= 0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            gradient_penalty(LinearCritic(torch.ones(4)), torch.zeros(1, 4), torch.zeros(1, 4), torch.zeros(1, 0), lam=-1)
