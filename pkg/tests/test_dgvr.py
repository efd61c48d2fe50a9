import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from dynamind.autoencoder import FrameVAE
from dynamind.dgvr import (BlueprintUpsampler, GuidanceBundle, VideoDenoiser, ddim_invert, decode_video, dgvr_loss,
                           init_latent, sample)
from dynamind.diffusion import ddim_timesteps, forward_noise, make_schedule
from dynamind.errors import ValidationError

from oracles import check_gradients


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ---- schedule

def test_single_step_schedule():
    s = make_schedule(1, 0.01, 0.02)
    assert s.alpha_bars[1].item() == pytest.approx(1 - 0.01, abs=1e-15)


def test_schedule_monotone():
    s = make_schedule(100, 1e-4, 0.04)
    b, ab = s.betas[1:], s.alpha_bars
    assert torch.all(b > 0) and torch.all(b < 1) and torch.all(b[1:] > b[:-1])
    assert ab[0].item() == 1.0
    assert torch.all(ab[1:] < ab[:-1]) and torch.all(ab > 0)


def test_schedule_cumulative_product_oracle():
    s = make_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for i in range(1000):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
    assert s.alpha_bars[1000].item() == pytest.approx(prod, rel=1e-10)
    assert prod == pytest.approx(4.04e-5, rel=0.01)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValidationError):
        make_schedule(*args)


def test_ddim_grid_endpoints():
    assert ddim_timesteps(100, 4) == [100, 75, 50, 25, 0]
    with pytest.raises(ValidationError):
        ddim_timesteps(10, 11)


# ---- forward process

S = make_schedule(100, 1e-4, 0.04)


def test_forward_noise_clean_step():
    x0, eps = _rand(3, 4), _rand(3, 4, seed=1)
    assert torch.equal(forward_noise(x0, 0, eps, S), x0)


def test_forward_noise_without_noise():
    x0 = _rand(3, 4)
    out = forward_noise(x0, 40, torch.zeros_like(x0), S)
    assert torch.allclose(out, S.alpha_bars[40].sqrt() * x0, atol=0, rtol=1e-15)


def test_forward_noise_rejects_bad_input():
    x0 = _rand(2, 3)
    with pytest.raises(ValidationError):
        forward_noise(x0, 101, torch.zeros_like(x0), S)
    with pytest.raises(ValidationError):
        forward_noise(x0, 5, torch.zeros(3, 2, dtype=torch.float64), S)


@pytest.mark.parametrize("t", [1, 30, 100])
def test_forward_noise_monte_carlo_moments(t):
    n = 10_000
    x0 = torch.tensor([0.7, -1.3, 2.0], dtype=torch.float64)
    eps = _rand(n, 3, seed=t)
    xt = forward_noise(x0.expand(n, 3), t, eps, S)
    ab = S.alpha_bars[t].item()
    var = 1 - ab
    mean_se = math.sqrt(var / n)
    assert torch.all((xt.mean(0) - math.sqrt(ab) * x0).abs() < 3 * mean_se)
    # sample variance of a Gaussian: standard error var * sqrt(2 / (n - 1))
    assert torch.all((xt.var(0) - var).abs() < 3 * var * math.sqrt(2 / (n - 1)))


# ---- structured initial latent

def _int_upsampler(d=3, shape=(2, 2, 2)):
    up = BlueprintUpsampler(d, shape).double()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        up.proj.weight.copy_(torch.randint(-3, 4, up.proj.weight.shape, generator=g).double())
        up.proj.bias.copy_(torch.randint(-3, 4, up.proj.bias.shape, generator=g).double())
    return up


def test_alpha_zero_returns_epsilon():
    eps = _rand(1, 4, 2, 2, 2)
    assert torch.equal(init_latent(eps, _rand(1, 4, 3), 0.0, _int_upsampler()), eps)


def test_alpha_one_zero_noise_returns_upsampled():
    up, z = _int_upsampler(), _rand(1, 4, 3)
    assert torch.equal(init_latent(torch.zeros(1, 4, 2, 2, 2, dtype=torch.float64), z, 1.0, up), up(z))


@pytest.mark.parametrize("a1,a2", [(0.25, 0.5), (1.0, 2.0), (0.0, 0.125), (3.0, 0.75)])
def test_init_latent_is_linear_in_alpha(a1, a2):
    # integer-valued inputs keep every product and sum exact in float64
    g = torch.Generator().manual_seed(1)
    up = _int_upsampler()
    z = torch.randint(-4, 5, (2, 4, 3), generator=g).double()
    eps = torch.randint(-4, 5, (2, 4, 2, 2, 2), generator=g).double()
    lhs = init_latent(eps, z, a1 + a2, up)
    rhs = init_latent(eps, z, a1, up) + a2 * up(z)
    assert torch.equal(lhs, rhs)


def test_constant_blueprint_gives_identical_frame_planes():
    up = BlueprintUpsampler(5, (3, 2, 2))
    z = torch.ones(1, 6, 5) * 0.4
    planes = up(z)[0]
    assert all(torch.equal(planes[0], p) for p in planes)


def test_init_latent_shape_mismatch():
    with pytest.raises(ValidationError):
        init_latent(torch.zeros(1, 4, 2, 3, 2, dtype=torch.float64), _rand(1, 4, 3), 0.3, _int_upsampler())


def test_guidance_validation():
    with pytest.raises(ValidationError):
        GuidanceBundle(alpha=-0.1)
    with pytest.raises(ValidationError):
        GuidanceBundle(z_b=torch.tensor([[float("nan")]]))


# ---- denoiser network

def _denoiser():
    torch.manual_seed(0)
    return VideoDenoiser((4, 4, 4), d_blueprint=6, cond_dim=5, base_width=8, T_steps=20, cond_tokens=2, heads=2)


def test_denoiser_output_shape():
    den = _denoiser()
    x = torch.randn(2, 3, 4, 4, 4)
    assert den(x, torch.tensor([1, 7]), torch.randn(2, 5), torch.randn(2, 3, 6)).shape == x.shape


def test_denoiser_uses_both_guidance_inputs():
    den = _denoiser()
    for m in den.modules():
        if isinstance(m, nn.Linear) and m.out_features == m.in_features:
            nn.init.normal_(m.weight)  # open the zero-initialised attention outputs
    x, t = torch.randn(1, 3, 4, 4, 4), torch.tensor([5])
    sem, z = torch.randn(1, 5), torch.randn(1, 3, 6)
    base = den(x, t, sem, z)
    assert not torch.allclose(base, den(x, t, sem + 1, z))
    bumped = z.clone()
    bumped[:, 1] += 1
    assert not torch.allclose(base, den(x, t, sem, bumped))


def test_denoiser_sees_only_frame_varying_blueprint():
    den = _denoiser()
    x, t = torch.randn(2, 3, 4, 4, 4), torch.tensor([5, 9])
    sem, z = torch.randn(2, 5), torch.randn(2, 3, 6)
    shift = torch.randn(2, 1, 6)
    assert torch.allclose(den(x, t, sem, z), den(x, t, sem, z + shift), atol=1e-6)
    eps = torch.zeros(2, 3, 4, 4, 4)
    assert not torch.allclose(init_latent(eps, z, 1.0, den.upsampler), init_latent(eps, z + shift, 1.0, den.upsampler))


# ---- objective

class _Linear2(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(0.4, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(-0.2, dtype=torch.float64))

    def forward(self, x, t, semantic=None, z_b=None):
        return self.a * x + self.b


def test_zero_denoiser_loss_is_unit():
    x0 = _rand(200, 50)
    loss = dgvr_loss(lambda x, t, s, z: torch.zeros_like(x), x0, GuidanceBundle(alpha=0.0), S,
                     torch.Generator().manual_seed(0))
    assert abs(loss.item() - 1.0) < 3 * math.sqrt(2 / x0.numel())


def test_oracle_denoiser_loss_is_zero():
    x0 = _rand(8, 3, 2)
    t = torch.randint(1, 101, (8,), generator=torch.Generator().manual_seed(0))

    def oracle(x_t, t_b, s, z):
        ab = S.alpha_bars[t_b].reshape(-1, 1, 1)
        return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()

    assert dgvr_loss(oracle, x0, GuidanceBundle(alpha=0.0), S, t=t, noise=_rand(8, 3, 2, seed=1)).item() < 1e-20


def test_dgvr_loss_gradient():
    den = _Linear2()
    x0, eps = _rand(4, 3, 2), _rand(4, 3, 2, seed=1)
    t = torch.tensor([3, 50, 77, 100])
    err = check_gradients(lambda: dgvr_loss(den, x0, GuidanceBundle(alpha=0.0), S, t=t, noise=eps), [den.a, den.b])
    assert err < 1e-4


# ---- sampling

def test_zero_steps_returns_initial_latent():
    den = _denoiser()
    z = torch.randn(1, 3, 6)
    g = GuidanceBundle(torch.randn(1, 5), z, 0.3)
    out = sample(den, g, make_schedule(20, 1e-4, 0.04), (1, 3, 4, 4, 4), steps=0, seed=3)
    eps = torch.randn((1, 3, 4, 4, 4), generator=torch.Generator().manual_seed(3))
    assert torch.equal(out, eps + 0.3 * den.upsampler(z))


@pytest.mark.parametrize("sampler", ["deterministic", "ancestral"])
def test_sampling_is_reproducible(sampler):
    den, sched = _denoiser().eval(), make_schedule(20, 1e-4, 0.04)
    g = GuidanceBundle(torch.randn(1, 5), torch.randn(1, 3, 6), 0.3)
    a = sample(den, g, sched, (1, 3, 4, 4, 4), sampler=sampler, steps=5, seed=11)
    b = sample(den, g, sched, (1, 3, 4, 4, 4), sampler=sampler, steps=5, seed=11)
    c = sample(den, g, sched, (1, 3, 4, 4, 4), sampler=sampler, steps=5, seed=12)
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_sampling_rejects_bad_arguments():
    den, sched = _denoiser(), make_schedule(20, 1e-4, 0.04)
    g = GuidanceBundle(alpha=0.0)
    with pytest.raises(ValidationError):
        sample(den, g, sched, (1, 3, 4, 4, 4), steps=21)
    with pytest.raises(ValidationError):
        sample(den, g, sched, (1, 3, 4, 4, 4), sampler="euler")
    with pytest.raises(ValidationError):
        sample(den, g, sched, (1, 3, 4, 4, 4), noise=torch.zeros(1, 3, 4, 4, 3))


class PerStepLinear(nn.Module):
    """eps = a_t * x + b_t; expressive enough for Gaussian data."""

    def __init__(self, T):
        super().__init__()
        self.a = nn.Parameter(torch.zeros(T + 1, dtype=torch.float64))
        self.b = nn.Parameter(torch.zeros(T + 1, dtype=torch.float64))

    def forward(self, x, t, semantic=None, z_b=None):
        t = torch.as_tensor(t).reshape(-1)
        shape = (-1,) + (1,) * (x.ndim - 1)
        return self.a[t].reshape(shape) * x + self.b[t].reshape(shape)


@pytest.fixture(scope="module")
def gaussian_toy():
    """A per-step linear denoiser trained on N(2, 0.5^2) scalars."""
    sched = make_schedule(50, 1e-4, 0.2)
    den = PerStepLinear(50)
    opt = torch.optim.Adam(den.parameters(), lr=0.05)
    gen = torch.Generator().manual_seed(0)
    for _ in range(1500):
        x0 = 2.0 + 0.5 * torch.randn(512, 1, generator=gen, dtype=torch.float64)
        loss = dgvr_loss(den, x0, GuidanceBundle(alpha=0.0), sched, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return den.requires_grad_(False), sched


def test_trained_toy_matches_target_moments(gaussian_toy):
    den, sched = gaussian_toy
    x = sample(den, GuidanceBundle(alpha=0.0), sched, (10_000, 1), steps=50, seed=1, dtype=torch.float64)
    assert abs(x.mean().item() - 2.0) < 0.05 * 2.0
    assert abs(x.var().item() - 0.25) < 0.05 * 0.25


def test_ddim_inversion_round_trip(gaussian_toy):
    den, sched = gaussian_toy
    x0 = 2.0 + 0.5 * _rand(200, 1)
    xt = ddim_invert(den, x0, sched, 20)
    assert torch.equal(xt, ddim_invert(den, x0, sched, 20))
    back = sample(den, GuidanceBundle(alpha=0.0), sched, (200, 1), steps=20, noise=xt, dtype=torch.float64)
    assert torch.mean((back - x0) ** 2).item() < 1e-3


def test_single_step_inversion_is_exact_for_linear_denoiser():
    sched = make_schedule(10, 1e-4, 0.1)
    den = _Linear2().requires_grad_(False)
    x0 = _rand(5, 3)
    xt = ddim_invert(den, x0, sched, 1, fixed_point_iters=60)
    back = sample(den, GuidanceBundle(alpha=0.0), sched, (5, 3), steps=1, noise=xt, dtype=torch.float64)
    assert torch.allclose(back, x0, atol=1e-10, rtol=0)


def test_inversion_trajectory_and_step_check():
    sched = make_schedule(10, 1e-4, 0.1)
    traj = ddim_invert(_Linear2(), _rand(2, 3), sched, 5, return_trajectory=True)
    assert len(traj) == 6
    with pytest.raises(ValidationError):
        ddim_invert(_Linear2(), _rand(2, 3), sched, 0)


# ---- decoding

def test_decode_range_shape_and_determinism():
    torch.manual_seed(0)
    ae = FrameVAE(latent_channels=4, width=8, height=16, image_width=16)
    x0 = torch.randn(3, 4, 2, 2) * 50
    a, b = decode_video(ae, x0), decode_video(ae, x0)
    assert a.frames.shape == (3, 16, 16, 3)
    assert a.frames.min() >= 0.0 and a.frames.max() <= 1.0
    np.testing.assert_array_equal(a.frames, b.frames)


def test_decode_rejects_wrong_latent_shape():
    ae = FrameVAE(latent_channels=4, width=8, height=16, image_width=16)
    with pytest.raises(ValidationError):
        decode_video(ae, torch.randn(3, 4, 3, 2))
