"""Noise schedule and DDIM stepping."""
from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdrag import (
    Conditioning,
    Latent,
    NoiseSchedule,
    ParameterError,
    add_noise,
    build_schedule,
    ddim_denoise,
    ddim_invert,
    ddim_step,
    ddim_transition,
)

from conftest import constant_backend, perfect_eps_backend


class TestBuildSchedule:
    def test_boundary_values(self):
        s = build_schedule(50)
        assert s.alpha[0] == 1.0
        assert s.sigma[0] == 0.0

    def test_default_length_and_monotonicity(self):
        s = build_schedule(50)
        assert len(s.alpha) == 51 and len(s.sigma) == 51
        assert (np.diff(s.alpha) < 0).all()
        assert (np.diff(s.sigma) > 0).all()

    def test_cumprod_oracle(self):
        # independent oracle: direct product over the same beta ramp
        betas = np.linspace(1e-4, 0.02, 10)
        expected_alpha_10 = math.sqrt(float(np.prod(1.0 - betas)))
        s = build_schedule(10, (1e-4, 0.02))
        assert abs(s.alpha[10] - expected_alpha_10) < 1e-10

    @pytest.mark.parametrize("num_steps", [10, 25, 50, 100])
    def test_invariants_across_sizes(self, num_steps):
        s = build_schedule(num_steps)
        assert np.allclose(s.alpha**2 + s.sigma**2, 1.0, atol=1e-6)
        assert (np.diff(s.alpha) < 0).all() and (np.diff(s.sigma) > 0).all()
        assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0

    @pytest.mark.parametrize(
        "num_steps,beta_range",
        [(0, (1e-4, 0.02)), (10, (0.0, 0.02)), (10, (0.02, 0.02)), (10, (1e-4, 1.0))],
    )
    def test_parameter_errors(self, num_steps, beta_range):
        with pytest.raises(ParameterError):
            build_schedule(num_steps, beta_range)

    def test_json_roundtrip(self):
        s = build_schedule(25, (2e-3, 0.1))
        s2 = NoiseSchedule.from_dict(s.to_dict())
        assert s2.num_steps == 25
        np.testing.assert_allclose(s2.alpha, s.alpha)


class TestAddNoise:
    def test_t0_identity(self):
        s = build_schedule(10)
        z0 = Latent(torch.randn(1, 4, 4), step=0)
        out = add_noise(z0, torch.randn(1, 4, 4), 0, s)
        assert torch.equal(out.data, z0.data)
        assert out.step == 0

    def test_scalar_formula(self):
        # alpha=0.8, sigma=0.6, z0=1.0, eps=0.5 -> 0.8*1.0 + 0.6*0.5 = 1.1
        s = NoiseSchedule(1, np.array([1.0, 0.8]), np.array([0.0, 0.6]), (0.1, 0.2))
        z0 = Latent(torch.ones(1, 1, 1, dtype=torch.float64), step=0)
        out = add_noise(z0, torch.full((1, 1, 1), 0.5, dtype=torch.float64), 1, s)
        assert abs(float(out.data) - 1.1) < 1e-12
        assert out.step == 1

    def test_moment_oracle(self):
        # empirical moments over 1e4 samples: Var = alpha^2 Var(z0) + sigma^2
        s = build_schedule(50)
        t = 35
        gen = torch.Generator().manual_seed(0)
        z0 = Latent(0.7 * torch.randn(1, 100, 100, generator=gen), step=0)
        eps = torch.randn(1, 100, 100, generator=gen)
        out = add_noise(z0, eps, t, s)
        expected_var = float(s.alpha[t]) ** 2 * 0.49 + float(s.sigma[t]) ** 2
        assert abs(float(out.data.var()) - expected_var) / expected_var < 0.05

    def test_shape_mismatch(self):
        s = build_schedule(10)
        z0 = Latent(torch.randn(1, 4, 4), step=0)
        with pytest.raises(ParameterError):
            add_noise(z0, torch.randn(1, 5, 4), 3, s)

    @given(t=st.integers(min_value=0, max_value=10))
    @settings(max_examples=11, deadline=None)
    def test_bookkeeping(self, t):
        s = build_schedule(10)
        z0 = Latent(torch.randn(2, 3, 5), step=0, seed=7)
        out = add_noise(z0, torch.randn(2, 3, 5), t, s)
        assert out.data.shape == z0.data.shape
        assert out.step == t and out.seed == 7


class TestDdimStep:
    def test_equal_steps_rejected(self):
        s = build_schedule(10)
        z = Latent(torch.randn(1, 2, 2), step=3)
        with pytest.raises(ParameterError):
            ddim_step(z, torch.zeros(1, 2, 2), 3, 3, s)

    def test_down_then_up_recovers(self):
        s = build_schedule(10)
        z = Latent(torch.randn(1, 4, 4, dtype=torch.float64), step=7)
        eps = torch.randn(1, 4, 4, dtype=torch.float64)
        down = ddim_step(z, eps, 7, 6, s)
        up = ddim_step(down, eps, 6, 7, s)
        assert torch.allclose(up.data, z.data, atol=1e-10)

    def test_scalar_closed_form_oracle(self):
        # hand evaluation of the update rule with pinned coefficients
        a_from, s_from, a_to = 0.8, 0.6, 0.9
        s_to = math.sqrt(1.0 - 0.81)
        z_val, eps_val = 1.0, 0.5
        expected = a_to * (z_val - s_from * eps_val) / a_from + s_to * eps_val
        sched = NoiseSchedule(
            2, np.array([1.0, a_from, a_to]), np.array([0.0, s_from, s_to]), (0.1, 0.2)
        )
        z = Latent(torch.full((1, 1, 1), z_val, dtype=torch.float64), step=1)
        out = ddim_step(z, torch.full((1, 1, 1), eps_val, dtype=torch.float64), 1, 2, sched)
        assert abs(float(out.data) - expected) < 1e-12

    def test_transition_is_differentiable(self):
        s = build_schedule(10)
        z = torch.randn(1, 2, 2, requires_grad=True)
        out = ddim_transition(z, torch.randn(1, 2, 2), 5, 4, s)
        out.sum().backward()
        assert z.grad is not None


class TestInversionDenoising:
    def test_trajectory_length(self, tiny_schedule):
        shape = (1, 4, 4)
        backend = constant_backend(shape, tiny_schedule, 0.1)
        z0 = Latent(torch.randn(shape), step=0)
        traj = ddim_invert(z0, 7, backend, Conditioning())
        assert len(traj) == 8
        assert [z.step for z in traj] == list(range(8))

    def test_t_target_zero(self, tiny_schedule):
        shape = (1, 4, 4)
        backend = constant_backend(shape, tiny_schedule)
        z0 = Latent(torch.randn(shape), step=0)
        traj = ddim_invert(z0, 0, backend, Conditioning())
        assert len(traj) == 1
        assert torch.equal(traj[0].data, z0.data)

    def test_perfect_eps_matches_closed_form(self):
        # oracle: closed-form noising with a perfect-eps stub
        s = build_schedule(50)
        shape = (1, 6, 6)
        gen = torch.Generator().manual_seed(3)
        z0 = Latent(torch.randn(shape, generator=gen), step=0)
        eps = torch.randn(shape, generator=gen)
        backend = perfect_eps_backend(shape, s, eps)
        traj = ddim_invert(z0, 35, backend, Conditioning())
        assert len(traj) == 36
        for t in (1, 10, 35):
            closed = float(s.alpha[t]) * z0.data + float(s.sigma[t]) * eps
            assert torch.allclose(traj[t].data, closed, atol=1e-6)

    def test_constant_stub_roundtrip_exact(self, tiny_schedule):
        shape = (2, 4, 4)
        backend = constant_backend(shape, tiny_schedule, 0.25)
        z0 = Latent(torch.randn(shape, dtype=torch.float64), step=0)
        traj = ddim_invert(z0, 10, backend, Conditioning())
        rec = ddim_denoise(traj[-1], backend, Conditioning())
        assert torch.allclose(rec.data, z0.data, atol=1e-10)

    def test_denoise_step_count(self):
        s = build_schedule(50)
        shape = (1, 4, 4)
        backend = constant_backend(shape, s, 0.0)
        z = Latent(torch.randn(shape), step=35)
        ddim_denoise(z, backend, Conditioning())
        assert backend.calls == 35

    def test_invert_requires_clean_latent(self, tiny_schedule):
        backend = constant_backend((1, 4, 4), tiny_schedule)
        z = Latent(torch.randn(1, 4, 4), step=2)
        with pytest.raises(ParameterError):
            ddim_invert(z, 5, backend, Conditioning())
