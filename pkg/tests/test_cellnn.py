import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from celldiff.cellnn import (
    InitialState,
    SolverConfig,
    TemplateSet,
    cellnn_rhs,
    conv_equivalent,
    heat_diffusion_demo,
    init_templates,
    integrate_layer,
    integrate_states,
    leaky_nonlinearity,
    output_nonlinearity,
)
from celldiff.tensor_core import gradcheck_tensors

from oracles import direct_sum, heat_step_np

# (1 - 0.01) ** 100 and 1 - that, evaluated once in exact decimal arithmetic
DECAY_100 = 0.36603234127322950
RISE_100 = 0.63396765872677050


def np_leaky(x, alpha):
    return np.where(x > 1, 1 + alpha * (x - 1), np.where(x < -1, -1 + alpha * (x + 1), x))


def np_rhs(x, u, A, B, Z, alpha=0.01):
    return -x + direct_sum(np_leaky(x, alpha), A, 1, "zero") + direct_sum(u, B, 1, "zero") + Z[:, None, None]


def test_output_examples():
    assert output_nonlinearity(0.0) == 0.0
    assert output_nonlinearity(2.0) == 1.0
    assert output_nonlinearity(-0.5) == -0.5


def test_leaky_examples():
    assert leaky_nonlinearity(2.0, 0.01) == pytest.approx(1.01, abs=1e-15)
    assert leaky_nonlinearity(-2.0, 0.01) == pytest.approx(-1.01, abs=1e-15)
    for a in (0.0, 0.01, 0.5):
        assert leaky_nonlinearity(0.3, a) == 0.3
    with pytest.raises(ValueError):
        leaky_nonlinearity(1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-1e6, 1e6, allow_nan=False))
def test_saturation_matches_absolute_value_form(x):
    ref = 0.5 * abs(x + 1) - 0.5 * abs(x - 1)
    assert abs(output_nonlinearity(x) - ref) <= 1e-15 * max(1.0, abs(x))
    assert -1.0 <= output_nonlinearity(x) <= 1.0
    assert output_nonlinearity(x) == leaky_nonlinearity(x, 0.0)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-50, 50), h=st.floats(0, 10), alpha=st.floats(0, 0.99))
def test_nonlinearities_odd_and_monotone(x, h, alpha):
    for f in (output_nonlinearity, lambda v: leaky_nonlinearity(v, alpha)):
        assert f(-x) == -f(x)
        assert f(x + h) >= f(x)


@pytest.mark.parametrize("knee", [-1.0, 1.0])
def test_leaky_continuous_at_knees(knee):
    for a in (0.01, 0.3):
        assert abs(leaky_nonlinearity(knee + 1e-12, a) - leaky_nonlinearity(knee - 1e-12, a)) < 1e-11


def test_leaky_slope_outside_unit_interval():
    x = torch.tensor([-3.0, -0.5, 0.5, 3.0], dtype=torch.float64, requires_grad=True)
    leaky_nonlinearity(x, 0.01).sum().backward()
    assert x.grad.tolist() == [0.01, 1.0, 1.0, 0.01]


def test_rhs_pure_decay_and_bias():
    t = TemplateSet.zeros(1, 1)
    x = torch.full((1, 3, 3), 0.4, dtype=torch.float64)
    assert torch.allclose(cellnn_rhs(x, torch.zeros_like(x), t), torch.full_like(x, -0.4), atol=0)
    t.Z[0] = 0.7
    zero = torch.zeros(1, 3, 3, dtype=torch.float64)
    assert torch.equal(cellnn_rhs(zero, zero, t), torch.full_like(zero, 0.7))


def test_rhs_matches_direct_summation():
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 2, (2, 6, 6))
    u = rng.uniform(-1, 1, (2, 6, 6))
    A, B, Z = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    got = cellnn_rhs(torch.from_numpy(x), torch.from_numpy(u), TemplateSet(*map(torch.from_numpy, (A, B, Z))))
    np.testing.assert_allclose(got.numpy(), np_rhs(x, u, A, B, Z), rtol=0, atol=1e-12)


def test_rhs_shape_errors():
    t = TemplateSet.zeros(2, 1)
    with pytest.raises(ValueError, match="channels"):
        cellnn_rhs(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4), t)
    with pytest.raises(ValueError):
        TemplateSet(torch.zeros(2, 2, 3, 3), torch.zeros(2, 1, 5, 5), torch.zeros(2))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0)
    with pytest.raises(ValueError):
        SolverConfig(steps=0)
    with pytest.raises(ValueError):
        SolverConfig(alpha=1.0)


def test_copy_input_decay_closed_form():
    x0 = torch.linspace(-0.9, 0.9, 16, dtype=torch.float64).reshape(1, 4, 4)
    cfg = SolverConfig(initial_state=InitialState.COPY_INPUT)
    x = integrate_states(x0, TemplateSet.zeros(1, 1), cfg)
    assert torch.allclose(x, x0 * DECAY_100, rtol=1e-12, atol=0)
    assert torch.allclose(integrate_layer(x0, TemplateSet.zeros(1, 1), cfg), x0 * DECAY_100, rtol=1e-12, atol=0)


def test_held_input_rise_closed_form():
    u = torch.linspace(-0.95, 0.95, 25, dtype=torch.float64).reshape(1, 5, 5)
    x = integrate_states(u, TemplateSet.identity_control(1), SolverConfig())
    assert torch.allclose(x, u * RISE_100, rtol=1e-12, atol=1e-16)


def test_single_step_hand_oracle():
    rng = np.random.default_rng(5)
    u = rng.uniform(-1, 1, (2, 5, 5))
    x0 = rng.uniform(-1.5, 1.5, (2, 5, 5))
    A, B, Z = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    t = TemplateSet(*map(torch.from_numpy, (A, B, Z)))
    x1 = integrate_states(torch.from_numpy(u), t, SolverConfig(steps=1), x0=torch.from_numpy(x0))
    np.testing.assert_allclose(x1.numpy(), x0 + 0.01 * np_rhs(x0, u, A, B, Z), rtol=0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.integers(1, 60))
def test_no_feedback_contracts_to_drive(seed, k):
    g = torch.Generator().manual_seed(seed)
    t = init_templates(2, 2, 1, g)
    t.A.zero_()
    u = torch.rand(1, 2, 5, 5, generator=g, dtype=torch.float64) * 2 - 1
    x0 = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    drive = torch.nn.functional.conv2d(u, t.B, padding=1) + t.Z.view(1, -1, 1, 1)
    xk = integrate_states(u, t, SolverConfig(steps=k), x0=x0)
    bound = (x0 - drive).abs().max() * (1 - 0.01) ** k
    assert (xk - drive).abs().max() <= bound * (1 + 1e-12)


def test_conv_equivalent_examples():
    u = torch.rand(1, 6, 6, dtype=torch.float64) * 2 - 1
    centre = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    centre[0, 0, 1, 1] = 1
    zero_bias = torch.zeros(1, dtype=torch.float64)
    assert torch.equal(conv_equivalent(u, centre, zero_bias), u)
    c = torch.full((1, 6, 6), -0.35, dtype=torch.float64)
    avg = torch.full((1, 1, 3, 3), 1 / 9, dtype=torch.float64)
    cfg = SolverConfig(boundary="replicate")
    assert torch.allclose(conv_equivalent(c, avg, zero_bias, cfg), c, atol=1e-15)
    # zero padding only touches the border
    assert torch.allclose(conv_equivalent(c, avg, zero_bias)[:, 1:-1, 1:-1], c[:, 1:-1, 1:-1], atol=1e-15)


def test_conv_equivalent_is_long_horizon_limit():
    g = torch.Generator().manual_seed(7)
    t = init_templates(3, 2, 1, g)
    t.A.zero_()
    u = torch.rand(2, 2, 6, 6, generator=g, dtype=torch.float64) * 2 - 1
    cfg = SolverConfig(steps=1000)
    diff = (integrate_layer(u, t, cfg) - conv_equivalent(u, t.B, t.Z, cfg)).abs().max()
    assert diff < 1e-4


def test_blowup_names_step():
    t = TemplateSet.zeros(1, 1)
    t.A[0, 0, 1, 1] = 5e3
    t.Z[0] = 1.0
    with pytest.raises(FloatingPointError, match="step"):
        integrate_layer(torch.zeros(1, 4, 4, dtype=torch.float64), t, SolverConfig(steps=200))


def test_layer_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(0)
    t = init_templates(2, 2, 1, g)
    A, B, Z = (p.clone().requires_grad_(True) for p in (t.A, t.B, t.Z))
    u = torch.rand(1, 2, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    target = torch.rand(1, 2, 8, 8, generator=g, dtype=torch.float64) - 0.5
    cfg = SolverConfig(steps=20)
    errs = gradcheck_tensors(lambda: ((integrate_layer(u, TemplateSet(A, B, Z), cfg) - target) ** 2).mean(),
                             {"A": A, "B": B, "Z": Z})
    assert max(errs.values()) < 1e-4


def test_heat_constant_field_stays_constant():
    x0 = torch.full((1, 6, 6), 0.25, dtype=torch.float64)
    frames = heat_diffusion_demo(x0, 1.0, 50, 0.01)
    assert torch.allclose(frames, x0.expand_as(frames), atol=1e-15)


def test_heat_hot_cell_conserves_and_spreads():
    x0 = torch.zeros(1, 9, 9, dtype=torch.float64)
    x0[0, 4, 4] = 1.0
    frames = heat_diffusion_demo(x0, 2.0, 200, 0.05)
    sums = frames.sum(dim=(1, 2, 3))
    assert ((sums - 1.0).abs() <= 1e-9).all()
    var = frames.reshape(len(frames), -1).var(dim=1, unbiased=False)
    assert (var[1:] < var[:-1]).all()


def test_heat_matches_explicit_stepper():
    rng = np.random.default_rng(2)
    x = rng.uniform(-0.5, 0.5, (7, 8))
    lam, dt, steps = 1.5, 0.05, 120
    frames = heat_diffusion_demo(torch.from_numpy(x[None]), lam, steps, dt)
    for k in range(1, steps + 1):
        x = heat_step_np(x, lam, dt)
        assert np.abs(frames[k, 0].numpy() - x).max() <= 1e-9


def test_heat_frame_sampling():
    frames = heat_diffusion_demo(torch.zeros(1, 3, 3, dtype=torch.float64), 1.0, 10, 0.01, every=5)
    assert frames.shape == (3, 1, 3, 3)


def test_heat_guards():
    x0 = torch.zeros(1, 4, 4, dtype=torch.float64)
    with pytest.raises(ValueError, match="1/8"):
        heat_diffusion_demo(x0, 20.0, 5, 0.01)
    with pytest.raises(ValueError, match="linear region"):
        heat_diffusion_demo(x0 + 1.5, 1.0, 5, 0.01)


def test_init_templates_deterministic_and_contractive():
    a = init_templates(4, 3, 1, torch.Generator().manual_seed(9))
    b = init_templates(4, 3, 1, torch.Generator().manual_seed(9))
    assert torch.equal(a.A, b.A) and torch.equal(a.B, b.B) and torch.equal(a.Z, b.Z)
    assert a.A.abs().max() <= 0.1 / 36
    assert a.num_parameters() == 4 * 4 * 9 + 4 * 3 * 9 + 4
    assert math.isclose(DECAY_100 + RISE_100, 1.0, rel_tol=1e-15)
