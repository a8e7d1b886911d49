"""TaOx memristor compact model and the memristive CellNN (M-CellNN) cell.

Each M-CellNN cell carries a second state ``m`` (the memristor state, kept in
``[m_min, 1]``). The memristor sits in parallel with the cell capacitor, so
its voltage is the cell state ``x`` and its current is subtracted from the
CellNN state equation::

    dx/dt = -x + A (*) y(x) + B (*) u + Z - i_m(m, x)
    dm/dt = g(m, x)

with ``g`` the TaOx switching rate law and ``i_m = v * G(m, v)``. The current
is substituted into the rate law explicitly, so each Euler step is explicit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import numba
import numpy as np
import torch

from .cellnn import (
    EulerStepper,
    SolverConfig,
    TemplateSet,
    _batched,
    _check_shapes,
    _rhs,
    control_term,
    guard_state,
    initial_state,
)
from .tensor_core import as_grid

# Bounds applied to every exponent and sinh argument before evaluation.
EXP_CLAMP = 50.0


@dataclass(frozen=True)
class TaOxParams:
    """Constants of the TaOx rate law and memductance.

    ``rate_off``/``rate_on`` are the amplitudes of the OFF (v < 0) and ON
    (v > 0) switching branches. Memductance is
    ``G(m, v) = G_on * m + G_off * exp(b * sqrt(|v|)) * (1 - m)``.
    The shipped defaults are illustrative, see ``data/taox_defaults.json``.
    """

    rate_off: float = 0.5
    rate_on: float = 0.5
    sigma_off: float = 0.5
    sigma_on: float = 0.5
    m_off: float = 0.1
    m_on: float = 1.0
    beta: float = 1.0
    sigma_p: float = 1.0
    G_on: float = 0.5
    G_off: float = 0.05
    b: float = 1.0
    m_min: float = 1e-3

    def __post_init__(self):
        if self.sigma_off == 0 or self.sigma_on == 0:
            raise ValueError("sigma_off and sigma_on must be non-zero")
        if self.sigma_p == 0:
            raise ValueError("sigma_p must be non-zero")
        if not (self.m_off > 0 and self.m_on > 0):
            raise ValueError("m_off and m_on must be positive")
        if not 0 < self.m_min < 1:
            raise ValueError(f"m_min must lie in (0, 1), got {self.m_min}")

    @classmethod
    def from_file(cls, path) -> "TaOxParams":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known - {"_note"}
        if unknown:
            raise ValueError(f"unknown TaOx parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in raw.items() if k in known})

    @classmethod
    def defaults(cls) -> "TaOxParams":
        with resources.files("celldiff").joinpath("data/taox_defaults.json").open() as fh:
            raw = json.load(fh)
        return cls(**{k: float(v) for k, v in raw.items() if not k.startswith("_")})

    @classmethod
    def degenerate(cls, **overrides) -> "TaOxParams":
        """No current and no switching: the M-CellNN collapses to a CellNN."""
        base = dict(rate_off=0.0, rate_on=0.0, G_on=0.0, G_off=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def _tensor(v, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(v, dtype=dtype)


def _sqrt_abs(v: torch.Tensor) -> torch.Tensor:
    # exact 0 at v = 0 with a finite (zero) derivative there
    a = v.abs()
    pos = a > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, a, torch.ones_like(a))), torch.zeros_like(a))


def memductance(m, vm, p: TaOxParams) -> torch.Tensor:
    m = _tensor(m)
    vm = _tensor(vm, m)
    return p.G_on * m + p.G_off * torch.exp((p.b * _sqrt_abs(vm)).clamp(max=EXP_CLAMP)) * (1 - m)


def taox_current(m, vm, p: TaOxParams) -> torch.Tensor:
    """Memristor current ``i_m = v_m * G(m, v_m)``."""
    m = _tensor(m)
    vm = _tensor(vm, m)
    return vm * memductance(m, vm, p)


def taox_rate(m, vm, p: TaOxParams, im=None) -> torch.Tensor:
    """State derivative ``dm/dt`` of the TaOx model.

    The OFF branch is gated by ``step(-v)``, the ON branch by ``step(v)``,
    with ``step(0) = 0``. ``im`` may be passed when the current is already known.
    """
    m = _tensor(m)
    vm = _tensor(vm, m)
    if im is None:
        im = taox_current(m, vm, p)
    power = im * vm
    m_safe = m.clamp(min=p.m_min)

    denom = 1 + p.beta * power
    denom_safe = torch.where(denom == 0, torch.full_like(denom, 1e-300), denom)
    off = (
        p.rate_off
        * torch.sinh((vm / p.sigma_off).clamp(-EXP_CLAMP, EXP_CLAMP))
        * torch.exp(-(p.m_off**2) / m_safe**2)
        * torch.exp((1 / denom_safe).clamp(-EXP_CLAMP, EXP_CLAMP))
    )
    on = (
        p.rate_on
        * torch.sinh((vm / p.sigma_on).clamp(-EXP_CLAMP, EXP_CLAMP))
        * torch.exp(-(m**2) / p.m_on**2)
        * torch.exp((power / p.sigma_p).clamp(-EXP_CLAMP, EXP_CLAMP))
    )
    zero = torch.zeros_like(off)
    return torch.where(vm < 0, off, zero) + torch.where(vm > 0, on, zero)


@numba.njit(cache=True)
def _taox_kernel(v, m, out, rate_off, rate_on, sigma_off, sigma_on, m_off, m_on,
                 beta, sigma_p, G_on, G_off, b, m_min, lim):
    """Per element: current, rate and their partials in (v, m), written to ``out[0..5]``.

    Only the branch selected by the sign of ``v`` is evaluated.
    """
    for k in range(v.size):
        vk = v[k]
        mk = m[k]
        s = math.sqrt(abs(vk))
        bs = b * s
        if bs <= lim:
            E = math.exp(bs)
            dE = b * E
        else:
            E = math.exp(lim)
            dE = 0.0
        G = G_on * mk + G_off * E * (1.0 - mk)
        im = vk * G
        # v * d(sqrt|v|)/dv = sqrt|v| / 2, finite at v = 0
        di_dv = G + G_off * (1.0 - mk) * dE * s * 0.5
        di_dm = vk * (G_on - G_off * E)
        out[0, k] = im
        out[1, k] = 0.0
        out[2, k] = di_dv
        out[3, k] = di_dm
        out[4, k] = 0.0
        out[5, k] = 0.0
        if vk == 0.0:
            continue
        power = im * vk
        dP_dv = im + vk * di_dv
        dP_dm = vk * di_dm
        if vk < 0.0:
            amp = rate_off
            sig = sigma_off
            ms = mk if mk >= m_min else m_min
            state_arg = -(m_off * m_off) / (ms * ms)
            dstate = 2.0 * m_off * m_off / (ms * ms * ms) if mk >= m_min else 0.0
            den = 1.0 + beta * power
            if den == 0.0:
                den = 1e-300
            c = 1.0 / den
            dc = -beta / (den * den)
        else:
            amp = rate_on
            sig = sigma_on
            state_arg = -(mk * mk) / (m_on * m_on)
            dstate = -2.0 * mk / (m_on * m_on)
            c = power / sigma_p
            dc = 1.0 / sigma_p
        if c > lim:
            c = lim
            dc = 0.0
        elif c < -lim:
            c = -lim
            dc = 0.0
        a = vk / sig
        da = 1.0 / sig
        if a > lim:
            a = lim
            da = 0.0
        elif a < -lim:
            a = -lim
            da = 0.0
        tail = amp * math.exp(state_arg) * math.exp(c)
        g = math.sinh(a) * tail
        out[1, k] = g
        out[4, k] = math.cosh(a) * da * tail + g * dc * dP_dv
        out[5, k] = g * dstate + g * dc * dP_dm


@numba.njit(cache=True)
def _taox_values(v, m, out, rate_off, rate_on, sigma_off, sigma_on, m_off, m_on,
                 beta, sigma_p, G_on, G_off, b, m_min, lim):
    """Current and rate only, for evaluation without gradients."""
    for k in range(v.size):
        vk = v[k]
        mk = m[k]
        E = math.exp(min(b * math.sqrt(abs(vk)), lim))
        im = vk * (G_on * mk + G_off * E * (1.0 - mk))
        out[0, k] = im
        if vk == 0.0:
            out[1, k] = 0.0
            continue
        power = im * vk
        if vk < 0.0:
            ms = mk if mk >= m_min else m_min
            den = 1.0 + beta * power
            if den == 0.0:
                den = 1e-300
            expo = -(m_off * m_off) / (ms * ms) + max(-lim, min(1.0 / den, lim))
            out[1, k] = rate_off * math.sinh(max(-lim, min(vk / sigma_off, lim))) * math.exp(expo)
        else:
            expo = -(mk * mk) / (m_on * m_on) + max(-lim, min(power / sigma_p, lim))
            out[1, k] = rate_on * math.sinh(max(-lim, min(vk / sigma_on, lim))) * math.exp(expo)


def _taox_local(v: torch.Tensor, m: torch.Tensor, p: TaOxParams):
    """Current, rate and their partial derivatives in ``v`` and ``m``, elementwise."""
    vv = np.ascontiguousarray(v.detach().numpy()).reshape(-1)
    mm = np.ascontiguousarray(m.detach().numpy()).reshape(-1)
    out = np.empty((6, vv.size), dtype=vv.dtype)
    _taox_kernel(vv, mm, out, p.rate_off, p.rate_on, p.sigma_off, p.sigma_on, p.m_off, p.m_on,
                 p.beta, p.sigma_p, p.G_on, p.G_off, p.b, p.m_min, EXP_CLAMP)
    res = torch.from_numpy(out).view(6, *v.shape)
    return tuple(res[i] for i in range(6))


class _TaOxCell(torch.autograd.Function):
    """``(i_m, dm/dt)`` with hand-derived local derivatives.

    Equivalent to :func:`taox_current` / :func:`taox_rate` but stores four
    derivative grids instead of the whole elementwise graph, which keeps long
    unrolled integrations within memory.
    """

    @staticmethod
    def forward(ctx, v, m, p):
        im, dm, *partials = _taox_local(v, m, p)
        ctx.save_for_backward(*partials)
        return im, dm

    @staticmethod
    def backward(ctx, g_im, g_dm):
        di_dv, di_dm, dg_dv, dg_dm = ctx.saved_tensors
        gv = g_im * di_dv + g_dm * dg_dv
        gm = g_im * di_dm + g_dm * dg_dm
        return gv, gm, None


def taox_cell(v, m, p: TaOxParams):
    """Fused ``(taox_current(m, v), taox_rate(m, v))`` for integration loops."""
    if torch.is_grad_enabled() and (v.requires_grad or m.requires_grad):
        return _TaOxCell.apply(v, m, p)
    vv = np.ascontiguousarray(v.detach().numpy()).reshape(-1)
    mm = np.ascontiguousarray(m.detach().numpy()).reshape(-1)
    out = np.empty((2, vv.size), dtype=vv.dtype)
    _taox_values(vv, mm, out, p.rate_off, p.rate_on, p.sigma_off, p.sigma_on, p.m_off, p.m_on,
                 p.beta, p.sigma_p, p.G_on, p.G_off, p.b, p.m_min, EXP_CLAMP)
    res = torch.from_numpy(out).view(2, *v.shape)
    return res[0], res[1]


def mcellnn_rhs(x, m, u, t: TemplateSet, p: TaOxParams, cfg: SolverConfig = SolverConfig()):
    """``(dx/dt, dm/dt)`` of the memristive cell array for constant input ``u``."""
    x, squeeze = _batched(as_grid(x, t.A.dtype))
    m, _ = _batched(as_grid(m, t.A.dtype))
    u, _ = _batched(as_grid(u, t.A.dtype))
    _check_shapes(x, u, t)
    if m.shape != x.shape:
        raise ValueError(f"memristor state shape {tuple(m.shape)} differs from cell state {tuple(x.shape)}")
    im = taox_current(m, x, p)
    dx = _rhs(x, control_term(u, t, cfg.boundary), t, cfg) - im
    dm = taox_rate(m, x, p, im=im)
    if squeeze:
        return dx.squeeze(0), dm.squeeze(0)
    return dx, dm


def integrate_mstates(
    u,
    t: TemplateSet,
    p: TaOxParams,
    cfg: SolverConfig = SolverConfig(),
    m0=0.5,
    record_m: bool = False,
):
    """Co-integrate ``(x, m)`` with forward Euler, clamping ``m`` after every step.

    The cell update is the CellNN step minus ``dt * i_m``; ``m`` advances by
    ``dt * g(m, x)`` using the pre-step state. ``m0`` is a scalar or a grid
    shaped like the state. Returns ``(x_T, m_T)``, or
    ``(x_T, m_T, m_history)`` with ``record_m``.
    """
    u, squeeze = _batched(as_grid(u, t.A.dtype))
    x = initial_state(u, t, cfg)
    _check_shapes(x, u, t)
    m0 = torch.as_tensor(m0, dtype=x.dtype)
    if m0.dim() == 3 and squeeze:
        m0 = m0.unsqueeze(0)
    if m0.dim() and tuple(m0.shape) != tuple(x.shape):
        raise ValueError(f"initial memory state shape {tuple(m0.shape)} differs from cell state {tuple(x.shape)}")
    m = m0.expand_as(x).clone().clamp(p.m_min, 1.0)
    step = EulerStepper(u, t, cfg)
    history = [m.detach().clone()] if record_m else None
    for k in range(cfg.steps):
        im, dm = taox_cell(x, m, p)
        x = step(x) - cfg.dt * im
        m = (m + cfg.dt * dm).clamp(p.m_min, 1.0)
        guard_state(x, k + 1)
        if record_m:
            history.append(m.detach().clone())
    if squeeze:
        x, m = x.squeeze(0), m.squeeze(0)
    if record_m:
        return x, m, torch.stack(history)
    return x, m


def integrate_mlayer(u, t: TemplateSet, p: TaOxParams, cfg: SolverConfig = SolverConfig(), m0: float = 0.5):
    """Layer output ``y(x(T))`` of the M-CellNN."""
    x, _ = integrate_mstates(u, t, p, cfg, m0)
    return cfg.output(x)


@dataclass
class SweepTrace:
    t: np.ndarray
    v: np.ndarray
    i: np.ndarray
    m: np.ndarray

    def __len__(self):
        return len(self.t)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "v", "i", "m"])
            for row in zip(self.t, self.v, self.i, self.m):
                w.writerow([repr(float(x)) for x in row])


def memristor_sweep(
    p: TaOxParams,
    amplitude: float = 1.0,
    frequency: float = 1.0,
    cycles: int = 3,
    dt: float | None = None,
    m0: float = 0.5,
) -> SweepTrace:
    """Drive an isolated memristor with ``v(t) = amplitude * sin(2 pi f t)``.

    ``m`` is stepped with forward Euler and clamped to ``[m_min, 1]``. The
    default ``dt`` gives 1000 samples per cycle.
    """
    if frequency <= 0 or cycles <= 0:
        raise ValueError("frequency and cycles must be positive")
    period = 1.0 / frequency
    if dt is None:
        dt = period / 1000
    if period / dt < 100 - 1e-9:
        raise ValueError(f"dt={dt:g} resolves only {period / dt:.1f} samples per cycle (need >= 100)")
    n = int(round(cycles * period / dt)) + 1
    ts = np.arange(n, dtype=np.float64) * dt
    vs = amplitude * np.sin(2 * math.pi * frequency * ts)
    # zero crossings land on exact zeros so the pinch is exact
    vs[np.abs(vs) < 1e-12 * max(abs(amplitude), 1e-300)] = 0.0
    ms = np.empty(n)
    is_ = np.empty(n)
    m = torch.tensor(min(max(m0, p.m_min), 1.0), dtype=torch.float64)
    with torch.no_grad():
        for k in range(n):
            v = torch.tensor(vs[k], dtype=torch.float64)
            im = taox_current(m, v, p)
            ms[k] = m.item()
            is_[k] = im.item()
            m = (m + dt * taox_rate(m, v, p, im=im)).clamp(p.m_min, 1.0)
    return SweepTrace(ts, vs, is_, ms)
