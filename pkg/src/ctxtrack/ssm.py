"""Selective state-space scanning with zero-order-hold discretisation.

Per channel ``d`` and state slot ``n`` the continuous system
``h' = A h + B x, y = C h`` is discretised with step ``delta``::

    a_bar = exp(delta * A)
    b_bar = (exp(delta * A) - 1) / (delta * A) * delta * B

and then run left to right: ``h_t = a_bar_t h_{t-1} + b_bar_t x_t``,
``y_t = sum_n C_t[n] h_t[:, n]``. ``delta``, ``B`` and ``C`` are produced from
the input tokens (the selection mechanism); ``A`` is diagonal, stored as
``a_log`` with ``A = -exp(a_log)`` so it is always strictly negative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, Module

SERIES_CUTOFF = 1e-6
_DPHI_CUTOFF = 1e-3


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with a 3-term series near zero."""
    small = np.abs(z) < SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2 + z * z / 6, np.expm1(safe) / safe)


def _dphi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < _DPHI_CUTOFF
    safe = np.where(small, 1.0, z)
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    return np.where(small, 0.5 + z / 3 + z * z / 8 + z * z * z / 30, exact)


def _discretize_np(delta: np.ndarray, A: np.ndarray, B: np.ndarray):
    """Batched ZOH on raw arrays.

    delta [..., D], A [D, N], B [..., N] -> a_bar, b_bar, phi, z, all [..., D, N].
    """
    z = delta[..., :, None] * A
    phi = _phi(z)
    a_bar = np.exp(z)
    b_bar = phi * delta[..., :, None] * B[..., None, :]
    return a_bar, b_bar, phi, z


class _ZohPhi:
    """Autograd wrapper for ``_phi`` so ``discretize`` stays differentiable."""

    @staticmethod
    def apply(z: Tensor) -> Tensor:
        zd = z.data
        return Tensor._op(_phi(zd), (z,), lambda g: (g * _dphi(zd),))


def discretize(A: Tensor, B_step: Tensor, delta_step: Tensor) -> tuple[Tensor, Tensor]:
    """ZOH for one step: A [D,N], B_step [N], delta_step [D] -> (a_bar, b_bar) [D,N]."""
    A, B_step, delta_step = ag.as_tensor(A), ag.as_tensor(B_step), ag.as_tensor(delta_step)
    if np.any(delta_step.data <= 0):
        raise ValueError("discretize: delta must be strictly positive")
    d = delta_step.reshape(delta_step.shape[0], 1)
    z = d * A
    a_bar = ag.exp(z)
    b_bar = _ZohPhi.apply(z) * d * B_step.reshape(1, B_step.shape[0])
    return a_bar, b_bar


class SsmParams(Module):
    """Continuous parameters and the input-dependent selection projections."""

    def __init__(self, d_model: int, d_state: int = 16, rng: np.random.Generator | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_model = d_model
        self.d_state = d_state
        # S4D-real: A[d, n] = -(n + 1)
        self.a_log = ag.parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=float), (d_model, 1))))
        self.delta_proj = Linear(d_model, d_model, rng, std=d_model ** -0.5 * 0.1)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_model))
        self.delta_proj.bias.data = dt + np.log(-np.expm1(-dt))  # inverse softplus
        self.bc_proj = Linear(d_model, 2 * d_state, rng, bias=False)

    @property
    def A(self) -> Tensor:
        return -ag.exp(self.a_log)


@dataclass
class SelectiveInputs:
    delta: Tensor  # [..., T, D], positive
    b_t: Tensor    # [..., T, N]
    c_t: Tensor    # [..., T, N]


@dataclass
class ScanState:
    h: Tensor  # [D, N] or [batch, D, N]

    @classmethod
    def zeros(cls, d_model: int, d_state: int, batch: int | None = None) -> "ScanState":
        shape = (d_model, d_state) if batch is None else (batch, d_model, d_state)
        return cls(Tensor(np.zeros(shape)))


def select_params(params: SsmParams, x: Tensor) -> SelectiveInputs:
    delta = ag.softplus(params.delta_proj(x))
    bc = params.bc_proj(x)
    n = params.d_state
    return SelectiveInputs(delta, bc[..., :n], bc[..., n:])


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, b_t: Tensor, c_t: Tensor,
                   h0: Tensor) -> tuple[Tensor, Tensor]:
    """Fused sequential scan with an exact reverse-time backward.

    Shapes (batch axis optional, but consistent): x, delta [B,T,D]; A [D,N];
    b_t, c_t [B,T,N]; h0 [B,D,N]. Returns y [B,T,D] and the final state.
    """
    x, delta, A, b_t, c_t, h0 = (ag.as_tensor(t) for t in (x, delta, A, b_t, c_t, h0))
    unbatched = x.ndim == 2
    xd, dd, bd, cd, hd = (t.data[None] if unbatched else t.data for t in (x, delta, b_t, c_t, h0))
    Ad = A.data
    nb, T, D = xd.shape
    if T < 1:
        raise ValueError("scan: empty sequence")
    N = Ad.shape[1]
    if Ad.shape != (D, N) or dd.shape != xd.shape or bd.shape != (nb, T, N) \
            or cd.shape != (nb, T, N) or hd.shape != (nb, D, N):
        raise ag.ShapeError(
            f"scan: inconsistent shapes x{xd.shape} delta{dd.shape} A{Ad.shape} "
            f"B{bd.shape} C{cd.shape} h0{hd.shape}")

    a_bar, b_bar, phi, z = _discretize_np(dd, Ad, bd)
    drive = b_bar * xd[..., None]
    hs = np.empty((nb, T + 1, D, N))
    hs[:, 0] = hd
    h = hd
    for t in range(T):
        h = a_bar[:, t] * h + drive[:, t]
        hs[:, t + 1] = h
    y = np.einsum("btdn,btn->btd", hs[:, 1:], cd)
    packed = np.concatenate([y.reshape(-1), h.reshape(-1)])
    n_y = y.size

    def fn(g):
        gy = g[:n_y].reshape(y.shape)
        gh = g[n_y:].reshape(h.shape).copy()
        g_c = np.einsum("btd,btdn->btn", gy, hs[:, 1:])
        direct = gy[..., None] * cd[:, :, None, :]
        G = np.empty_like(hs[:, 1:])
        for t in range(T - 1, -1, -1):
            gh = gh + direct[:, t]
            G[:, t] = gh
            gh = gh * a_bar[:, t]
        g_h0 = gh
        g_abar = G * hs[:, :-1]
        g_bbar = G * xd[..., None]
        g_x = (G * b_bar).sum(-1)
        dB = dd[..., None] * bd[:, :, None, :]
        g_z = g_abar * a_bar + g_bbar * dB * _dphi(z)
        g_delta = (g_bbar * phi * bd[:, :, None, :]).sum(-1) + (g_z * Ad).sum(-1)
        g_b = (g_bbar * phi * dd[..., None]).sum(-2)
        g_A = (g_z * dd[..., None]).sum((0, 1))
        if unbatched:
            g_x, g_delta, g_b, g_c, g_h0 = (a[0] for a in (g_x, g_delta, g_b, g_c, g_h0))
        return g_x, g_delta, g_A, g_b, g_c, g_h0

    out = Tensor._op(packed, (x, delta, A, b_t, c_t, h0), fn)
    y_t = out[:n_y].reshape(y.shape[1:] if unbatched else y.shape)
    h_t = out[n_y:].reshape(h.shape[1:] if unbatched else h.shape)
    return y_t, h_t


def scan(params: SsmParams, x: Tensor, h0: ScanState | None = None) -> tuple[Tensor, ScanState]:
    """Select per-step parameters from ``x`` and run the recurrence from ``h0``."""
    x = ag.as_tensor(x)
    if x.shape[-2] < 1:
        raise ValueError("scan: empty sequence")
    if h0 is None:
        batch = x.shape[0] if x.ndim == 3 else None
        h0 = ScanState.zeros(params.d_model, params.d_state, batch)
    sel = select_params(params, x)
    y, h = selective_scan(x, sel.delta, params.A, sel.b_t, sel.c_t, h0.h)
    return y, ScanState(h)


# -- independent oracle ------------------------------------------------------

def zoh_reference(delta: np.ndarray, A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Textbook ZOH for a diagonal system, one (D, N) block per time step.

    delta [T, D], A [D, N], B [T, N] -> a_bars, b_bars [T, D, N].
    """
    T, D = delta.shape
    N = A.shape[1]
    a_bars = np.empty((T, D, N))
    b_bars = np.empty((T, D, N))
    for t in range(T):
        for d in range(D):
            for n in range(N):
                dA = delta[t, d] * A[d, n]
                a_bars[t, d, n] = np.exp(dA)
                b_bars[t, d, n] = (np.exp(dA) - 1.0) / dA * delta[t, d] * B[t, n]
    return a_bars, b_bars


def scan_oracle(a_bars: np.ndarray, b_bars: np.ndarray, c_ts: np.ndarray, x: np.ndarray,
                h0: np.ndarray) -> np.ndarray:
    """Closed-form unrolled recurrence, summed term by term.

    h_t = (prod_{j<=t} a_j) h0 + sum_k (prod_{k<j<=t} a_j) b_k x_k, y_t = h_t c_t.
    Shapes: a_bars, b_bars [T,D,N]; c_ts [T,N]; x [T,D]; h0 [D,N] -> y [T,D].
    """
    a_bars, b_bars, c_ts, x, h0 = (np.asarray(v, dtype=np.float64) for v in (a_bars, b_bars, c_ts, x, h0))
    T = x.shape[0]
    if T < 1:
        raise ValueError("scan_oracle: empty sequence")
    y = np.empty(x.shape)
    for t in range(T):
        h = np.prod(a_bars[: t + 1], axis=0) * h0
        for k in range(t + 1):
            h = h + np.prod(a_bars[k + 1: t + 1], axis=0) * b_bars[k] * x[k][:, None]
        y[t] = h @ c_ts[t]
    return y
