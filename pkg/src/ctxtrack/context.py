"""Long-term context built by scanning search-frame features across frames.

Each frame's search tokens are projected into the scanner width and
absorbed into a carried hidden state. A learned empty token is then scanned
once more; its output is the frame summary, and the state after that step is
what the next frame starts from. The summary is projected into the context
token that the encoder attends to.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, Module
from .ssm import ScanState, SsmParams, scan


@dataclass
class ContextToken:
    tokens: Tensor  # [N_c, D_enc] or [batch, N_c, D_enc]

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class ContextState:
    carried: ScanState
    frame_index: int = 0
    layer_id: int = 0
    pending: bool = False
    # windowed baseline only: projected tokens of the most recent frames
    window: tuple = field(default_factory=tuple)

    def nbytes(self) -> int:
        return self.carried.h.data.nbytes + sum(t.data.nbytes for t in self.window)


def project_frame(f: Tensor, W) -> Tensor:
    """Per-token linear map of frame features into the scanner width."""
    f = ag.as_tensor(f)
    if f.shape[-2] < 1:
        raise ValueError("project_frame: frame has no tokens")
    if isinstance(W, Linear):
        return W(f)
    return ag.matmul(f, ag.as_tensor(W))


def absorb_frame(state: ContextState, frame_tokens: Tensor, params: SsmParams) -> ContextState:
    """Scan a frame's tokens starting from the carried state."""
    frame_tokens = ag.as_tensor(frame_tokens)
    if frame_tokens.shape[-2] == 0:
        raise ValueError("absorb_frame: frame has no tokens")
    _, h = scan(params, frame_tokens, state.carried)
    return replace(state, carried=h, pending=True)


def emit_summary(state: ContextState, empty: Tensor, params: SsmParams) -> tuple[Tensor, ContextState]:
    """One extra scan step on the empty token; returns its output and the handoff state."""
    if not state.pending:
        raise RuntimeError("emit_summary: no frame absorbed since reset or last emit")
    h = state.carried.h
    slot = empty.reshape(1, empty.shape[-1])
    if h.ndim == 3:
        slot = ag.broadcast_to(slot.reshape(1, 1, empty.shape[-1]), (h.shape[0], 1, empty.shape[-1]))
    y, h_next = scan(params, slot, state.carried)
    return y[..., 0, :], replace(state, carried=h_next, pending=False,
                                 frame_index=state.frame_index + 1)


def update_context_token(c_p: ContextToken | None, y_summary: Tensor, out: Linear,
                         n_context: int) -> ContextToken:
    """Replace the context token with a projection of the frame summary."""
    v = out(y_summary)
    d_enc = v.shape[-1] // n_context
    return ContextToken(v.reshape(v.shape[:-1] + (n_context, d_enc)))


def reset(layer_id: int, d_scan: int, d_state: int, c_p_init: Tensor | None = None,
          batch: int | None = None) -> tuple[ContextState, ContextToken | None]:
    state = ContextState(ScanState.zeros(d_scan, d_state, batch), 0, layer_id)
    if c_p_init is None:
        return state, None
    tokens = c_p_init
    if batch is not None:
        tokens = ag.broadcast_to(c_p_init.reshape((1,) + c_p_init.shape), (batch,) + c_p_init.shape)
    return state, ContextToken(tokens)


class ContextMamba(Module):
    """One context tap: projection, scanner, empty token and output map."""

    def __init__(self, d_enc: int, d_scan: int, d_state: int, n_context: int,
                 rng: np.random.Generator, layer_id: int = 0, window: int | None = None):
        self.layer_id = layer_id
        self.n_context = n_context
        self.window = window
        self.in_proj = Linear(d_enc, d_scan, rng, bias=False)
        self.ssm = SsmParams(d_scan, d_state, rng)
        self.empty = ag.parameter(rng.normal(0.0, 0.02, d_scan))
        self.out = Linear(d_scan, n_context * d_enc, rng, std=0.02)

    @property
    def d_scan(self) -> int:
        return self.ssm.d_model

    @property
    def d_state(self) -> int:
        return self.ssm.d_state

    def fresh_state(self, batch: int | None = None) -> ContextState:
        return reset(self.layer_id, self.d_scan, self.d_state, batch=batch)[0]

    def step(self, state: ContextState, search_tokens: Tensor) -> tuple[ContextToken, ContextState]:
        """Absorb one frame, emit its summary, and return the refreshed context token."""
        tokens = project_frame(search_tokens, self.in_proj)
        if self.window is None:
            state = absorb_frame(state, tokens, self.ssm)
            y, state = emit_summary(state, self.empty, self.ssm)
        else:
            # windowed baseline: rebuild the state from the last `window` frames only
            history = state.window[-(self.window - 1):] if self.window > 1 else ()
            batch = tokens.shape[0] if tokens.ndim == 3 else None
            work = self.fresh_state(batch)
            for past in history:
                work = absorb_frame(work, past, self.ssm)
                _, work = emit_summary(work, self.empty, self.ssm)
            work = absorb_frame(work, tokens, self.ssm)
            y, work = emit_summary(work, self.empty, self.ssm)
            keep = (history + (tokens,))[-(self.window - 1):] if self.window > 1 else ()
            state = replace(state, carried=work.carried, frame_index=state.frame_index + 1,
                            pending=False, window=keep)
        return update_context_token(None, y, self.out, self.n_context), state


def state_to_arrays(state: ContextState, prefix: str = "") -> dict[str, np.ndarray]:
    arrays = {
        f"{prefix}carried": state.carried.h.data.copy(),
        f"{prefix}frame_index": np.array(state.frame_index, dtype=np.int64),
        f"{prefix}layer_id": np.array(state.layer_id, dtype=np.int64),
        f"{prefix}window_len": np.array(len(state.window), dtype=np.int64),
    }
    for i, t in enumerate(state.window):
        arrays[f"{prefix}window{i}"] = t.data.copy()
    return arrays


def state_from_arrays(arrays, prefix: str = "") -> ContextState:
    n = int(arrays[f"{prefix}window_len"])
    window = tuple(Tensor(np.array(arrays[f"{prefix}window{i}"])) for i in range(n))
    return ContextState(
        carried=ScanState(Tensor(np.array(arrays[f"{prefix}carried"]))),
        frame_index=int(arrays[f"{prefix}frame_index"]),
        layer_id=int(arrays[f"{prefix}layer_id"]),
        window=window,
    )
