"""Hierarchical patch encoder with context-token injection.

Images are cut into 4x4 patches, passed through two 2x2 merge stages (total
stride 16), and the resulting search and template tokens are concatenated
behind the context token(s). Global attention blocks run over the whole
sequence; after each configured block the search slice is streamed through
a :class:`~ctxtrack.context.ContextMamba` tap whose output replaces the
context slot for the remaining blocks.

All tensors here carry a leading batch axis: tokens are ``[B, N, D]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .context import ContextMamba, ContextState, ContextToken
from .nn import Block, LayerNorm, Linear, Module, ResidualMlp


@dataclass
class TokenizedFrame:
    tokens: Tensor  # [B, N, D_enc]
    kind: str       # "search" or "template"

    def __post_init__(self):
        if self.kind not in ("search", "template"):
            raise ValueError(f"unknown token kind {self.kind!r}")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)(W/p), C*p*p], patches in row-major grid order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class PatchMerge(Module):
    """Concatenate each 2x2 neighbourhood, normalise, and map to a new width."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * d_in)
        self.reduce = Linear(4 * d_in, d_out, rng)

    def __call__(self, tokens: Tensor, grid: tuple[int, int]) -> tuple[Tensor, tuple[int, int]]:
        return downsample_stage(tokens, grid, self)


def downsample_stage(tokens: Tensor, grid: tuple[int, int], merge: PatchMerge):
    gh, gw = grid
    if gh % 2 or gw % 2:
        raise ValueError(f"downsample_stage: grid {gh}x{gw} must have even sides")
    b, n, c = tokens.shape
    if n != gh * gw:
        raise ag.ShapeError(f"downsample_stage: {n} tokens do not fill a {gh}x{gw} grid")
    x = tokens.reshape(b, gh // 2, 2, gw // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, (gh // 2) * (gw // 2), 4 * c)
    return merge.reduce(merge.norm(x)), (gh // 2, gw // 2)


class ContextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d0, d1 = cfg.stage_dims
        d = cfg.d_enc
        p = cfg.patch
        gs, gt = cfg.search_size // p, cfg.template_size // p
        self.patch_proj = Linear(3 * p * p, d0, rng)
        self.pos_search_patch = ag.parameter(rng.normal(0.0, 0.02, (gs * gs, d0)))
        self.pos_template_patch = ag.parameter(rng.normal(0.0, 0.02, (gt * gt, d0)))
        self.stage1 = ResidualMlp(d0, 4 * d0, rng)
        self.merge1 = PatchMerge(d0, d1, rng)
        self.stage2 = ResidualMlp(d1, 4 * d1, rng)
        self.merge2 = PatchMerge(d1, d, rng)
        self.pos_search = ag.parameter(rng.normal(0.0, 0.02, (cfg.n_search, d)))
        self.pos_template = ag.parameter(rng.normal(0.0, 0.02, (cfg.n_template, d)))
        self.pos_context = ag.parameter(rng.normal(0.0, 0.02, (cfg.n_context, d)))
        self.context_init = ag.parameter(rng.normal(0.0, 0.02, (cfg.n_context, d)))
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.taps = [ContextMamba(d, cfg.d_scan, cfg.d_state, cfg.n_context, rng, layer_id=k,
                                  window=cfg.window) for k in cfg.insertion_layers]
        self.tap_norms = [LayerNorm(d) for _ in cfg.insertion_layers]
        self.norm = LayerNorm(d)
        self.recording = False
        self._attention: dict[int, np.ndarray] = {}

    # -- tokenisation ---------------------------------------------------------
    def patch_embed(self, images: np.ndarray, kind: str = "search") -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        _, c, h, w = images.shape
        if c != 3:
            raise ValueError(f"patch_embed expects 3 channels, got {c}")
        if h % 16 or w % 16:
            raise ValueError(f"patch_embed: image {h}x{w} must have sides divisible by 16")
        pos = self.pos_search_patch if kind == "search" else self.pos_template_patch
        patches = patchify(images, self.cfg.patch)
        if patches.shape[1] != pos.shape[0]:
            raise ag.ShapeError(f"patch_embed: {kind} image {h}x{w} does not match configured size")
        return self.patch_proj(Tensor(patches)) + pos

    def tokenize(self, images: np.ndarray, kind: str) -> TokenizedFrame:
        size = self.cfg.search_size if kind == "search" else self.cfg.template_size
        g = size // self.cfg.patch
        x = self.stage1(self.patch_embed(images, kind))
        x, grid = self.merge1(x, (g, g))
        x = self.stage2(x)
        x, _ = self.merge2(x, grid)
        pos = self.pos_search if kind == "search" else self.pos_template
        return TokenizedFrame(x + pos, kind)

    # -- context helpers ------------------------------------------------------
    def initial_context(self, batch: int) -> ContextToken:
        c = self.context_init
        return ContextToken(ag.broadcast_to(c.reshape((1,) + c.shape), (batch,) + c.shape))

    def fresh_states(self, batch: int) -> list[ContextState]:
        return [tap.fresh_state(batch) for tap in self.taps]

    # -- forward --------------------------------------------------------------
    def encode(self, c_p: ContextToken, s_p: TokenizedFrame, t_p: TokenizedFrame,
               states: list[ContextState] | None = None, record: bool | None = None):
        """Run the attention stack; returns (search features, context token, states)."""
        cfg = self.cfg
        record = self.recording if record is None else record
        segments = (("context", c_p.tokens, cfg.n_context), ("search", s_p.tokens, cfg.n_search),
                    ("template", t_p.tokens, cfg.n_template))
        for name, tok, expected in segments:
            if tok.ndim != 3 or tok.shape[1] != expected or tok.shape[2] != cfg.d_enc:
                raise ag.ShapeError(
                    f"encode: {name} segment has shape {tok.shape}, expected [B, {expected}, {cfg.d_enc}]")
        if s_p.kind != "search" or t_p.kind != "template":
            raise ValueError("encode: search/template token kinds swapped")
        batch = s_p.tokens.shape[0]
        states = list(states) if states is not None else self.fresh_states(batch)
        if len(states) != len(self.taps):
            raise ValueError(f"encode: expected {len(self.taps)} context states, got {len(states)}")

        nc, ns = cfg.n_context, cfg.n_search
        tap_at = {k: i for i, k in enumerate(cfg.insertion_layers)}
        x = ag.concat([c_p.tokens + self.pos_context, s_p.tokens, t_p.tokens], axis=1)
        if record:
            self._attention = {}
        for k, blk in enumerate(self.blocks, start=1):
            x = blk(x, record=record)
            if record:
                self._attention[k] = blk.attn.last_weights
            if k in tap_at:
                i = tap_at[k]
                search = self.tap_norms[i](x[:, nc:nc + ns])
                c_p, states[i] = self.taps[i].step(states[i], search)
                x = ag.concat([c_p.tokens + self.pos_context, x[:, nc:]], axis=1)
        f = self.norm(x[:, nc:nc + ns])
        return f, c_p, states

    def attention_weights_dump(self, block_id: int) -> np.ndarray:
        """Head-averaged attention of each context query over the search keys.

        Returns [B, N_c, N_s]; every row is renormalised over the search keys
        so it sums to one.
        """
        if not self._attention:
            raise RuntimeError("attention recording is disabled or no forward pass was recorded")
        if block_id not in self._attention:
            raise KeyError(f"no recorded attention for block {block_id}")
        nc, ns = self.cfg.n_context, self.cfg.n_search
        w = self._attention[block_id][:, :, :nc, nc:nc + ns].mean(axis=1)
        return w / w.sum(axis=-1, keepdims=True)
