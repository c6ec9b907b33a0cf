"""Encoder plus head, parameter grouping and checkpoint files."""
from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from . import autograd as ag
from .config import ModelConfig, config_hash
from .context import ContextState, ContextToken
from .encoder import ContextEncoder, TokenizedFrame
from .head import CenterHead, ScoreMaps
from .nn import Module

CHECKPOINT_VERSION = 1

# parameters that belong to the context pathway or the head train at the higher rate
_OTHER_PREFIXES = ("encoder.taps", "encoder.tap_norms", "encoder.context_init", "encoder.pos_context", "head.")


class CheckpointError(ValueError):
    pass


class TrackerModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.encoder = ContextEncoder(self.cfg, rng)
        self.head = CenterHead(self.cfg.d_enc, self.cfg.head_hidden, rng)

    def param_groups(self) -> tuple[list[tuple[str, ag.Tensor]], list[tuple[str, ag.Tensor]]]:
        backbone, other = [], []
        for name, p in self.named_parameters():
            (other if name.startswith(_OTHER_PREFIXES) else backbone).append((name, p))
        return backbone, other

    def template_tokens(self, images: np.ndarray) -> TokenizedFrame:
        return self.encoder.tokenize(images, "template")

    def forward_frame(self, c_p: ContextToken, search_images: np.ndarray, template: TokenizedFrame,
                      states: list[ContextState], record: bool | None = None):
        """One frame: returns (score maps, next context token, next states)."""
        s_p = self.encoder.tokenize(search_images, "search")
        f, c_p, states = self.encoder.encode(c_p, s_p, template, states, record=record)
        return self.head(f), c_p, states


def save_checkpoint(model: TrackerModel, path: str, extra: dict | None = None) -> None:
    cfg = asdict(model.cfg)
    meta = {"version": CHECKPOINT_VERSION, "model": cfg, "config_hash": config_hash(cfg),
            "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str, expected_hash: str | None = None) -> tuple[TrackerModel, dict]:
    """Rebuild a model from a checkpoint; a config-hash mismatch raises CheckpointError."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        if config_hash(meta["model"]) != meta["config_hash"]:
            raise CheckpointError(f"{path}: stored config does not match its hash")
        if expected_hash is not None and meta["config_hash"] != expected_hash:
            raise CheckpointError(f"{path}: config hash {meta['config_hash']} != expected {expected_hash}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = TrackerModel(ModelConfig(**meta["model"]))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, meta


def maps_to_numpy(maps: ScoreMaps) -> dict[str, np.ndarray]:
    return {"cls": maps.cls.data, "size": maps.size.data, "offset": maps.offset.data}
