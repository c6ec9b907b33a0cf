"""Training loop, streaming tracker, metrics and the ablation harness."""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import DataConfig, ModelConfig, RunConfig, TrainConfig, run_config_from_dict
from .context import ContextToken, state_from_arrays, state_to_arrays
from .encoder import TokenizedFrame
from .head import decode_boxes, iou_giou, total_loss
from .model import TrackerModel
from .optim import AdamW, clip_global_norm
from .synthetic import CropWindow, crop, make_pool, sample_clip

MIN_BOX_PX = 4.0


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainResult:
    model: TrackerModel
    losses: np.ndarray
    components: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def lr_scale(step: int, cfg: TrainConfig) -> float:
    return cfg.decay_factor if step >= int(cfg.decay_start * cfg.steps) else 1.0


def smoothed(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages losses[max(0, i-window+1) : i+1]."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def build_pools(data: DataConfig):
    train_pool = make_pool(data.kind, data.n_train, data.length, data.canvas, seed=data.seed)
    eval_pool = make_pool(data.kind, data.n_eval, data.eval_length, data.canvas, seed=data.seed + 10007)
    return train_pool, eval_pool


def _jittered_window(box, factor: float, out_size: int, cfg: TrainConfig, rng) -> CropWindow:
    cx, cy, w, h = box
    sz = math.sqrt(w * h)
    dx, dy = rng.uniform(-1.0, 1.0, 2) * cfg.center_jitter * sz
    scale = math.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
    return CropWindow.around((cx + dx, cy + dy, w, h), factor * scale, out_size)


def _clip_batch(pool, cfg: TrainConfig, mcfg: ModelConfig, data: DataConfig, rng, templates: dict):
    """Template images [B,3,St,St], per-frame search images and normalised gt boxes."""
    clips = [sample_clip(pool, cfg.clip_len, rng, cfg.max_gap) for _ in range(cfg.batch_size)]
    tmpl, search, gts = [], [[] for _ in range(cfg.clip_len)], [[] for _ in range(cfg.clip_len)]
    for clip in clips:
        seq = pool[clip.sequence]
        if clip.sequence not in templates:
            img = seq.render(clip.template_index)
            templates[clip.sequence] = crop(img, seq.boxes[clip.template_index], data.template_factor,
                                            mcfg.template_size)[0]
        tmpl.append(templates[clip.sequence])
        for k, t in enumerate(clip.indices):
            prev = seq.boxes[max(t - 1, 0)]
            win = _jittered_window(prev, data.search_factor, mcfg.search_size, cfg, rng)
            patch = win.sample(seq.render(t))
            search[k].append(np.broadcast_to(patch, (3,) + patch.shape))
            gt = win.to_crop(seq.boxes[t])
            gt[:2] = np.clip(gt[:2], 0.0, 1.0 - 1e-9)
            gts[k].append(gt)
    return np.stack(tmpl), [np.stack(s) for s in search], [np.stack(g) for g in gts]


def train(cfg: RunConfig, pool=None, progress=None, model: TrackerModel | None = None) -> TrainResult:
    """Clip-based training with truncated backprop at clip boundaries.

    ``progress(step, loss, parts)`` is called every ``log_every`` steps.
    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    tc, mc, dc = cfg.train, cfg.model, cfg.data
    if pool is None:
        pool = build_pools(dc)[0]
    model = model or TrackerModel(mc, seed=tc.seed)
    backbone, other = model.param_groups()
    params = [p for _, p in backbone] + [p for _, p in other]
    opt = AdamW([{"params": [p for _, p in backbone], "lr": tc.lr_backbone},
                 {"params": [p for _, p in other], "lr": tc.lr_other}],
                betas=tc.betas, weight_decay=tc.weight_decay)
    rng = np.random.default_rng([tc.seed, 11])
    templates: dict = {}
    losses, parts_log = [], []
    t0 = time.perf_counter()
    for step in range(tc.steps):
        opt.set_lr_scale(lr_scale(step, tc))
        tmpl, search, gts = _clip_batch(pool, tc, mc, dc, rng, templates)
        b = tmpl.shape[0]
        t_p = model.template_tokens(tmpl)
        c_p = model.encoder.initial_context(b)
        states = model.encoder.fresh_states(b)
        total = None
        parts = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
        for k in range(tc.clip_len):
            maps, c_p, states = model.forward_frame(c_p, search[k], t_p, states)
            loss_k, comp = total_loss(maps, gts[k], tc.lambda1, tc.lambda2)
            total = loss_k if total is None else total + loss_k
            for key in parts:
                parts[key] += comp[key] / tc.clip_len
        loss = total / tc.clip_len
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        grads = ag.backward(loss, params)
        clip_global_norm(grads, tc.grad_clip)
        opt.step(grads)
        losses.append(value)
        parts_log.append(parts)
        if progress is not None and (step % tc.log_every == 0 or step == tc.steps - 1):
            progress(step, value, parts)
    return TrainResult(model, np.array(losses), parts_log, time.perf_counter() - t0)


# -- streaming inference ------------------------------------------------------

@dataclass
class FrameRecord:
    frame: int
    box: np.ndarray
    score: float
    frame_index: list
    state_nbytes: int
    attention: dict | None = None

    def to_json(self) -> dict:
        d = {"frame": self.frame, "box": [float(v) for v in self.box], "score": float(self.score),
             "frame_index": list(self.frame_index), "state_nbytes": int(self.state_nbytes)}
        if self.attention is not None:
            d["attention"] = {str(k): v.tolist() for k, v in self.attention.items()}
        return d


def clamp_box(box: np.ndarray, canvas: tuple[int, int]) -> np.ndarray:
    """Keep the centre on the canvas and the size between MIN_BOX_PX and the canvas."""
    h, w = canvas
    cx = min(max(box[0], 0.0), w)
    cy = min(max(box[1], 0.0), h)
    bw = min(max(box[2], MIN_BOX_PX), w)
    bh = min(max(box[3], MIN_BOX_PX), h)
    return np.array([cx, cy, bw, bh])


class TrackingSession:
    """Frame-by-frame tracker whose context states persist for the whole sequence."""

    def __init__(self, model: TrackerModel, search_factor: float = 4.0, template_factor: float = 2.0,
                 record_attention: bool = False):
        self.model = model
        self.search_factor = search_factor
        self.template_factor = template_factor
        self.record_attention = record_attention
        self.template: TokenizedFrame | None = None
        self.c_p: ContextToken | None = None
        self.states: list = []
        self.box: np.ndarray | None = None
        self.next_frame = 0

    def start(self, frame: np.ndarray, box) -> FrameRecord:
        cfg = self.model.cfg
        with ag.no_grad():
            tmpl, _ = crop(frame, box, self.template_factor, cfg.template_size)
            self.template = self.model.template_tokens(tmpl[None])
            self.c_p = self.model.encoder.initial_context(1)
        self.states = self.model.encoder.fresh_states(1)
        self.box = np.asarray(box, dtype=np.float64).copy()
        self.next_frame = 1
        return FrameRecord(0, self.box.copy(), 1.0, [s.frame_index for s in self.states], self.state_nbytes())

    def state_nbytes(self) -> int:
        return sum(s.nbytes() for s in self.states) + (self.c_p.tokens.data.nbytes if self.c_p else 0)

    def step(self, frame: np.ndarray) -> FrameRecord:
        if self.template is None:
            raise RuntimeError("TrackingSession.step called before start")
        cfg = self.model.cfg
        with ag.no_grad():
            search, win = crop(frame, self.box, self.search_factor, cfg.search_size)
            maps, self.c_p, self.states = self.model.forward_frame(
                self.c_p, search[None], self.template, self.states, record=self.record_attention)
        boxes, scores = decode_boxes(maps)
        canvas = np.asarray(frame).shape[-2:]
        self.box = clamp_box(win.to_canvas(boxes[0]), canvas)
        attention = None
        if self.record_attention:
            attention = {k: self.model.encoder.attention_weights_dump(k)[0]
                         for k in range(1, cfg.depth + 1)}
        rec = FrameRecord(self.next_frame, self.box.copy(), float(scores[0]),
                          [s.frame_index for s in self.states], self.state_nbytes(), attention)
        self.next_frame += 1
        return rec

    # -- snapshots --------------------------------------------------------------
    def snapshot(self) -> dict[str, np.ndarray]:
        arrays = {"template": self.template.tokens.data.copy(), "c_p": self.c_p.tokens.data.copy(),
                  "box": self.box.copy(), "next_frame": np.array(self.next_frame, dtype=np.int64),
                  "n_states": np.array(len(self.states), dtype=np.int64)}
        for i, s in enumerate(self.states):
            arrays.update(state_to_arrays(s, prefix=f"state{i}/"))
        return arrays

    def restore(self, arrays) -> None:
        self.template = TokenizedFrame(Tensor(np.array(arrays["template"])), "template")
        self.c_p = ContextToken(Tensor(np.array(arrays["c_p"])))
        self.box = np.array(arrays["box"], dtype=np.float64)
        self.next_frame = int(arrays["next_frame"])
        n = int(arrays["n_states"])
        if n != len(self.model.encoder.taps):
            raise ValueError(f"snapshot has {n} context states, model has {len(self.model.encoder.taps)}")
        self.states = [state_from_arrays(arrays, prefix=f"state{i}/") for i in range(n)]


@dataclass
class TrackResult:
    boxes: np.ndarray
    scores: np.ndarray
    records: list
    seconds: float

    @property
    def fps(self) -> float:
        n = max(len(self.records) - 1, 1)
        return n / self.seconds if self.seconds > 0 else float("inf")


def track_sequence(model: TrackerModel, sequence, init_box=None, search_factor: float = 4.0,
                   template_factor: float = 2.0, record_attention: bool = False,
                   session: TrackingSession | None = None, stop: int | None = None,
                   on_frame=None) -> TrackResult:
    """Track from frame 0 (initialised with ``init_box``, default the first gt box).

    With a restored ``session``, tracking resumes at ``session.next_frame``.
    ``stop`` ends before that frame index.
    """
    n = len(sequence)
    stop = n if stop is None else min(stop, n)
    records = []
    t0 = time.perf_counter()
    if session is None:
        session = TrackingSession(model, search_factor, template_factor, record_attention)
        box = sequence.boxes[0] if init_box is None else init_box
        records.append(session.start(sequence.frame(0), box))
        if on_frame:
            on_frame(records[-1], session)
    while session.next_frame < stop:
        records.append(session.step(sequence.frame(session.next_frame)))
        if on_frame:
            on_frame(records[-1], session)
    seconds = time.perf_counter() - t0
    boxes = np.array([r.box for r in records]).reshape(-1, 4)
    scores = np.array([r.score for r in records])
    result = TrackResult(boxes, scores, records, seconds)
    result.session = session
    return result


# -- metrics -------------------------------------------------------------------

THRESHOLDS = np.round(np.linspace(0.0, 1.0, 21), 10)
RECOVERY_WINDOW = 10


@dataclass
class EvalReport:
    mean_iou: float
    success: np.ndarray
    auc: float
    precision: float
    recovery_rate: float | None
    fps: float | None
    n_frames: int
    thresholds: np.ndarray = field(default_factory=lambda: THRESHOLDS.copy())

    def to_json(self) -> dict:
        return {"mean_iou": self.mean_iou, "auc": self.auc, "precision": self.precision,
                "recovery_rate": self.recovery_rate, "fps": self.fps, "n_frames": self.n_frames,
                "success": self.success.tolist(), "thresholds": self.thresholds.tolist()}


def success_curve(ious: np.ndarray) -> np.ndarray:
    """Fraction of frames with IoU above each threshold; a perfect box counts at 1.0."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return np.zeros(len(THRESHOLDS))
    out = [(ious > t).mean() if t < 1.0 else (ious >= 1.0 - 1e-9).mean() for t in THRESHOLDS]
    return np.array(out)


def box_iou(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU of (cx, cy, w, h) boxes in any common unit."""
    iou, _ = iou_giou(np.atleast_2d(pred), np.atleast_2d(gt))
    return iou


def eval_metrics(pred, gt, occluded=None, fps: float | None = None, search_factor: float = 4.0,
                 grid: int = 4) -> EvalReport:
    """Standard one-pass metrics on (cx, cy, w, h) boxes.

    Occluded frames are left out of IoU, success and precision but feed the
    recovery rate: the fraction of occlusion spans after which the box regains
    IoU > 0.5 within ``RECOVERY_WINDOW`` frames. Precision counts frames whose
    centre error is under two feature cells of the search region.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape or pred.shape[1] != 4:
        raise ValueError(f"eval_metrics: prediction shape {pred.shape} does not match ground truth {gt.shape}")
    occ = np.zeros(len(gt), dtype=bool) if occluded is None else np.asarray(occluded, dtype=bool)
    if occ.shape != (len(gt),):
        raise ValueError("eval_metrics: occlusion flags do not match sequence length")
    ious = box_iou(pred, gt)
    vis = ~occ
    iv = ious[vis]
    curve = success_curve(iv)
    cell = search_factor * np.sqrt(gt[:, 2] * gt[:, 3]) / grid
    err = np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])
    prec = float((err[vis] < 2 * cell[vis]).mean()) if vis.any() else 0.0
    recovery = None
    ends = [i for i in range(len(occ)) if occ[i] and (i + 1 == len(occ) or not occ[i + 1])]
    spans = [e for e in ends if e + 1 < len(occ)]
    if spans:
        ok = [bool((ious[e + 1:e + 1 + RECOVERY_WINDOW] > 0.5).any()) for e in spans]
        recovery = float(np.mean(ok))
    return EvalReport(float(iv.mean()) if iv.size else 0.0, curve, float(curve.mean()), prec,
                      recovery, fps, int(vis.sum()))


def evaluate(model: TrackerModel, sequences, data: DataConfig | None = None) -> list[EvalReport]:
    """Track each sequence from its first gt box; metrics skip the given frame 0."""
    data = data or DataConfig()
    reports = []
    for seq in sequences:
        res = track_sequence(model, seq, search_factor=data.search_factor,
                             template_factor=data.template_factor)
        reports.append(eval_metrics(res.boxes[1:], seq.boxes[1:], seq.occluded[1:], fps=res.fps,
                                    search_factor=data.search_factor, grid=model.cfg.grid))
    return reports


def summarize(reports: list[EvalReport]) -> dict:
    rec = [r.recovery_rate for r in reports if r.recovery_rate is not None]
    return {"mean_iou": float(np.mean([r.mean_iou for r in reports])),
            "auc": float(np.mean([r.auc for r in reports])),
            "precision": float(np.mean([r.precision for r in reports])),
            "recovery_rate": float(np.mean(rec)) if rec else None,
            "fps": float(np.mean([r.fps for r in reports]))}


# -- ablation ------------------------------------------------------------------

def ablation_variants(cfg: RunConfig, axis: str) -> tuple[list[tuple[str, RunConfig]], str]:
    """Variants for one axis and the name of the reference (default) variant."""
    m = cfg.model
    d = m.depth
    if axis == "context_onoff":
        out = [("context", m), ("no_context", replace(m, insertion_layers=()))]
        ref = "context"
    elif axis == "cp_length":
        out = [(f"n_context={n}", replace(m, n_context=n)) for n in (1, 2, 3, 4)]
        ref = "n_context=1"
    elif axis == "insertion_layers":
        spread = tuple(round(d * k / 3) for k in (1, 2, 3))
        options = [(), (1, 2, 3), spread, (d - 2, d - 1, d)]
        out = [("layers=" + ("none" if not o else "-".join(map(str, o))), replace(m, insertion_layers=o))
               for o in options]
        ref = out[2][0]
    elif axis == "windowed_baseline":
        w = cfg.ablation.window
        out = [("unbounded", replace(m, window=None)), (f"window={w}", replace(m, window=w))]
        ref = "unbounded"
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return [(name, replace(cfg, model=mc)) for name, mc in out], ref


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, seed=seed),
                   data=replace(cfg.data, seed=cfg.data.seed + seed))


def run_variant(cfg_dict: dict, name: str, seed: int) -> dict:
    """Train and evaluate one (variant, seed) cell; picklable for worker pools."""
    cfg = run_config_from_dict(cfg_dict)
    train_pool, eval_pool = build_pools(cfg.data)
    res = train(cfg, train_pool)
    summary = summarize(evaluate(res.model, eval_pool, cfg.data))
    return {"variant": name, "seed": seed, "auc": summary["auc"], "mean_iou": summary["mean_iou"],
            "precision": summary["precision"], "recovery_rate": summary["recovery_rate"],
            "final_loss": float(smoothed(res.losses)[-1]), "train_seconds": res.seconds}


def _stderr(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")


@dataclass
class AblationReport:
    axis: str
    reference: str
    rows: list
    summary: list
    configs: dict


def ablate(cfg: RunConfig, axis: str | None = None, seeds=None, workers: int | None = None,
           on_row=None) -> AblationReport:
    """Paired runs: every variant of a seed shares data seed and training seed."""
    axis = axis or cfg.ablation.axis
    seeds = tuple(cfg.ablation.seeds if seeds is None else seeds)
    workers = cfg.ablation.workers if workers is None else workers
    variants, ref = ablation_variants(cfg, axis)
    jobs = [(_seeded(vc, s).to_dict(), name, s) for s in seeds for name, vc in variants]
    rows = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for row in ex.map(run_variant, *zip(*jobs)):
                rows.append(row)
                if on_row:
                    on_row(row)
    else:
        for job in jobs:
            rows.append(run_variant(*job))
            if on_row:
                on_row(rows[-1])
    summary = []
    by = {name: {r["seed"]: r for r in rows if r["variant"] == name} for name, _ in variants}
    for name, _ in variants:
        cells = [by[name][s] for s in seeds]
        entry = {"variant": name, "n": len(cells)}
        for key in ("auc", "mean_iou", "precision"):
            vals = [c[key] for c in cells]
            entry[key] = float(np.mean(vals))
            entry[f"{key}_stderr"] = _stderr(vals)
        if name != ref:
            diff = [by[ref][s]["mean_iou"] - by[name][s]["mean_iou"] for s in seeds]
            adiff = [by[ref][s]["auc"] - by[name][s]["auc"] for s in seeds]
            entry.update(diff_mean_iou=float(np.mean(diff)), diff_mean_iou_stderr=_stderr(diff),
                         diff_auc=float(np.mean(adiff)), diff_auc_stderr=_stderr(adiff))
        summary.append(entry)
    return AblationReport(axis, ref, rows, summary, {name: vc.to_dict() for name, vc in variants})
