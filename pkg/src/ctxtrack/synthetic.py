"""Deterministic synthetic tracking videos, clip sampling and region cropping.

A sequence is fully described by a :class:`SequenceSpec`; frames are rendered
on demand from the SequenceSpec and the frame index, so nothing is stored and the
same seed always reproduces the same pixels.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

KINDS = ("blob", "ellipse", "rect")


@dataclass(frozen=True)
class SequenceSpec:
    length: int = 60
    canvas: int = 160
    target_kind: str = "ellipse"
    target_size: tuple = (20.0, 20.0)
    start: tuple = (80.0, 80.0)
    velocity: tuple = (0.0, 0.0)
    wobble_amp: tuple = (0.0, 0.0)
    wobble_period: float = 40.0
    scale_drift: float = 0.0
    n_distractors: int = 0
    distractor_similarity: float = 0.0
    shadow_distractors: int = 0
    occluders: tuple = ()
    appearance_drift: float = 0.0
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "target_size", tuple(float(v) for v in self.target_size))
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "wobble_amp", tuple(float(v) for v in self.wobble_amp))
        object.__setattr__(self, "occluders", tuple((int(a), int(b)) for a, b in self.occluders))
        if self.target_kind not in KINDS:
            raise ValueError(f"target_kind must be one of {KINDS}")
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if not 0 <= self.shadow_distractors <= self.n_distractors:
            raise ValueError("shadow_distractors must be between 0 and n_distractors")
        for a, b in self.occluders:
            if not 0 <= a <= b < self.length:
                raise ValueError(f"occluder interval {(a, b)} outside [0, {self.length})")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()} | {
            "occluders": [list(iv) for iv in self.occluders]}


def _trajectory(spec: SequenceSpec, start, velocity, amp, phase, size0, drift):
    t = np.arange(spec.length, dtype=np.float64)
    ang = 2 * np.pi * t / spec.wobble_period
    cx = start[0] + velocity[0] * t + amp[0] * np.sin(ang + phase[0])
    cy = start[1] + velocity[1] * t + amp[1] * np.sin(ang + phase[1])
    s = (1.0 + drift) ** t
    return np.stack([cx, cy, size0[0] * s, size0[1] * s], axis=1)


def _bounce(x0: float, v: float, lo: float, hi: float, n: int) -> np.ndarray:
    """Positions of a point moving at constant speed and reflecting off [lo, hi]."""
    span = hi - lo
    raw = (x0 - lo) + v * np.arange(n)
    m = np.mod(raw, 2 * span)
    return lo + np.where(m > span, 2 * span - m, m)


@dataclass
class _Appearance:
    base: float
    contrast: float
    angle: float
    wavelength: float


class SyntheticSequence:
    """Rendered lazily; ``boxes`` are canvas-pixel (cx, cy, w, h)."""

    def __init__(self, spec: SequenceSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        phase = rng.uniform(0, 2 * np.pi, 2)
        self.boxes = _trajectory(spec, spec.start, spec.velocity, spec.wobble_amp, phase,
                                 spec.target_size, spec.scale_drift)
        margin = 0.5 * max(self.boxes[:, 2].max(), self.boxes[:, 3].max())
        lo, hi = margin, spec.canvas - margin
        if (self.boxes[:, :2] < lo).any() or (self.boxes[:, :2] > hi).any():
            raise ValueError("target leaves the canvas margins; adjust start, velocity or wobble")
        self.occluded = np.zeros(spec.length, dtype=bool)
        for a, b in spec.occluders:
            self.occluded[a:b + 1] = True

        self._target_app = _Appearance(rng.uniform(0.65, 0.9), rng.uniform(0.15, 0.3),
                                       rng.uniform(0, np.pi), rng.uniform(5.0, 9.0))
        self._distractors = []
        for j in range(spec.n_distractors):
            sim = spec.distractor_similarity
            t = self._target_app
            app = _Appearance(
                sim * t.base + (1 - sim) * rng.uniform(0.45, 0.95),
                sim * t.contrast + (1 - sim) * rng.uniform(0.05, 0.3),
                t.angle + (1 - sim) * rng.uniform(np.pi / 4, 3 * np.pi / 4) + sim * rng.normal(0, 0.2),
                sim * t.wavelength + (1 - sim) * rng.uniform(3.0, 12.0),
            )
            kind = spec.target_kind if rng.uniform() < 0.5 + 0.5 * sim else KINDS[rng.integers(3)]
            scale = rng.uniform(0.8, 1.2)
            w, h = spec.target_size[0] * scale, spec.target_size[1] * scale
            m = 0.5 * max(w, h)
            speed = rng.uniform(0.3, 1.5)
            theta = rng.uniform(0, 2 * np.pi)
            if j < spec.shadow_distractors:
                # follows the target, swinging across it along a fixed axis
                radius = rng.uniform(1.2, 2.0) * np.sqrt(spec.target_size[0] * spec.target_size[1])
                omega = 2 * np.pi / rng.uniform(20, 40)
                swing = radius * np.cos(omega * np.arange(spec.length) + rng.uniform(0, 2 * np.pi))
                path = self.boxes[:, :2] + swing[:, None] * np.array([np.cos(theta), np.sin(theta)])
                path = np.clip(path, m, spec.canvas - m)
            else:
                xs = _bounce(rng.uniform(m, spec.canvas - m), speed * np.cos(theta), m, spec.canvas - m,
                             spec.length)
                ys = _bounce(rng.uniform(m, spec.canvas - m), speed * np.sin(theta), m, spec.canvas - m,
                             spec.length)
                path = np.stack([xs, ys], axis=1)
            self._distractors.append((kind, app, path, (w, h)))

        self._occluder_rects = []
        for a, b in spec.occluders:
            seg = self.boxes[a:b + 1]
            x1 = (seg[:, 0] - seg[:, 2] / 2).min() - 3
            x2 = (seg[:, 0] + seg[:, 2] / 2).max() + 3
            y1 = (seg[:, 1] - seg[:, 3] / 2).min() - 3
            y2 = (seg[:, 1] + seg[:, 3] / 2).max() + 3
            self._occluder_rects.append((a, b, x1, y1, x2, y2, rng.uniform(0.35, 0.55)))

        n = spec.canvas
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
        self._yy, self._xx = yy, xx
        bg = np.full((n, n), 0.3)
        for _ in range(4):
            k = rng.uniform(0.01, 0.06, 2)
            bg += rng.uniform(0.03, 0.08) * np.sin(2 * np.pi * (k[0] * xx + k[1] * yy) + rng.uniform(0, 2 * np.pi))
        self._background = bg

    def __len__(self) -> int:
        return self.spec.length

    # -- rendering ------------------------------------------------------------
    def _mask(self, kind: str, cx: float, cy: float, w: float, h: float) -> np.ndarray:
        dx, dy = self._xx - cx, self._yy - cy
        if kind == "rect":
            mx = np.clip(0.5 + w / 2 - np.abs(dx), 0, 1)
            my = np.clip(0.5 + h / 2 - np.abs(dy), 0, 1)
            return mx * my
        r = np.sqrt((dx / (w / 2)) ** 2 + (dy / (h / 2)) ** 2)
        if kind == "ellipse":
            return np.clip(0.5 + (1.0 - r) * min(w, h) / 2, 0, 1)
        return np.exp(-2.0 * r * r)

    def _texture(self, app: _Appearance, angle: float, cx: float, cy: float) -> np.ndarray:
        u = (self._xx - cx) * np.cos(angle) + (self._yy - cy) * np.sin(angle)
        return app.base + app.contrast * np.sin(2 * np.pi * u / app.wavelength)

    def render(self, t: int) -> np.ndarray:
        """Single-channel frame [H, W] with values in [0, 1]."""
        if not 0 <= t < self.spec.length:
            raise IndexError(f"frame {t} outside sequence of length {self.spec.length}")
        img = self._background.copy()
        for kind, app, path, (w, h) in self._distractors:
            m = self._mask(kind, path[t, 0], path[t, 1], w, h)
            img = img * (1 - m) + self._texture(app, app.angle, path[t, 0], path[t, 1]) * m
        cx, cy, w, h = self.boxes[t]
        app = self._target_app
        angle = app.angle + self.spec.appearance_drift * t
        m = self._mask(self.spec.target_kind, cx, cy, w, h)
        img = img * (1 - m) + self._texture(app, angle, cx, cy) * m
        for a, b, x1, y1, x2, y2, level in self._occluder_rects:
            if a <= t <= b:
                occ = ((self._xx >= x1) & (self._xx <= x2) & (self._yy >= y1) & (self._yy <= y2))
                img = np.where(occ, level + 0.04 * np.sin(self._xx * 0.9) * np.sin(self._yy * 0.7), img)
        noise = np.random.default_rng([self.spec.seed, 1, t]).normal(0.0, self.spec.noise, img.shape)
        return np.clip(img + noise, 0.0, 1.0)

    def frame(self, t: int) -> np.ndarray:
        """[3, H, W] view with the single channel replicated."""
        g = self.render(t)
        return np.broadcast_to(g, (3,) + g.shape)

    def frames(self) -> np.ndarray:
        return np.stack([self.render(t) for t in range(len(self))])


def generate_sequence(spec: SequenceSpec) -> SyntheticSequence:
    return SyntheticSequence(spec)


# -- random specs and pools ---------------------------------------------------

def random_spec(kind: str, rng: np.random.Generator, length: int = 60, canvas: int = 160,
                seed: int = 0) -> SequenceSpec:
    """Draw a SequenceSpec from the 'easy' or 'occlusion' family, satisfying the margin rule."""
    target_kind = KINDS[rng.integers(3)]
    w0, h0 = rng.uniform(16, 26), rng.uniform(16, 26)
    if kind == "easy":
        speed, amp_max, drift_max = rng.uniform(0, 0.8), 6.0, 0.002
        n_dis, sim, app_drift, noise = int(rng.integers(0, 2)), 0.0, 0.0, 0.03
        occluders: tuple = ()
    elif kind == "occlusion":
        # look-alikes keep the initial appearance while the target's texture turns
        speed, amp_max, drift_max = rng.uniform(0.2, 1.0), 8.0, 0.002
        n_dis, sim, noise = 2, 0.9, 0.04
        app_drift = rng.choice([-1.0, 1.0]) * rng.uniform(0.02, 0.04)
        occ = []
        t = int(rng.integers(6, 14))
        while t < length - 4:
            dur = int(rng.integers(3, 8))
            occ.append((t, min(t + dur - 1, length - 1)))
            t += dur + int(rng.integers(8, 16))
        occluders = tuple(occ)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    drift = rng.uniform(-drift_max, drift_max)
    grow = (1 + drift) ** (length - 1)
    margin = 0.5 * max(w0, h0) * max(1.0, grow) + 1.0
    heading = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0, amp_max, 2)
    vel = np.array([np.cos(heading), np.sin(heading)]) * speed
    travel = vel * (length - 1)
    room = canvas - 2 * margin - 2 * amp - np.abs(travel)
    if (room <= 0).any():
        shrink = max(0.0, (canvas - 2 * margin - 2 * amp.max()) / (np.abs(travel).max() + 1e-9))
        vel = vel * min(1.0, 0.95 * shrink)
        travel = vel * (length - 1)
        room = canvas - 2 * margin - 2 * amp - np.abs(travel)
    lo = margin + amp - np.minimum(travel, 0)
    start = lo + rng.uniform(0, 1, 2) * np.maximum(room, 0)
    return SequenceSpec(length=length, canvas=canvas, target_kind=target_kind, target_size=(w0, h0),
                        start=tuple(start), velocity=tuple(vel), wobble_amp=tuple(amp),
                        wobble_period=float(rng.uniform(25, 60)), scale_drift=float(drift),
                        n_distractors=n_dis, distractor_similarity=sim,
                        shadow_distractors=1 if kind == "occlusion" else 0, occluders=occluders,
                        appearance_drift=float(app_drift), noise=noise, seed=int(seed))


def make_pool(kind: str, n: int, length: int = 60, canvas: int = 160, seed: int = 0) -> list[SyntheticSequence]:
    rng = np.random.default_rng([seed, 7])
    return [generate_sequence(random_spec(kind, rng, length, canvas, seed=seed * 100003 + i))
            for i in range(n)]


# -- clips ----------------------------------------------------------------------

@dataclass
class ClipSample:
    sequence: int
    indices: tuple
    template_index: int = 0


def sample_clip(pool, clip_len: int, rng: np.random.Generator, max_gap: int = 20) -> ClipSample:
    """Pick a sequence uniformly, then ``clip_len`` increasing frames with gaps <= ``max_gap``."""
    if not pool:
        raise ValueError("sample_clip: empty pool")
    eligible = [i for i, s in enumerate(pool) if len(s) >= clip_len]
    if not eligible:
        raise ValueError(f"sample_clip: no sequence has {clip_len} frames")
    si = eligible[int(rng.integers(len(eligible)))]
    n = len(pool[si])
    idx = [int(rng.integers(0, n - clip_len + 1))]
    for k in range(1, clip_len):
        hi = min(idx[-1] + max_gap, n - (clip_len - k))
        idx.append(int(rng.integers(idx[-1] + 1, hi + 1)))
    return ClipSample(si, tuple(idx), 0)


# -- cropping --------------------------------------------------------------------

@dataclass(frozen=True)
class CropWindow:
    x0: float
    y0: float
    side: float
    out_size: int

    @classmethod
    def around(cls, box, factor: float, out_size: int) -> "CropWindow":
        cx, cy, w, h = box
        side = factor * np.sqrt(w * h)
        return cls(cx - side / 2, cy - side / 2, float(side), out_size)

    def to_crop(self, box) -> np.ndarray:
        cx, cy, w, h = box
        s = self.side
        return np.array([(cx - self.x0) / s, (cy - self.y0) / s, w / s, h / s])

    def to_canvas(self, box) -> np.ndarray:
        cx, cy, w, h = box
        s = self.side
        return np.array([cx * s + self.x0, cy * s + self.y0, w * s, h * s])

    def sample(self, image: np.ndarray) -> np.ndarray:
        """Bilinear resample of a [H, W] image; outside the canvas reads as zero."""
        u = (np.arange(self.out_size) + 0.5) * (self.side / self.out_size)
        ys = self.y0 + u - 0.5
        xs = self.x0 + u - 0.5
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return map_coordinates(image, [yy, xx], order=1, mode="constant", cval=0.0)


def crop(image: np.ndarray, box, factor: float, out_size: int) -> tuple[np.ndarray, CropWindow]:
    """Square crop of side ``factor * sqrt(w h)`` centred on ``box``; returns [3, S, S]."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    win = CropWindow.around(box, factor, out_size)
    patch = win.sample(image)
    return np.broadcast_to(patch, (3,) + patch.shape), win


@dataclass
class CropResult:
    search: np.ndarray
    template: np.ndarray
    search_window: CropWindow
    template_window: CropWindow
    box: np.ndarray = field(default_factory=lambda: np.zeros(4))


def crop_regions(frame: np.ndarray, prev_box, search_factor: float = 4.0, template_factor: float = 2.0,
                 search_size: int = 64, template_size: int = 32, gt_box=None) -> CropResult:
    """Search and template crops around ``prev_box``; ``box`` is ``gt_box`` (default
    ``prev_box``) in normalised search-crop coordinates."""
    search, sw = crop(frame, prev_box, search_factor, search_size)
    template, tw = crop(frame, prev_box, template_factor, template_size)
    target = prev_box if gt_box is None else gt_box
    return CropResult(search, template, sw, tw, sw.to_crop(target))


# -- export ----------------------------------------------------------------------

def export_sequence(seq: SyntheticSequence, directory: str) -> str:
    """Write frames.npy and a manifest.json (spec, seed, boxes, occlusion flags)."""
    os.makedirs(directory, exist_ok=True)
    np.save(os.path.join(directory, "frames.npy"), seq.frames())
    manifest = {
        "spec": seq.spec.to_dict(),
        "seed": seq.spec.seed,
        "boxes": seq.boxes.tolist(),
        "occluded": seq.occluded.tolist(),
        "frames": "frames.npy",
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh)
    return path


class RecordedSequence:
    """A sequence backed by stored frames (from :func:`export_sequence`)."""

    def __init__(self, frames: np.ndarray, boxes: np.ndarray, occluded: np.ndarray, spec: dict | None = None):
        self._frames = np.asarray(frames, dtype=np.float64)
        self.boxes = np.asarray(boxes, dtype=np.float64)
        self.occluded = np.asarray(occluded, dtype=bool)
        self.spec = spec

    def __len__(self) -> int:
        return self._frames.shape[0]

    def render(self, t: int) -> np.ndarray:
        return self._frames[t]

    def frame(self, t: int) -> np.ndarray:
        g = self._frames[t]
        return np.broadcast_to(g, (3,) + g.shape)


def load_manifest(path: str) -> RecordedSequence:
    with open(path) as fh:
        m = json.load(fh)
    frames = np.load(os.path.join(os.path.dirname(path), m["frames"]))
    return RecordedSequence(frames, np.array(m["boxes"]), np.array(m["occluded"]), m.get("spec"))
