"""Moving-sprite video generator, clip augmentation and frame-folder ingestion.

Sprite classes factor into a shape (what) and a motion (how it moves), with
``label = shape_index * num_motions + motion_index``. Translation motions of
one shape produce the same frames in a different order, so telling them apart
needs temporal modelling.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, GenerationError

log = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring")
MOTIONS = ("up", "down", "left", "right", "clockwise", "counterclockwise")
_TRANSLATION = {"up": (0, -1), "down": (0, 1), "left": (-1, 0), "right": (1, 0)}


@dataclass
class VideoClip:
    pixels: np.ndarray  # (T, H, W, C) in [0, 1]
    label: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[0] < 1:
            raise DataError(f"clip pixels must have shape (T>=1, H, W, C), got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise DataError("clip pixels must lie in [0, 1]")
        if self.label < 0:
            raise DataError(f"label must be non-negative, got {self.label}")


@dataclass
class ClipSet:
    """Stacked clips ``(B, T, H, W, C)`` with integer labels."""

    pixels: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ClipSet":
        return ClipSet(self.pixels[idx], self.labels[idx], self.class_names)


@dataclass
class SpriteSpec:
    shape: str = "square"
    motion: str = "right"
    speed: int = 2
    noise: float = 0.0
    size: int = 8
    start: Optional[tuple] = None  # (x, y) of the sprite's top-left corner; None draws it from the seed
    channels: int = 3

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise GenerationError(f"unknown shape '{self.shape}'")
        if self.motion not in MOTIONS:
            raise GenerationError(f"unknown motion '{self.motion}'")
        if not 0 <= self.noise <= 0.5:
            raise GenerationError(f"noise level {self.noise} outside [0, 0.5]")
        if self.speed < 0:
            raise GenerationError("speed must be non-negative")


def class_id(shape_index: int, motion_index: int, num_motions: int) -> int:
    return shape_index * num_motions + motion_index


def sprite_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    if shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "circle":
        m = (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2) ** 2
    elif shape == "triangle":
        m = np.abs(xx - c) <= yy / 2 + 0.5
    elif shape == "cross":
        w = max(1, size // 4)
        m = (np.abs(xx - c) < w) | (np.abs(yy - c) < w)
    elif shape == "diamond":
        m = np.abs(xx - c) + np.abs(yy - c) <= size / 2
    else:  # ring
        r = (xx - c) ** 2 + (yy - c) ** 2
        m = (r <= (size / 2) ** 2) & (r >= (size / 4) ** 2)
    return m.astype(np.float64)


def _reflect(p: int, lo: int, hi: int) -> int:
    """Fold ``p`` back into ``[lo, hi]`` as if bouncing off walls."""
    span = hi - lo
    if span == 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + (q if q <= span else 2 * span - q)


def trajectory(spec: SpriteSpec, T: int, H: int, W: int, start) -> list[tuple[int, int]]:
    """Top-left sprite corner per frame."""
    x0, y0 = start
    hi_x, hi_y = W - spec.size, H - spec.size
    if spec.motion in _TRANSLATION:
        dx, dy = _TRANSLATION[spec.motion]
        return [
            (_reflect(x0 + dx * spec.speed * t, 0, hi_x), _reflect(y0 + dy * spec.speed * t, 0, hi_y))
            for t in range(T)
        ]
    # circular motion around the frame centre; start fixes the phase via its angle
    cx, cy = hi_x / 2, hi_y / 2
    radius = max(1.0, min(math.hypot(x0 - cx, y0 - cy), cx, cy))
    phase = math.atan2(y0 - cy, x0 - cx)
    sign = 1 if spec.motion == "clockwise" else -1
    omega = spec.speed / radius
    pts = []
    for t in range(T):
        a = phase + sign * omega * t
        pts.append((int(round(min(max(cx + radius * math.cos(a), 0), hi_x))),
                    int(round(min(max(cy + radius * math.sin(a), 0), hi_y)))))
    return pts


def gen_clip(spec: SpriteSpec, T: int, H: int, W: int, seed: int, num_motions: int = len(MOTIONS)) -> VideoClip:
    """Render one clip; deterministic in ``(spec, seed)``."""
    if spec.size > H or spec.size > W:
        raise GenerationError(f"sprite of size {spec.size} does not fit a {H}x{W} frame")
    rng = np.random.default_rng(seed)
    start = spec.start
    if start is None:
        start = (int(rng.integers(0, W - spec.size + 1)), int(rng.integers(0, H - spec.size + 1)))
    mask = sprite_mask(spec.shape, spec.size)
    frames = np.zeros((T, H, W, spec.channels))
    for t, (x, y) in enumerate(trajectory(spec, T, H, W, start)):
        frames[t, y:y + spec.size, x:x + spec.size, :] = mask[:, :, None]
    if spec.noise > 0:
        frames = np.clip(frames + rng.normal(0.0, spec.noise, frames.shape), 0.0, 1.0)
    motion_index = MOTIONS.index(spec.motion)
    if motion_index >= num_motions:
        raise GenerationError(f"motion '{spec.motion}' not among the first {num_motions} motions")
    return VideoClip(frames, class_id(SHAPES.index(spec.shape), motion_index, num_motions))


def unbounced_start(motion: str, speed: int, T: int, H: int, W: int, size: int, rng) -> tuple[int, int]:
    """Random start from which a translation trajectory never touches a wall."""
    hi_x, hi_y = W - size, H - size
    travel = speed * (T - 1)
    dx, dy = _TRANSLATION.get(motion, (0, 0))

    def pick(d, hi):
        lo_s, hi_s = (0, hi - travel) if d > 0 else (travel, hi) if d < 0 else (0, hi)
        if lo_s > hi_s:
            lo_s, hi_s = 0, hi
        return int(rng.integers(lo_s, hi_s + 1))

    return pick(dx, hi_x), pick(dy, hi_y)


def make_sprite_dataset(
    shapes: int = 4,
    motions: int = 4,
    per_class: int = 32,
    T: int = 8,
    H: int = 32,
    W: int = 32,
    channels: int = 3,
    size: int = 10,
    speed: int = 2,
    noise: float = 0.05,
    seed: int = 0,
) -> ClipSet:
    """``shapes * motions`` classes, ``per_class`` clips each, ordered by class."""
    if shapes > len(SHAPES) or motions > len(MOTIONS):
        raise GenerationError("not enough sprite shapes or motions defined")
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    names = [f"{SHAPES[s]}-{MOTIONS[m]}" for s in range(shapes) for m in range(motions)]
    for s in range(shapes):
        for m in range(motions):
            for _ in range(per_class):
                start = unbounced_start(MOTIONS[m], speed, T, H, W, size, rng)
                spec = SpriteSpec(SHAPES[s], MOTIONS[m], speed, noise, size, start, channels)
                clip = gen_clip(spec, T, H, W, seed=int(rng.integers(2**31)), num_motions=motions)
                clips.append(clip.pixels)
                labels.append(clip.label)
    return ClipSet(np.stack(clips).astype(np.float32), np.asarray(labels, dtype=np.int64), names)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop: Optional[tuple] = None  # (h, w) crop window; None keeps the full frame
    out_size: Optional[tuple] = None  # resize target; None keeps the crop size
    flip_prob: float = 0.0
    motion_classes: bool = True  # horizontal flip would swap left/right labels, so it is disabled


def _resize_nearest(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    T, H, W, C = frames.shape
    rows = (np.arange(out_h) * H // out_h).astype(int)
    cols = (np.arange(out_w) * W // out_w).astype(int)
    return frames[:, rows][:, :, cols]


def augment(clip: VideoClip, config: AugmentConfig, seed: int):
    """Random crop(+resize) and horizontal flip shared by every frame of the clip.

    Returns ``(clip, info)``; ``info`` records the crop window ``(top, left, h, w)``
    and whether the clip was flipped. Labels never change.
    """
    rng = np.random.default_rng(seed)
    frames = clip.pixels
    T, H, W, C = frames.shape
    info = {"crop": (0, 0, H, W), "flipped": False}
    if config.crop is not None:
        ch, cw = config.crop
        if ch > H or cw > W:
            raise DataError(f"crop {ch}x{cw} larger than frame {H}x{W}")
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        frames = frames[:, top:top + ch, left:left + cw]
        info["crop"] = (top, left, ch, cw)
    if config.out_size is not None and tuple(config.out_size) != frames.shape[1:3]:
        frames = _resize_nearest(frames, *config.out_size)
    if config.flip_prob > 0 and not config.motion_classes and rng.random() < config.flip_prob:
        frames = frames[:, :, ::-1]
        info["flipped"] = True
    return VideoClip(np.ascontiguousarray(frames), clip.label), info


# ---------------------------------------------------------------------------
# ingestion


def _frame_index(path: Path) -> int:
    m = re.match(r"(\d+)$", path.stem)
    return int(m.group(1)) if m else -1


def subsample_indices(n: int, T: int) -> list[int]:
    """Uniform stride selection of ``T`` of ``n`` frames."""
    return [i * n // T for i in range(T)]


def ingest_folder(root, T: int) -> ClipSet:
    """Load ``<root>/<class>/<clip>/<frame-index>.png`` into a :class:`ClipSet`.

    Classes and clips are taken in lexicographic order and labelled by class
    position. Clips with fewer than ``T`` frames are skipped with a warning.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class folders under {root}")
    clips, labels = [], []
    for label, cdir in enumerate(class_dirs):
        clip_dirs = sorted(p for p in cdir.iterdir() if p.is_dir())
        kept = 0
        for clip_dir in clip_dirs:
            frames = sorted((p for p in clip_dir.glob("*.png") if _frame_index(p) >= 0), key=_frame_index)
            if len(frames) < T:
                log.warning("skipping %s: %d frames < %d", clip_dir, len(frames), T)
                continue
            arr = []
            for i in subsample_indices(len(frames), T):
                img = np.asarray(Image.open(frames[i]).convert("RGB"), dtype=np.float32) / 255.0
                arr.append(img)
            clips.append(np.stack(arr))
            labels.append(label)
            kept += 1
        if kept == 0:
            raise DataError(f"class folder {cdir} has no usable clips")
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise DataError(f"clips have differing frame geometry: {sorted(shapes)}")
    return ClipSet(np.stack(clips), np.asarray(labels, dtype=np.int64), [p.name for p in class_dirs])


def split_train_test(clips: ClipSet, test_fraction: float, seed: int) -> tuple[ClipSet, ClipSet]:
    """Per-class deterministic split keeping at least one training clip per class."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(clips.labels):
        idx = np.flatnonzero(clips.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = min(len(idx) - 1, int(round(test_fraction * len(idx))))
        test_idx.extend(sorted(idx[:n_test]))
        train_idx.extend(sorted(idx[n_test:]))
    return clips.subset(np.asarray(sorted(train_idx))), clips.subset(np.asarray(sorted(test_idx)))
