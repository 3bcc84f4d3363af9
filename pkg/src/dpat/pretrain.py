"""Desk-scale stand-in for an image-pretrained backbone.

The frozen backbone is first fitted as a plain per-frame image classifier on
static sprite frames (shape recognition only, no motion). Spatial features are
then meaningful while any temporal understanding has to come from the
adapters, as with an image-pretrained ViT.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SHAPES, sprite_mask

_MEMO: dict[str, dict] = {}

CACHE_ENV = "DPAT_CACHE_DIR"


def static_frames(n: int, H: int, W: int, C: int, size: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    shapes = rng.integers(0, len(SHAPES), n)
    frames = np.zeros((n, H, W, C), dtype=np.float32)
    for i, s in enumerate(shapes):
        y = rng.integers(0, H - size + 1)
        x = rng.integers(0, W - size + 1)
        frames[i, y:y + size, x:x + size, :] = sprite_mask(SHAPES[s], size)[:, :, None]
    if noise > 0:
        frames = np.clip(frames + rng.normal(0, noise, frames.shape), 0, 1).astype(np.float32)
    return frames, shapes


def _key(backbone, cfg) -> str:
    m = cfg.model
    blob = json.dumps({
        "geometry": [m.blocks, m.dim, m.heads, m.mlp_ratio, m.patch, m.height, m.width, m.channels,
                     m.temporal_pos_embed],
        "seed": m.backbone_seed, "steps": m.pretrain_steps, "size": cfg.data.sprite_size,
    }, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def pretrain_backbone(backbone, cfg) -> None:
    """Fit ``backbone`` in place (deterministic in the config), then leave it frozen.

    Results are memoised per process and, when ``DPAT_CACHE_DIR`` is set,
    cached on disk.
    """
    steps = cfg.model.pretrain_steps
    if steps <= 0:
        return
    key = _key(backbone, cfg)
    state = _MEMO.get(key)
    cache_dir = os.environ.get(CACHE_ENV)
    path = Path(cache_dir) / f"backbone-{key}.pt" if cache_dir else None
    if state is None and path is not None and path.is_file():
        state = torch.load(path, weights_only=True)
    if state is None:
        state = _fit(backbone, cfg, steps)
        _MEMO[key] = state
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(state, path)
    else:
        _MEMO[key] = state
    backbone.load_state_dict({k: v.clone() for k, v in state.items()})
    for p in backbone.parameters():
        p.requires_grad_(False)


def _fit(backbone, cfg, steps: int) -> dict:
    m = cfg.model
    rng = np.random.default_rng(m.backbone_seed + 7919)
    gen = torch.Generator().manual_seed(m.backbone_seed + 7919)
    dtype = backbone.patch_proj.weight.dtype
    head = torch.nn.Linear(m.dim, len(SHAPES)).to(dtype)
    with torch.no_grad():
        head.weight.normal_(0, 0.02, generator=gen)
        head.bias.zero_()
    for p in backbone.parameters():
        p.requires_grad_(True)
    params = [p for n, p in backbone.named_parameters() if not n.startswith("temporal_embed")]
    if backbone.temporal_embed is not None:
        backbone.temporal_embed.requires_grad_(False)
    opt = torch.optim.Adam(params + list(head.parameters()), lr=1e-3)
    for step in range(steps):
        frames, shapes = static_frames(64, m.height, m.width, m.channels, cfg.data.sprite_size, 0.05, rng)
        x = torch.as_tensor(frames, dtype=dtype)[:, None]  # single-frame clips
        logits = head(backbone.plain_features(x, grad=True))
        loss = F.cross_entropy(logits, torch.as_tensor(shapes))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    for p in backbone.parameters():
        p.requires_grad_(False)
    return {k: v.detach().clone() for k, v in backbone.state_dict().items()}
