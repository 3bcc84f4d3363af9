"""Adapted frozen video backbone.

A ViT-style image encoder whose weights stay frozen. Each block runs two
passes through its own attention weights: a temporal pass (attention over
frames at a fixed token position) and a spatial pass (attention over tokens
within a frame). Each pass is wrapped by a bottleneck adapter and may carry a
prefix prompt prepended to the attention keys and values.

Tensor layout is ``(B, T, N + 1, D)``; token 0 of each frame is the class
token.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import Config
from .errors import ConfigurationError, DimensionMismatchError, InvalidPromptError
from .pretrain import pretrain_backbone
from .prompts import PromptSet, TaskKeyBank

LN_EPS = 1e-6


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class Attention(nn.Module):
    """Multi-head self-attention weights (fused qkv projection + output projection)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)


def _split_prompt(prompt, dim: int):
    if prompt is None:
        return None
    if isinstance(prompt, (tuple, list)):
        pk, pv = prompt
        if pk.shape != pv.shape:
            raise InvalidPromptError(f"key/value halves differ in shape: {tuple(pk.shape)} vs {tuple(pv.shape)}")
    else:
        if prompt.ndim != 2:
            raise InvalidPromptError(f"prompt must be 2-D (L_p, D), got shape {tuple(prompt.shape)}")
        if prompt.shape[0] % 2:
            raise InvalidPromptError(f"prompt length {prompt.shape[0]} is odd; it must split into key/value halves")
        pk, pv = prompt.chunk(2, dim=0) if prompt.shape[0] else (prompt, prompt)
    if pk.ndim != 2 or pk.shape[-1] != dim:
        raise InvalidPromptError(f"prompt width {pk.shape[-1]} does not match embedding width {dim}")
    if pk.shape[0] == 0:
        return None
    return pk, pv


def prefix_msa(h: torch.Tensor, prompt, attn: Attention) -> torch.Tensor:
    """Multi-head attention over ``h`` with an optional prefix prompt.

    ``h`` has shape ``(S, L, D)`` (S independent sequences) or ``(L, D)``.
    ``prompt`` is ``None``, an ``(L_p, D)`` tensor whose first half is the key
    prefix and second half the value prefix, or an explicit ``(p_k, p_v)``
    pair. The prefixes are prepended to the key and value inputs before the
    frozen projections; queries come from ``h`` only, so the output keeps
    length ``L`` while each query attends over ``L_p / 2 + L`` positions.
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = h.unsqueeze(0)
    S, L, D = h.shape
    halves = _split_prompt(prompt, D)
    w_q, w_k, w_v = attn.qkv.weight.chunk(3, dim=0)
    b_q, b_k, b_v = attn.qkv.bias.chunk(3, dim=0)
    q = F.linear(h, w_q, b_q)
    if halves is None:
        k_in = v_in = h
    else:
        pk, pv = halves
        k_in = torch.cat([pk.to(h.dtype).expand(S, -1, -1), h], dim=1)
        v_in = torch.cat([pv.to(h.dtype).expand(S, -1, -1), h], dim=1)
    k = F.linear(k_in, w_k, b_k)
    v = F.linear(v_in, w_v, b_v)

    nh = attn.heads
    dh = D // nh
    q = q.view(S, L, nh, dh).transpose(1, 2)
    k = k.view(S, -1, nh, dh).transpose(1, 2)
    v = v.view(S, -1, nh, dh).transpose(1, 2)
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(S, L, D)
    out = attn.proj(out)
    return out[0] if squeeze else out


class Adapter(nn.Module):
    """Bottleneck adapter: up(act(down(x))). No internal residual."""

    def __init__(self, dim: int, ratio: float = 0.25, up_init_std: float = 0.0, generator=None):
        super().__init__()
        self.ratio = ratio
        self.hidden = max(1, round(ratio * dim))
        self.down = nn.Linear(dim, self.hidden)
        self.up = nn.Linear(self.hidden, dim)
        self.act = nn.GELU()
        with torch.no_grad():
            self.down.weight.normal_(0.0, 1.0 / math.sqrt(dim), generator=generator)
            self.down.bias.zero_()
            if up_init_std > 0:
                self.up.weight.normal_(0.0, up_init_std, generator=generator)
            else:
                self.up.weight.zero_()
            self.up.bias.zero_()

    def forward(self, x):
        return adapter_forward(x, self)


def adapter_forward(x: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    if x.shape[-1] != adapter.down.in_features:
        raise DimensionMismatchError(f"trailing dim {x.shape[-1]} != adapter width {adapter.down.in_features}")
    return adapter.up(adapter.act(adapter.down(x)))


class Block(nn.Module):
    """Frozen transformer block weights: pre-norm, attention, pre-norm, feed-forward."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def mlp(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def dpat_block(
    h: torch.Tensor,
    block: Block,
    prompts=None,
    temporal_adapter: Optional[Adapter] = None,
    spatial_adapter: Optional[Adapter] = None,
    *,
    temporal: bool = True,
    temporal_embed: Optional[torch.Tensor] = None,
    feedforward: bool = True,
) -> torch.Tensor:
    """One adapted block on ``h`` of shape ``(B, T, N + 1, D)``.

    Temporal pass: tokens are regrouped so each of the ``B * (N + 1)``
    sequences runs over the ``T`` frames, ``h_T = h + A_T(prefix_msa(p_T,
    LN(h)))``. Spatial pass: ``h_S = h_T + A_S(prefix_msa(p_S, LN(h_T)))`` over
    the ``N + 1`` tokens of each frame. Both passes share the block's frozen
    attention and first layer norm. The frozen feed-forward sublayer with its
    own residual follows when ``feedforward`` is set.

    ``temporal=False`` drops the temporal pass (ablated temporal adapter).
    ``spatial_adapter=None`` puts the frozen attention output straight onto
    the residual, which is the unadapted pretrained sublayer.
    """
    if h.ndim == 3:
        return dpat_block(
            h.unsqueeze(0), block, prompts, temporal_adapter, spatial_adapter,
            temporal=temporal, temporal_embed=temporal_embed, feedforward=feedforward,
        )[0]
    B, T, P, D = h.shape
    p_t, p_s = prompts if prompts is not None else (None, None)

    if temporal:
        if temporal_adapter is None:
            raise ConfigurationError("temporal pass requested without a temporal adapter")
        x = h.transpose(1, 2).reshape(B * P, T, D)
        y = F.layer_norm(x, (D,), block.norm1.weight, block.norm1.bias, LN_EPS)
        if temporal_embed is not None:
            y = y + temporal_embed
        x = x + temporal_adapter(prefix_msa(y, p_t, block.attn))
        h = x.reshape(B, P, T, D).transpose(1, 2)

    x = h.reshape(B * T, P, D)
    y = F.layer_norm(x, (D,), block.norm1.weight, block.norm1.bias, LN_EPS)
    a = prefix_msa(y, p_s, block.attn)
    x = x + (spatial_adapter(a) if spatial_adapter is not None else a)
    if feedforward:
        x = x + block.mlp(F.layer_norm(x, (D,), block.norm2.weight, block.norm2.bias, LN_EPS))
    return x.reshape(B, T, P, D)


class Backbone(nn.Module):
    """Frozen ViT weights (a seeded stand-in for pretrained weights)."""

    def __init__(self, cfg: Config):
        super().__init__()
        m = cfg.model
        self.patch = m.patch
        self.channels = m.channels
        self.num_patches = (m.height // m.patch) * (m.width // m.patch)
        self.patch_proj = nn.Linear(m.patch * m.patch * m.channels, m.dim)
        self.cls_token = nn.Parameter(torch.zeros(m.dim))
        self.pos_embed = nn.Parameter(torch.zeros(self.num_patches + 1, m.dim))
        self.temporal_embed = nn.Parameter(torch.zeros(m.frames, m.dim)) if m.temporal_pos_embed else None
        self.blocks = nn.ModuleList(Block(m.dim, m.heads, m.mlp_ratio) for _ in range(m.blocks))
        self.norm = nn.LayerNorm(m.dim, eps=LN_EPS)
        self._init(m.backbone_seed)
        pretrain_backbone(self, cfg)
        _freeze(self)

    @torch.no_grad()
    def _init(self, seed: int):
        g = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                module.weight.normal_(0.0, 1.0 / math.sqrt(module.in_features), generator=g)
                module.bias.normal_(0.0, 0.02, generator=g)
        self.cls_token.normal_(0.0, 1.0, generator=g)
        self.pos_embed.normal_(0.0, 1.0, generator=g)
        if self.temporal_embed is not None:
            self.temporal_embed.normal_(0.0, 1.0, generator=g)

    def patch_embed(self, pixels: torch.Tensor) -> torch.Tensor:
        """``(B, T, H, W, C)`` or ``(T, H, W, C)`` pixels -> ``(B, T, N + 1, D)`` tokens."""
        single = pixels.ndim == 4
        if single:
            pixels = pixels.unsqueeze(0)
        B, T, H, W, C = pixels.shape
        p = self.patch
        if H % p or W % p:
            raise DimensionMismatchError(f"frame {H}x{W} not divisible by patch size {p}")
        if C != self.channels or (H // p) * (W // p) != self.num_patches:
            raise DimensionMismatchError(
                f"clip geometry {H}x{W}x{C} does not match backbone ({self.num_patches} patches, {self.channels} channels)"
            )
        x = pixels.to(self.patch_proj.weight.dtype)
        x = x.reshape(B, T, H // p, p, W // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        x = x.reshape(B, T, self.num_patches, p * p * C)
        tokens = self.patch_proj(x)
        cls = self.cls_token.expand(B, T, 1, -1)
        z = torch.cat([cls, tokens], dim=2) + self.pos_embed
        return z[0] if single else z

    def plain_features(self, pixels: torch.Tensor, grad: bool = False) -> torch.Tensor:
        """Per-clip class-token feature of the unadapted frozen image model, mean over frames."""
        with torch.set_grad_enabled(grad and torch.is_grad_enabled()):
            return self._plain_features(pixels)

    def _plain_features(self, pixels):
        z = self.patch_embed(pixels)
        single = z.ndim == 3
        if single:
            z = z.unsqueeze(0)
        B, T, P, D = z.shape
        x = z.reshape(B * T, P, D)
        for blk in self.blocks:
            x = x + prefix_msa(F.layer_norm(x, (D,), blk.norm1.weight, blk.norm1.bias, LN_EPS), None, blk.attn)
            x = x + blk.mlp(F.layer_norm(x, (D,), blk.norm2.weight, blk.norm2.bias, LN_EPS))
        x = self.norm(x).reshape(B, T, P, D)
        feats = x[:, :, 0].mean(dim=1)
        return feats[0] if single else feats


class GrowingHead(nn.Module):
    """Linear classifier whose output width grows by one chunk per task."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()

    @property
    def num_classes(self) -> int:
        return sum(w.shape[0] for w in self.weights)

    def task_slice(self, task: int) -> slice:
        start = sum(w.shape[0] for w in self.weights[: task - 1])
        return slice(start, start + self.weights[task - 1].shape[0])

    def grow(self, n: int, generator=None, dtype=torch.float32):
        w = torch.empty(n, self.dim, dtype=dtype)
        with torch.no_grad():
            w.normal_(0.0, 0.02, generator=generator)
        self.weights.append(nn.Parameter(w))
        self.biases.append(nn.Parameter(torch.zeros(n, dtype=dtype)))

    def forward(self, feats):
        if not len(self.weights):
            raise ConfigurationError("classifier head has no classes yet")
        return F.linear(feats, torch.cat(list(self.weights)), torch.cat(list(self.biases)))


class DPATModel(nn.Module):
    """Frozen backbone plus adapters, prompts, task keys and a growing head."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        m = cfg.model
        dtype = torch.float64 if m.dtype == "float64" else torch.float32
        self.backbone = Backbone(cfg)
        g = torch.Generator().manual_seed(cfg.seed)
        self._gen = g
        self.adapters = nn.ModuleList(
            nn.ModuleDict({
                "T": Adapter(m.dim, m.adapter_ratio, m.adapter_up_init_std, generator=g),
                "S": Adapter(m.dim, m.adapter_ratio, m.adapter_up_init_std, generator=g),
            })
            for _ in range(m.blocks)
        )
        self.prompts = PromptSet(cfg.prompts, m.blocks, m.dim, generator=g)
        self.keys = TaskKeyBank(m.dim, cfg.train.tau)
        self.head = GrowingHead(m.dim)
        self.to(dtype)
        self.dtype = dtype

    # ---- task bookkeeping -------------------------------------------------
    @property
    def num_tasks(self) -> int:
        return len(self.keys)

    def add_task(self, num_classes: int) -> int:
        """Allocate prompts, key and head rows for a new task; return its 1-based id."""
        self.prompts.add_task(generator=self._gen, dtype=self.dtype)
        self.keys.add_key(generator=self._gen, dtype=self.dtype)
        self.head.grow(num_classes, generator=self._gen, dtype=self.dtype)
        return self.num_tasks

    # ---- ablation switches -------------------------------------------------
    @property
    def ablate(self) -> Optional[str]:
        return self.cfg.train.ablate

    def uses_temporal_pass(self) -> bool:
        return self.ablate not in ("temporal-adapter", "all-adapters")

    def uses_spatial_adapter(self) -> bool:
        return self.ablate != "all-adapters"

    def block_prompts(self, layer: int, task: Optional[int]):
        return self.prompts.assemble(
            layer,
            task,
            use_agnostic=self.ablate not in ("agnostic-prefix", "all-prefixes"),
            use_specific=self.ablate != "all-prefixes",
        )

    # ---- forward -------------------------------------------------------------
    def patch_embed(self, pixels):
        return self.backbone.patch_embed(pixels)

    def encode(self, pixels: torch.Tensor, task: Optional[int]) -> torch.Tensor:
        """Adapted token tensor after every block (before the final norm)."""
        z = self.patch_embed(pixels)
        single = z.ndim == 3
        if single:
            z = z.unsqueeze(0)
        temporal = self.uses_temporal_pass()
        spatial = self.uses_spatial_adapter()
        for i, blk in enumerate(self.backbone.blocks):
            ad = self.adapters[i]
            z = dpat_block(
                z,
                blk,
                self.block_prompts(i + 1, task),
                ad["T"],
                ad["S"] if spatial else None,
                temporal=temporal,
                temporal_embed=self.backbone.temporal_embed,
                feedforward=self.cfg.model.feedforward,
            )
        return z[0] if single else z

    def features(self, pixels: torch.Tensor, task: Optional[int]) -> torch.Tensor:
        z = self.encode(pixels, task)
        z = self.backbone.norm(z)
        return z[..., 0, :].mean(dim=-2)

    def forward(self, pixels: torch.Tensor, task: Optional[int] = None, class_mask: Optional[Sequence[int]] = None):
        """Logits over every head class; classes outside ``class_mask`` get ``-inf``."""
        logits = self.head(self.features(pixels, task))
        if class_mask is not None:
            logits = mask_logits(logits, class_mask)
        return logits


def mask_logits(logits: torch.Tensor, class_mask: Sequence[int]) -> torch.Tensor:
    idx = torch.as_tensor(list(class_mask), dtype=torch.long)
    width = logits.shape[-1]
    if len(idx) and int(idx.max()) >= width:
        raise ConfigurationError(f"class mask refers to class {int(idx.max())} but the head has {width} outputs")
    keep = torch.zeros(width, dtype=torch.bool)
    keep[idx] = True
    return logits.masked_fill(~keep, float("-inf"))
