"""Dual prompts, task keys and query-key matching.

Task ids and layer indices are 1-based throughout.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DegenerateInputError, SelectionError


class PromptSet(nn.Module):
    """Task-agnostic prompts ``g_T``/``g_S`` and per-task prompts ``e_T``/``e_S``.

    Each stored prompt has ``2 * length`` rows: the first half is prepended to
    the attention keys, the second half to the values.
    """

    def __init__(self, cfg, blocks: int, dim: int, generator=None):
        super().__init__()
        self.dim = dim
        self.blocks = blocks
        self.agnostic_layers = tuple(cfg.agnostic_layers)
        self.specific_layers = tuple(cfg.specific_layers)
        self.agnostic_rows = 2 * cfg.agnostic_length
        self.specific_rows = 2 * cfg.specific_length
        self.g_T = nn.ParameterDict()
        self.g_S = nn.ParameterDict()
        self.e_T = nn.ParameterDict()
        self.e_S = nn.ParameterDict()
        if self.agnostic_rows:
            for layer in self.agnostic_range():
                self.g_T[str(layer)] = self._new(self.agnostic_rows, generator)
                self.g_S[str(layer)] = self._new(self.agnostic_rows, generator)
        self.num_tasks = 0

    def _new(self, rows: int, generator, dtype=torch.float32) -> nn.Parameter:
        p = torch.empty(rows, self.dim, dtype=dtype)
        with torch.no_grad():
            p.uniform_(-1.0, 1.0, generator=generator)
        return nn.Parameter(p)

    def agnostic_range(self) -> range:
        return range(self.agnostic_layers[0], self.agnostic_layers[1] + 1)

    def specific_range(self) -> range:
        return range(self.specific_layers[0], self.specific_layers[1] + 1)

    def add_task(self, generator=None, dtype=torch.float32) -> int:
        self.num_tasks += 1
        t = self.num_tasks
        if self.specific_rows:
            for layer in self.specific_range():
                self.e_T[f"{t}_{layer}"] = self._new(self.specific_rows, generator, dtype)
                self.e_S[f"{t}_{layer}"] = self._new(self.specific_rows, generator, dtype)
        return t

    def specific(self, task: int) -> list[nn.Parameter]:
        return [d[f"{task}_{layer}"] for d in (self.e_T, self.e_S) for layer in self.specific_range() if f"{task}_{layer}" in d]

    def agnostic(self) -> list[nn.Parameter]:
        return list(self.g_T.values()) + list(self.g_S.values())

    def assemble(self, layer: int, task: Optional[int], use_agnostic: bool = True, use_specific: bool = True):
        """Return ``(p_T, p_S)`` for ``layer`` or ``None`` when the layer carries no prompt.

        ``task`` selects the task-specific prompt in the specific-layer range;
        ``task=None`` leaves those layers unprompted (used by the query pass).
        """
        if not 1 <= layer <= self.blocks:
            raise SelectionError(f"layer {layer} outside 1..{self.blocks}")
        if task is not None and not 1 <= task <= self.num_tasks:
            raise SelectionError(f"unknown task id {task} (have {self.num_tasks})")
        key = str(layer)
        if use_agnostic and key in self.g_T:
            return self.g_T[key], self.g_S[key]
        if use_specific and task is not None and f"{task}_{layer}" in self.e_T:
            return self.e_T[f"{task}_{layer}"], self.e_S[f"{task}_{layer}"]
        return None


def assemble_prompts(prompts: PromptSet, layer: int, task: Optional[int]):
    return prompts.assemble(layer, task)


class TaskKeyBank(nn.Module):
    """One learnable key per task plus the matching temperature."""

    def __init__(self, dim: int, tau: float = 0.1):
        super().__init__()
        if tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {tau}")
        self.dim = dim
        self.tau = tau
        self.keys = nn.ParameterList()

    def __len__(self):
        return len(self.keys)

    def add_key(self, generator=None, dtype=torch.float32) -> int:
        k = torch.empty(self.dim, dtype=dtype)
        with torch.no_grad():
            k.normal_(0.0, 1.0, generator=generator)
            k /= k.norm()
        self.keys.append(nn.Parameter(k))
        return len(self.keys)

    def matrix(self, upto: Optional[int] = None) -> torch.Tensor:
        if not len(self.keys):
            raise SelectionError("task key bank is empty")
        keys = list(self.keys)[: upto or len(self.keys)]
        return torch.stack(keys)


def cosine_distance(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """``1 - cos(q, k)`` for broadcastable ``q (..., D)`` and ``k (..., D)``."""
    qn = q.norm(dim=-1, keepdim=True)
    kn = k.norm(dim=-1, keepdim=True)
    if bool((qn == 0).any()) or bool((kn == 0).any()):
        raise DegenerateInputError("cosine distance undefined for a zero-norm query or key")
    return 1.0 - ((q / qn) * (k / kn)).sum(dim=-1)


def distances(q: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Distance matrix ``(B, K)`` (or ``(K,)`` for a single query)."""
    return cosine_distance(q.unsqueeze(-2), keys)


def match_loss(q: torch.Tensor, keys: torch.Tensor, t: int, tau: float) -> torch.Tensor:
    """Softmax-normalised matching loss against keys ``1..t``.

    ``-log(exp(-d_t / tau) / sum_{i<=t} exp(-d_i / tau))`` with ``d_i`` the
    cosine distance to key ``i``. Returns a scalar for a single query and a
    ``(B,)`` vector for a batch.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    if not 1 <= t <= keys.shape[0]:
        raise SelectionError(f"task {t} outside 1..{keys.shape[0]}")
    logits = -distances(q, keys[:t]) / tau
    return torch.logsumexp(logits, dim=-1) - logits[..., t - 1]


def match_loss_from_distances(d, t: int, tau: float) -> torch.Tensor:
    """Same loss evaluated from precomputed distances ``d`` (``(..., K)``)."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    d = torch.as_tensor(d)
    logits = -d[..., :t] / tau
    return torch.logsumexp(logits, dim=-1) - logits[..., t - 1]


def dualprompt_match_loss(q: torch.Tensor, k_t: torch.Tensor) -> torch.Tensor:
    """Raw distance to the current key (baseline matching objective)."""
    return cosine_distance(q, k_t)


def select_task(q: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """1-based index of the nearest key; ties go to the lowest index."""
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise SelectionError("cannot select a task from an empty key bank")
    d = distances(q, keys)
    # argmin returns the first occurrence of the minimum
    return torch.argmin(d, dim=-1) + 1


@torch.no_grad()
def query_fn(pixels: torch.Tensor, backbone) -> torch.Tensor:
    """Query features from the plain frozen backbone (no prompts, no adapters)."""
    return backbone.plain_features(pixels)
