"""Two-stage decoupled training per task and selection-based inference.

Stage 1 tunes the prompts and the head with cross-entropy. Stage 2 tunes the
adapters, the current task key and the head with cross-entropy plus the
weighted matching loss. The joint baseline runs one phase over the union of
groups for twice the epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config
from .errors import ConfigurationError, DataError, ProtocolError
from .model import DPATModel
from .prompts import dualprompt_match_loss, match_loss, query_fn, select_task

PROMPT_GROUPS = ("g_T", "g_S", "e_T", "e_S")
ADAPTER_GROUPS = ("adapter_T", "adapter_S")
STAGE_GROUPS = {
    1: PROMPT_GROUPS + ("head",),
    2: ADAPTER_GROUPS + ("key", "head"),
    0: PROMPT_GROUPS + ADAPTER_GROUPS + ("key", "head"),  # joint-training baseline
}


@dataclass
class StagePlan:
    stage: int  # 1, 2, or 0 for the single joint phase
    groups: tuple
    base_lr: float
    epochs: int
    match_weight: float

    @property
    def uses_match_loss(self) -> bool:
        return self.stage in (0, 2)


def stage_plan(stage: int, cfg: Config) -> StagePlan:
    t = cfg.train
    if stage not in STAGE_GROUPS:
        raise ConfigurationError(f"unknown stage {stage}")
    groups = STAGE_GROUPS[stage]
    ablate = t.ablate
    drop = set()
    if ablate in ("agnostic-prefix", "all-prefixes"):
        drop |= {"g_T", "g_S"}
    if ablate == "all-prefixes":
        drop |= {"e_T", "e_S"}
    if ablate in ("temporal-adapter", "all-adapters"):
        drop.add("adapter_T")
    if ablate == "all-adapters":
        drop.add("adapter_S")
    groups = tuple(g for g in groups if g not in drop)
    if stage == 1:
        return StagePlan(1, groups, t.prompt_lr, t.epochs, 0.0)
    if stage == 2:
        return StagePlan(2, groups, t.adapter_lr, t.epochs, t.match_weight)
    return StagePlan(0, groups, t.prompt_lr, 2 * t.epochs, t.match_weight)


def trainable_params(model: DPATModel, plan: StagePlan, task: int) -> dict[str, list[torch.nn.Parameter]]:
    """Parameters per group for ``task``; only current-task prompts, key and head rows."""
    out: dict[str, list] = {}
    for g in plan.groups:
        if g == "g_T":
            ps = list(model.prompts.g_T.values())
        elif g == "g_S":
            ps = list(model.prompts.g_S.values())
        elif g in ("e_T", "e_S"):
            d = getattr(model.prompts, g)
            ps = [d[f"{task}_{layer}"] for layer in model.prompts.specific_range() if f"{task}_{layer}" in d]
        elif g == "adapter_T":
            ps = [p for a in model.adapters for p in a["T"].parameters()]
        elif g == "adapter_S":
            ps = [p for a in model.adapters for p in a["S"].parameters()]
        elif g == "key":
            ps = [model.keys.keys[task - 1]]
        else:
            ps = [model.head.weights[task - 1], model.head.biases[task - 1]]
        if ps:
            out[g] = ps
    return out


def group_lr(group: str, plan: StagePlan, cfg: Config) -> float:
    if group in PROMPT_GROUPS:
        return cfg.train.prompt_lr
    if group in ADAPTER_GROUPS or group == "key":
        return cfg.train.adapter_lr
    return plan.base_lr


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    if total_steps <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def task_classes(model: DPATModel, task: int) -> list[int]:
    s = model.head.task_slice(task)
    return list(range(s.start, s.stop))


def compute_loss(
    model: DPATModel,
    pixels: torch.Tensor,
    labels: torch.Tensor,
    queries: Optional[torch.Tensor],
    task: int,
    plan: StagePlan,
    mode: str = "dpat",
):
    """Return ``(total, cross_entropy, match)`` for one batch of ``task``.

    Logits are restricted to the current task's classes. The match term is the
    batch mean of the softmax-normalised matching loss (or the raw distance in
    ``dualprompt-loss`` mode) and enters only when the plan uses it.
    """
    classes = task_classes(model, task)
    labels = torch.as_tensor(labels, dtype=torch.long)
    lo, hi = classes[0], classes[-1]
    if bool(((labels < lo) | (labels > hi)).any()):
        raise DataError(f"labels {sorted(set(labels.tolist()))} fall outside task {task} classes {lo}..{hi}")
    logits = model(pixels, task, class_mask=classes)
    ce = F.cross_entropy(logits, labels)
    match = torch.zeros((), dtype=ce.dtype)
    if plan.uses_match_loss:
        if queries is None:
            raise ConfigurationError("stage-2 loss needs query features")
        if mode == "dualprompt-loss":
            match = dualprompt_match_loss(queries, model.keys.keys[task - 1]).mean()
        else:
            match = match_loss(queries, model.keys.matrix(task), task, model.keys.tau).mean()
    total = ce + plan.match_weight * match if plan.uses_match_loss else ce
    return total, ce, match


def to_tensor(pixels, model: DPATModel) -> torch.Tensor:
    return torch.as_tensor(np.asarray(pixels)).to(model.dtype)


@torch.no_grad()
def compute_queries(model: DPATModel, pixels, batch_size: int = 128) -> torch.Tensor:
    out = [query_fn(to_tensor(pixels[i:i + batch_size], model), model.backbone) for i in range(0, len(pixels), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, model.cfg.model.dim, dtype=model.dtype)


def _set_trainable(model: DPATModel, groups: dict) -> None:
    for p in model.parameters():
        p.requires_grad_(False)
    for ps in groups.values():
        for p in ps:
            p.requires_grad_(True)


def run_stage(
    model: DPATModel,
    plan: StagePlan,
    task: int,
    pixels,
    labels,
    queries: torch.Tensor,
    cfg: Config,
    log: Optional[Callable[[dict], None]] = None,
) -> None:
    groups = trainable_params(model, plan, task)
    _set_trainable(model, groups)
    n = len(labels)
    bs = cfg.train.batch_size
    steps_per_epoch = max(1, math.ceil(n / bs))
    total = steps_per_epoch * plan.epochs
    if not groups or total == 0 or n == 0:
        return
    param_groups = [{"params": ps, "lr": group_lr(g, plan, cfg), "name": g} for g, ps in groups.items()]
    base = [pg["lr"] for pg in param_groups]
    opt = torch.optim.Adam(param_groups)
    gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + task * 101 + plan.stage)
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    step = 0
    model.train()
    for epoch in range(plan.epochs):
        order = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            if cfg.train.cosine_schedule:
                for pg, lr in zip(opt.param_groups, base):
                    pg["lr"] = cosine_lr(step, total, lr)
            x = to_tensor(pixels[idx.numpy()], model)
            loss, ce, match = compute_loss(model, x, labels_t[idx], queries[idx], task, plan, cfg.train.mode)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += [loss.item() * len(idx), ce.item() * len(idx), match.item() * len(idx)]
            step += 1
        if log is not None:
            log({
                "task": task, "stage": plan.stage, "epoch": epoch + 1,
                "loss": sums[0] / n, "ce": sums[1] / n, "match": sums[2] / n,
                "lr": opt.param_groups[0]["lr"],
            })
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()


def train_task(
    model: DPATModel,
    pixels,
    labels,
    classes: Sequence[int],
    cfg: Config,
    log: Optional[Callable[[dict], None]] = None,
    stage_hook: Optional[Callable[[int, DPATModel], None]] = None,
) -> int:
    """Learn one task; ``classes`` are the task's head indices. Returns the task id.

    ``stage_hook(stage, model)`` fires after each stage (used by audits).
    """
    classes = list(classes)
    start = model.head.num_classes
    if any(c < start for c in classes):
        raise ProtocolError(f"task classes {classes} overlap classes of earlier tasks")
    if classes != list(range(start, start + len(classes))):
        raise ProtocolError(f"task classes must be the next contiguous head indices from {start}, got {classes}")
    task = model.add_task(len(classes))
    queries = compute_queries(model, pixels)
    if cfg.train.mode == "joint":
        run_stage(model, stage_plan(0, cfg), task, pixels, labels, queries, cfg, log)
        if stage_hook:
            stage_hook(0, model)
    else:
        for stage in (1, 2):
            run_stage(model, stage_plan(stage, cfg), task, pixels, labels, queries, cfg, log)
            if stage_hook:
                stage_hook(stage, model)
    return task


@torch.no_grad()
def evaluate(
    model: DPATModel,
    pixels,
    true_tasks: Optional[Sequence[int]] = None,
    oracle_selection: bool = False,
    batch_size: int = 128,
):
    """Predict classes without task identity.

    Each clip's query picks the nearest task key, whose task-specific prompts
    are then used for a forward pass over every class seen so far. Returns
    ``(predictions, selected_tasks)`` as numpy arrays. ``oracle_selection``
    substitutes ``true_tasks`` for the key lookup.
    """
    if model.num_tasks == 0:
        raise ConfigurationError("evaluate needs at least one trained task")
    model.eval()
    n = len(pixels)
    if oracle_selection:
        if true_tasks is None:
            raise ConfigurationError("oracle selection needs the true task ids")
        selected = torch.as_tensor(np.asarray(true_tasks), dtype=torch.long)
    else:
        queries = compute_queries(model, pixels, batch_size)
        selected = select_task(queries, model.keys.matrix()) if n else torch.zeros(0, dtype=torch.long)
    preds = torch.zeros(n, dtype=torch.long)
    for t in torch.unique(selected).tolist():
        idx = torch.nonzero(selected == t).flatten()
        for i in range(0, len(idx), batch_size):
            chunk = idx[i:i + batch_size]
            logits = model(to_tensor(pixels[chunk.numpy()], model), int(t))
            preds[chunk] = logits.argmax(dim=-1)
    return preds.numpy(), selected.numpy()


def evaluate_clip(clip, model: DPATModel) -> tuple[int, int]:
    """Single-clip convenience wrapper: ``(predicted class, selected task)``."""
    pred, sel = evaluate(model, np.asarray(clip.pixels)[None])
    return int(pred[0]), int(sel[0])
