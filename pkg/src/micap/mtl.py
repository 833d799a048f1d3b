"""Multi-task training of a shared encoder with gradient accumulation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .captioner import caption_loss_terms
from .encoder import TAP_COUNT
from .nn import Linear, Module
from .tensor import Tensor

CAPTION_TASK = "captions"


class TaskHead(Module):
    """Pooled encoder features -> linear + GELU -> linear logits."""

    def __init__(self, n_in: int, n_out: int, kind: str, rng: np.random.Generator,
                 hidden: int = 128, dtype=np.float32):
        if kind not in ("single-label", "multi-label"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.fc = Linear(n_in, hidden, rng, dtype=dtype)
        self.out = Linear(hidden, n_out, rng, dtype=dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.out(F.gelu(self.fc(pooled)))

    def loss(self, logits: Tensor, labels) -> Tensor:
        if self.kind == "multi-label":
            return F.sigmoid_binary_cross_entropy(logits, labels)
        return F.softmax_cross_entropy(logits, labels)


@dataclass
class MTLStepResult:
    losses: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)   # parameter name -> accumulated gradient


def task_loss(encoder, head: TaskHead, images, labels) -> Tensor:
    x = Tensor(np.asarray(images, dtype=head.fc.weight.dtype))
    return head.loss(head(F.global_avg_pool(encoder(x, TAP_COUNT))), labels)


def mtl_step(encoder, heads: dict, batches: dict, caption=None, optimizer=None) -> MTLStepResult:
    """Backpropagate every task's loss in turn, then take at most one optimizer step.

    ``caption`` is ``(captioner, bag_images, tokens)``; the captioner must own ``encoder``.
    """
    if not batches and caption is None:
        raise ValueError("mtl_step needs at least one task batch")
    missing = set(batches) - set(heads)
    if missing:
        raise ValueError(f"no head for tasks {sorted(missing)}")
    named = [(f"encoder.{n}", p) for n, p in encoder.named_parameters()]
    for name in sorted(heads):
        named += [(f"{name}.{n}", p) for n, p in heads[name].named_parameters()]
    if caption is not None:
        captioner = caption[0]
        if captioner.encoder is not encoder:
            raise ValueError("the captioner does not share the task encoder")
        named += [(f"{CAPTION_TASK}.{n}", p) for n, p in captioner.named_parameters()
                  if not n.startswith("encoder.")]
    for _, p in named:
        p.grad = None

    result = MTLStepResult()
    for name in batches:
        images, labels = batches[name]
        loss = task_loss(encoder, heads[name], images, labels)
        loss.backward()
        result.losses[name] = loss.item()
    if caption is not None:
        captioner, bag_images, tokens = caption
        terms = caption_loss_terms(captioner, bag_images, tokens)
        loss = terms["forward"] + terms["backward"]
        loss.backward()
        result.losses[CAPTION_TASK] = loss.item()

    result.grads = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in named}
    if not all(np.isfinite(v) for v in result.losses.values()):
        raise FloatingPointError(f"non-finite task loss: {result.losses}")
    if optimizer is not None:
        optimizer.step()
    return result


def leave_one_out_schedule(tasks: list[str], target: str, include_captions: bool,
                           caption_task: str = CAPTION_TASK) -> list[str]:
    """Every task except ``target``; the caption corpus is appended (never left out) when requested."""
    if target not in tasks:
        raise ValueError(f"target {target!r} is not one of the tasks")
    kept = [t for t in tasks if t != target and t != caption_task]
    if include_captions:
        kept.append(caption_task)
    if not kept:
        raise ValueError("leaving out the only task leaves nothing to train on")
    return kept
