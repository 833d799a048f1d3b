"""Training loop for the captioner (optionally multi-task) with bag-aware batching."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, augment
from .captioner import MICCaptioner, caption_loss_terms, inference, save_checkpoint
from .corpus import Bag, ImageCache, compose_batches
from .mtl import CAPTION_TASK, TaskHead, mtl_step
from .nn import Adam, EarlyStopping
from .rng import make_generator
from .tokenizer import Vocab, encode_text

LOG_FIELDS = ("step", "epoch", "loss", "forward", "backward")


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    max_steps: int = 500
    max_epochs: int = 1000
    patience: int = 10
    max_images: int = 32
    augment: bool = False
    task_batch_size: int = 16
    task_hidden: int = 128


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_val: float | None = None
    steps: int = 0
    epochs: int = 0
    stopped_early: bool = False

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fields = list(LOG_FIELDS) + sorted({k for r in self.log for k in r} - set(LOG_FIELDS))
        w.writerow(fields)
        for row in self.log:
            w.writerow([repr(row[f]) if isinstance(row.get(f), float) else row.get(f, "") for f in fields])
        return buf.getvalue()


def validation_loss(model: MICCaptioner, bags: list[Bag], tokens: dict, cache: ImageCache,
                    max_images: int = 32) -> float:
    """Image-count-weighted mean of the two-direction loss over fixed (unshuffled) batches."""
    total, weight = 0.0, 0
    with inference(model):
        plan = compose_batches(bags, max_images, epoch_seed=0)
        by_id = {b.bag_id: b for b in bags}
        for batch in plan.batches:
            chunk = [by_id[i] for i in batch]
            terms = caption_loss_terms(model, [cache.bag(b) for b in chunk], [tokens[b.bag_id] for b in chunk])
            total += (terms["forward"].item() + terms["backward"].item()) * len(chunk)
            weight += len(chunk)
    return total / weight


def _task_batches(tasks: dict, rng: np.random.Generator, size: int) -> dict:
    out = {}
    for name, spec in tasks.items():
        x, y = spec.train
        idx = rng.choice(len(x), size=min(size, len(x)), replace=False)
        out[name] = (x[idx], y[idx])
    return out


def train_mic(model: MICCaptioner, train_bags: list[Bag], val_bags: list[Bag], vocab: Vocab,
              cfg: TrainConfig, seed: int, cache: ImageCache | None = None, out_dir=None,
              tasks: dict | None = None) -> TrainResult:
    """Adam on the two-direction caption loss; batches are re-planned every epoch.

    Early stopping watches the validation loss (the epoch's mean training loss when
    there is no validation set). The best model is checkpointed to ``out_dir/checkpoint``.
    ``tasks`` maps task ids to TaskSpecs trained jointly through the shared encoder.
    """
    if not train_bags:
        raise ValueError("no training bags")
    cache = cache or ImageCache(model.encoder_config.input_size)
    max_len = model.config.max_caption_len - 2
    tokens = {b.bag_id: encode_text(vocab, b.caption, max_len) for b in list(train_bags) + list(val_bags)}
    by_id = {b.bag_id: b for b in train_bags}
    tasks = tasks or {}
    heads = {}
    params = model.parameters()
    for name, spec in tasks.items():
        n_out = spec.train[1].shape[1] if spec.kind == "multi-label" else spec.arity
        heads[name] = TaskHead(model.encoder_config.out_channels, n_out, spec.kind,
                               make_generator(seed, "task-head", name), cfg.task_hidden, model.dtype)
        params += heads[name].parameters()
    opt = Adam(params, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience, mode="min")
    task_rng = make_generator(seed, "task-batches")
    policy = AugmentPolicy() if cfg.augment else None
    result = TrainResult()
    model.train()
    for epoch in range(cfg.max_epochs):
        plan = compose_batches(train_bags, cfg.max_images, epoch_seed=seed * 100003 + epoch)
        epoch_loss = []
        for b, batch in enumerate(plan.batches):
            if result.steps >= cfg.max_steps:
                break
            chunk = [by_id[i] for i in batch]
            images = [cache.bag(x) for x in chunk]
            if policy is not None:
                images = [augment(im, policy, int(make_generator(seed, "augment", epoch, b, j).integers(2**31)))
                          for j, im in enumerate(images)]
            caps = [tokens[x.bag_id] for x in chunk]
            row = {"step": result.steps, "epoch": epoch}
            if heads:
                step = mtl_step(model.encoder, heads, _task_batches(tasks, task_rng, cfg.task_batch_size),
                                (model, images, caps), optimizer=opt)
                row["loss"] = step.losses[CAPTION_TASK]
                row.update({f"task_{k}": v for k, v in step.losses.items() if k != CAPTION_TASK})
                row["forward"] = row["backward"] = ""
            else:
                opt.zero_grad()
                terms = caption_loss_terms(model, images, caps)
                loss = terms["forward"] + terms["backward"]
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at step {result.steps}")
                loss.backward()
                opt.step()
                row.update(loss=loss.item(), forward=terms["forward"].item(), backward=terms["backward"].item())
            if not all(np.isfinite(v) for v in row.values() if isinstance(v, float)):
                raise NumericError(f"non-finite loss at step {result.steps}")
            result.log.append(row)
            epoch_loss.append(row["loss"])
            result.steps += 1
        if not epoch_loss:
            break
        result.epochs = epoch + 1
        watch = (validation_loss(model, val_bags, tokens, cache, cfg.max_images) if val_bags
                 else float(np.mean(epoch_loss)))
        result.log[-1]["val_loss"] = watch
        if stopper.step(watch):
            result.best_val = watch
            if out_dir is not None:
                save_checkpoint(model, Path(out_dir) / "checkpoint",
                                {"step": result.steps, "val_loss": watch})
        if stopper.should_stop:
            result.stopped_early = True
            break
        if result.steps >= cfg.max_steps:
            break
    return result
