"""Optimization recipe: Adam with coupled L2 decay, step schedule, training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import MixPolicy, apply_batch_mix
from .checkpoint import save_checkpoint
from .errors import ConfigurationError, InputError, NumericError
from .layers import softmax_xent
from .tensor import Tape, backward

log = logging.getLogger(__name__)

# batch size / weight decay / warmup per benchmark
PROFILES = {
    "ntu60": {"batch_size": 64},
    "ntu120": {"batch_size": 64},
    "nucla": {"batch_size": 16},
    "sbu": {"batch_size": 8, "weight_decay": 2e-4, "warmup_epochs": 30},
}


@dataclass
class TrainConfig:
    epochs: int = 800
    base_lr: float = 0.001
    lr_decay: float = 0.1
    milestones: tuple = (650, 730, 770)
    weight_decay: float = 1e-4
    batch_size: int = 64
    warmup_epochs: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mix: MixPolicy = field(default_factory=MixPolicy)

    def __post_init__(self):
        if isinstance(self.mix, dict):
            self.mix = MixPolicy(**self.mix)
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ConfigurationError("milestones must precede the final epoch")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")

    @classmethod
    def profile(cls, name, **overrides):
        try:
            base = dict(PROFILES[name])
        except KeyError:
            raise ConfigurationError(f"unknown dataset profile {name!r}") from None
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at(epoch, config):
    """Linear warmup from 0, then base rate decayed at each passed milestone."""
    if config.warmup_epochs and epoch < config.warmup_epochs:
        return config.base_lr * epoch / config.warmup_epochs
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.base_lr * config.lr_decay ** passed


class AdamState:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params, grads, state, lr, weight_decay=0.0):
    """One bias-corrected Adam update; decay enters the gradient (coupled L2)."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


@dataclass
class EvalResult:
    top1: float
    per_class: dict  # class -> (correct, total)

    def per_class_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "correct", "total", "accuracy"])
        for k in sorted(self.per_class):
            c, n = self.per_class[k]
            w.writerow([k, c, n, repr(c / n)])
        return buf.getvalue()


def accuracy_from_logits(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise InputError("cannot evaluate an empty split")
    truth = labels.argmax(axis=1) if labels.ndim == 2 else labels.astype(int)
    pred = logits.argmax(axis=1)
    per_class = {}
    for k in np.unique(truth):
        sel = truth == k
        per_class[int(k)] = (int((pred[sel] == k).sum()), int(sel.sum()))
    return EvalResult(float((pred == truth).mean()), per_class)


def evaluate(model, dataset, batch_size=64):
    if not dataset:
        raise InputError("cannot evaluate an empty split")
    logits = model.predict_logits(dataset, batch_size)
    return accuracy_from_logits(logits, np.stack([s.label for s in dataset]))


@dataclass
class TrainResult:
    metrics: list
    steps: int
    stopped_early: bool = False


def _snapshot(model):
    return [p.data.copy() for p in model.parameters()], [b.copy() for _, b in model.named_buffers()]


def _restore(model, snap):
    params, bufs = snap
    for p, d in zip(model.parameters(), params):
        p.data = d
    for (_, b), d in zip(model.named_buffers(), bufs):
        b[...] = d


def train_loop(model, dataset, config, val=None, log_path=None, checkpoint_path=None,
               partition=None, target_train_acc=None):
    """Train ``model`` on ``dataset``; returns per-epoch metrics.

    Each epoch shuffles with a seeded generator, mixes a fraction of every
    batch, and takes one Adam step per batch. Train accuracy is measured in
    eval mode on the unmixed data. ``target_train_acc`` stops early once
    reached. A non-finite loss restores the last finished epoch, writes it to
    ``checkpoint_path`` and raises :class:`NumericError`.
    """
    if not dataset:
        raise InputError("training set is empty")
    order_rng = np.random.default_rng(config.seed)
    mix_rng = np.random.default_rng([config.seed, 7])
    params = model.parameters()
    state = AdamState(params, config.beta1, config.beta2, config.eps)
    metrics = []
    good = _snapshot(model)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    stopped = False
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            order = order_rng.permutation(len(dataset))
            losses = []
            model.train()
            for start in range(0, len(order), config.batch_size):
                batch = [dataset[i] for i in order[start:start + config.batch_size]]
                if len(batch) >= 2:
                    batch = apply_batch_mix(batch, config.mix, partition, mix_rng)
                with Tape() as tape:
                    logits = model.forward_batch([s.data for s in batch])
                    loss = softmax_xent(logits, np.stack([s.label for s in batch]))
                    value = float(loss.data.reshape(()))
                    if not np.isfinite(value):
                        _restore(model, good)
                        if checkpoint_path:
                            save_checkpoint(checkpoint_path, model, state.step)
                        raise NumericError(f"loss diverged at epoch {epoch}")
                    model.zero_grad()
                    backward(loss, tape)
                adam_step(params, [p.grad for p in params], state, lr, config.weight_decay)
                losses.append(value * len(batch))
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": sum(losses) / len(dataset),
                "train_acc": evaluate(model, dataset).top1,
                "val_acc": evaluate(model, val).top1 if val else None,
            }
            metrics.append(record)
            log.debug("epoch %d loss %.4f acc %.3f", epoch, record["loss"], record["train_acc"])
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            good = _snapshot(model)
            if target_train_acc is not None and record["train_acc"] >= target_train_acc:
                stopped = True
                break
    finally:
        if log_fh:
            log_fh.close()
        model.zero_grad()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, state.step)
    return TrainResult(metrics, state.step, stopped)
