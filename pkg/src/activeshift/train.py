"""Training and evaluation loops for the CIFAR networks."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, prefetch, train_batches
from .nn import SGD, LinearSchedule, Network, StepSchedule
from .nn import checkpoint
from .nn.layers import BatchNorm

log = logging.getLogger("activeshift.train")


@dataclass
class RunConfig:
    iterations: int = 64000
    batch_size: int = 128
    lr: float = 0.1
    schedule: str = "step"  # step | linear
    milestones: tuple | None = None  # default: 50% and 75% of the run
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    shift_lr: float = 1e-2
    shift_norm: str = "layer"
    checkpoint_dir: str | None = None
    checkpoint_every: int = 4000
    eval_every: int = 2000
    log_every: int = 100
    seed: int = 0
    augment: bool = True
    prefetch: bool = False

    def resolved_milestones(self):
        if self.milestones is not None:
            return tuple(self.milestones)
        return (self.iterations // 2, self.iterations * 3 // 4)

    def make_schedule(self):
        if self.schedule == "linear":
            return LinearSchedule(self.lr, self.iterations)
        if self.schedule == "step":
            return StepSchedule(self.lr, self.resolved_milestones(), self.gamma)
        raise ValueError(f"unknown schedule {self.schedule!r}")


def make_optimizer(net: Network, cfg: RunConfig) -> SGD:
    return SGD(net.named_parameters(), cfg.make_schedule(), cfg.momentum, cfg.weight_decay,
               cfg.shift_lr, cfg.shift_norm)


def evaluate(net: Network, data: Dataset, batch_size=500):
    """Top-1 and top-5 accuracy (top-5 is None with fewer than 5 classes)."""
    logits = net.predict(data.x, batch_size)
    top1 = float(np.mean(np.argmax(logits, axis=1) == data.y))
    top5 = None
    if logits.shape[1] >= 5:
        best5 = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        top5 = float(np.mean(np.any(best5 == data.y[:, None], axis=1)))
    return top1, top5


def calibrate_bn(net: Network, data: Dataset, batch_size=128, batches=4, seed=0):
    """Populate BN running statistics with a few training-mode passes (no parameter updates)."""
    for _, x, _ in train_batches(data, batch_size, seed, 0, batches, augment_on=False):
        net.forward(x, training=True)


def _needs_calibration(net):
    return any(isinstance(layer, BatchNorm) and layer.batches_tracked == 0 for layer in net.layers())


def train(net: Network, train_data: Dataset, test_data: Dataset, cfg: RunConfig,
          resume=None, meta=None):
    """Run SGD from the checkpoint ``resume`` (or scratch) up to ``cfg.iterations``.

    Returns a metrics dict; ``metrics["losses"]`` holds the per-iteration
    training loss of this invocation.
    """
    opt = make_optimizer(net, cfg)
    start = 0
    if resume is not None:
        start = int(checkpoint.load(resume, net, opt).get("iteration", 0))
    meta = dict(meta or {})
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    losses, curve = [], []
    t0 = time.perf_counter()
    batches = train_batches(train_data, cfg.batch_size, cfg.seed, start, cfg.iterations, cfg.augment)
    if cfg.prefetch:
        batches = prefetch(batches)
    for it, x, y in batches:
        _, loss = net.forward(x, y)
        net.backward()
        opt.step(it)
        losses.append(loss)
        done = it + 1
        if cfg.log_every and done % cfg.log_every == 0:
            log.info("iter %d loss %.4f lr %.4g", done, loss, opt.lr(it))
        if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.iterations:
            top1, _ = evaluate(net, test_data)
            curve.append((done, top1))
            log.info("iter %d test top1 %.4f", done, top1)
        if ckpt_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            checkpoint.save(ckpt_dir / f"ckpt_{done:06d}.bin", net, opt, {**meta, "iteration": done})
    elapsed = time.perf_counter() - t0

    if _needs_calibration(net):
        calibrate_bn(net, train_data, cfg.batch_size, seed=cfg.seed)
    top1, top5 = evaluate(net, test_data)
    log.info("final test top1 %.4f", top1)
    if ckpt_dir:
        checkpoint.save(ckpt_dir / "final.bin", net, opt, {**meta, "iteration": max(start, cfg.iterations)})
    return {
        "iterations": max(start, cfg.iterations),
        "test_top1": top1,
        "test_top5": top5,
        "params": net.num_parameters(),
        "shift_params": net.num_parameters() - net.num_parameters(include_shift=False),
        "final_loss": losses[-1] if losses else None,
        "train_seconds": elapsed,
        "test_curve": curve,
        "losses": losses,
    }
