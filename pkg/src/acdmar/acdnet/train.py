"""Adam training loop for the unrolled network."""
import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..metrics import masked_psnr
from . import checkpoint
from .model import Batch, LossWeights, forward_arrays, loss_and_grads, loss_tensor, network_forward

LOG_FIELDS = ("epoch", "step", "loss", "val_psnr", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 32
    patch_size: int = 64
    lr: float = 2e-4
    milestones: Sequence[int] = (50, 100, 150, 200)
    epochs: int = 300
    seed: int = 0
    flip: bool = True
    clip_norm: float = 10.0
    max_steps: Optional[int] = None
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.milestones = tuple(int(m) for m in self.milestones)

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch: halved at every milestone passed."""
        return self.lr * 0.5 ** sum(epoch >= m for m in self.milestones)

    @staticmethod
    def scaled_milestones(epochs, reference=(50, 100, 150, 200), reference_epochs=300):
        """Milestones of a shorter schedule at the same fractions of the run."""
        return tuple(max(1, round(m * epochs / reference_epochs)) for m in reference)

    @staticmethod
    def short_run_milestones(epochs, fractions=(0.6, 0.85)):
        """Late decay for budgets of a few hundred steps (see the desk config)."""
        return tuple(max(1, round(f * epochs)) for f in fractions)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr != 0.0:
                params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_meta(self):
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def restore(cls, state):
        opt = cls({}, state["beta1"], state["beta2"], state["eps"])
        opt.t = int(state["t"])
        opt.m = {k: np.array(v) for k, v in state["m"].items()}
        opt.v = {k: np.array(v) for k, v in state["v"].items()}
        return opt


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


def _crop_flip(scene, patch, rng, flip):
    H, W = scene.shape
    r = int(rng.integers(0, H - patch + 1))
    c = int(rng.integers(0, W - patch + 1))
    fv, fh = (bool(rng.integers(2)), bool(rng.integers(2))) if flip else (False, False)

    def cut(a):
        a = a[r:r + patch, c:c + patch]
        if fv:
            a = a[::-1]
        if fh:
            a = a[:, ::-1]
        return np.ascontiguousarray(a)
    return cut(scene.Y), cut(scene.I), cut(scene.X_gt), cut(scene.X_li)


def make_batches(scenes, cfg, epoch):
    """Shuffled, augmented mini-batches for one epoch (deterministic in seed and epoch)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(scenes))
    batches = []
    for s in range(0, len(order), cfg.batch_size):
        parts = [_crop_flip(scenes[i], cfg.patch_size, rng, cfg.flip) for i in order[s:s + cfg.batch_size]]
        batches.append(Batch(*(np.stack(x)[:, None] for x in zip(*parts))))
    return batches


def _check_dataset(scenes, cfg):
    if not scenes:
        raise ValueError("training set is empty")
    for s in scenes:
        if s.X_gt is None or s.X_li is None:
            raise ValueError("training scenes need X_gt and X_li")
        if cfg.patch_size > min(s.shape):
            raise ValueError(f"patch size {cfg.patch_size} exceeds image size {s.shape}")


def validation_psnr(net, scenes):
    """Mean masked PSNR of the eval-mode ``X^(T)`` over ``scenes``."""
    if not scenes:
        return math.nan
    vals = []
    for s in scenes:
        out = forward_arrays(net, Batch.from_scenes([s]), train=False)
        vals.append(masked_psnr(out["X"][-1][0], s.X_gt, s.I))
    return float(np.mean(vals))


def dataset_loss(net, scenes, weights, train=False):
    """Mean per-scene loss without touching parameters or BN statistics."""
    vals = []
    for s in scenes:
        b = Batch.from_scenes([s])
        out, _ = network_forward(net, b, train=train, update_stats=False)
        vals.append(float(loss_tensor(out, b, weights).value))
    return float(np.mean(vals))


@dataclass
class TrainResult:
    net: object
    log: list
    step_losses: list
    optimizer: Adam


def train(net, train_scenes, cfg, val_scenes=(), log_path=None, ckpt_path=None,
          resume=None, start_epoch=0, progress=None):
    """Train ``net`` in place and return a :class:`TrainResult`.

    Every epoch gets its own RNG seeded from ``(cfg.seed, epoch)``, so a run
    resumed from the checkpoint written after epoch ``e`` replays epochs
    ``e+1 ...`` exactly as the uninterrupted run would.
    """
    _check_dataset(list(train_scenes), cfg)
    opt = Adam.restore(resume) if resume is not None else Adam(net.params)
    step = opt.t
    log, step_losses = [], []
    append = log_path is not None and start_epoch > 0 and os.path.exists(log_path)
    fh = open(log_path, "a" if append else "w", newline="") if log_path is not None else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer and not append:
            writer.writerow(LOG_FIELDS)
        for epoch in range(start_epoch, cfg.epochs):
            lr = cfg.lr_at(epoch)
            losses = []
            for batch in make_batches(train_scenes, cfg, epoch):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                L, grads, _ = loss_and_grads(net, batch, cfg.weights, train=True, update_stats=True)
                clip_by_global_norm(grads, cfg.clip_norm)
                opt.step(net.params, grads, lr)
                step += 1
                losses.append(L)
                step_losses.append(L)
            if not losses:
                break
            row = (epoch, step, float(np.mean(losses)), validation_psnr(net, list(val_scenes)), lr)
            log.append(row)
            if writer:
                writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])
                fh.flush()
            if ckpt_path is not None:
                checkpoint.save(ckpt_path, net, opt, {"epoch": epoch, "step": step,
                                                      "train": cfg.to_dict()})
            if progress:
                progress(row)
    finally:
        if fh:
            fh.close()
    return TrainResult(net, log, step_losses, opt)
