"""Patch sampling, Adam, and the joint lung + class training loop."""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from hseg import losses as L
from hseg import tensor as T
from hseg.errors import ConfigError, GeometryError, TrainingError, UsageError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    patch_size: int = 32
    learning_rate: float = 2e-3
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    seed: int = 0
    lnet_loss_weight: float = 1.0
    augment_flip: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lnet_loss_weight < 0:
            raise ConfigError(f"lnet_loss_weight must be >= 0, got {self.lnet_loss_weight}")

    def check_model(self, model):
        if self.patch_size % model.divisor:
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by {model.divisor}")


class Adam:
    """Adam over a ``{name: ndarray}`` parameter mapping, updated in place."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def sample_patch(image, labels, patch_size, rng, flip=False):
    """Uniformly placed square crop of an image and its labels."""
    h, w = image.shape[-2:]
    if labels.shape[-2:] != (h, w):
        raise GeometryError(f"image {image.shape} and labels {labels.shape} differ in size")
    if patch_size > min(h, w):
        raise GeometryError(f"patch size {patch_size} exceeds image size {h}x{w}")
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    img = image[..., top:top + patch_size, left:left + patch_size]
    lab = labels[..., top:top + patch_size, left:left + patch_size]
    if flip and rng.random() < 0.5:
        img, lab = img[..., ::-1], lab[..., ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def lung_target(labels):
    """Binary lung-cavity mask (healthy, GGO or CON) as ``[N,1,H,W]`` floats."""
    return (np.asarray(labels) >= 1).astype(np.float32)[:, None]


def compute_losses(model, leaves, images, labels, loss_cfg, lnet_weight):
    lung, cls = model.forward(images, leaves)
    cnet = L.cnet_total_loss(cls, L.one_hot(labels, dtype=images.dtype), loss_cfg)
    if model.kind == "hunet":
        lnet = L.binary_ce_loss(lung, lung_target(labels).astype(images.dtype), loss_cfg.clip)
        total = cnet + lnet * lnet_weight
    else:
        lnet = None
        total = cnet
    return total, lnet, cnet


def train_step(model, batch, optimizer, config, loss_cfg=None, step=None):
    """One forward, backward and Adam update. Returns losses before the update."""
    images, labels = batch
    loss_cfg = loss_cfg or config.loss
    x = T.Tensor(images)
    with T.Tape() as tape:
        leaves = model.leaves()
        tape.watch(*leaves.values())
        total, lnet, cnet = compute_losses(model, leaves, x, labels, loss_cfg, config.lnet_loss_weight)
    values = (total.item(), lnet.item() if lnet is not None else 0.0, cnet.item())
    step = optimizer.t + 1 if step is None else step
    if not all(np.isfinite(values)):
        raise TrainingError(f"non-finite loss {values} at step {step}", step=step)
    grads = tape.backward(total)
    named = {name: grads[leaf] for name, leaf in leaves.items()}
    optimizer.step(model.params, named, config.learning_rate)
    return values


def train_model(dataset, model, config, progress=None):
    """Shuffle, batch and train for ``config.epochs`` epochs.

    ``dataset`` is ``(images [n,H,W], labels [n,H,W])``. Class weights left
    unset in ``config.loss`` are derived from these labels. Returns the model
    (trained in place) and a loss trace of ``(epoch, step, total, lnet, cnet)``.
    """
    images, labels = dataset
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise UsageError("cannot train on an empty dataset")
    config.check_model(model)
    loss_cfg = config.loss.resolve(labels)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.beta1, config.beta2, config.adam_eps)
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), config.batch_size):
            pairs = [sample_patch(images[i], labels[i], config.patch_size, rng, config.augment_flip)
                     for i in order[start:start + config.batch_size]]
            batch = (np.stack([p[0] for p in pairs])[:, None], np.stack([p[1] for p in pairs]))
            step += 1
            total, lnet, cnet = train_step(model, batch, opt, config, loss_cfg, step=step)
            trace.append((epoch, step, total, lnet, cnet))
        if progress is not None:
            progress(epoch, trace)
        log.debug("epoch %d mean loss %.4f", epoch,
                  np.mean([t[2] for t in trace if t[0] == epoch]))
    return model, trace


def epoch_means(trace):
    epochs = sorted({t[0] for t in trace})
    return [float(np.mean([t[2] for t in trace if t[0] == e])) for e in epochs]


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "total", "lnet", "cnet"])
        for epoch, step, total, lnet, cnet in trace:
            w.writerow([epoch, step, repr(total), repr(lnet), repr(cnet)])


def with_seed(config, seed):
    return replace(config, seed=seed)
