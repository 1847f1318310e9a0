"""Training objectives for the lung and class networks.

All losses sum over every pixel of the batch rather than averaging. The
optimizer's learning rate absorbs the scale.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from hseg import tensor as T
from hseg.errors import ConfigError, DimensionError

NUM_LABELS = 4
LOG_CLIP = 1e-7


WEIGHTING_SCHEMES = ("sqrt_inverse", "inverse", "uniform")


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and constants.

    ``class_weights=None`` means "derive from the training labels" using
    ``weighting``; the loss functions themselves treat None as unit weights.
    """

    class_weights: tuple = None
    weighting: str = "sqrt_inverse"
    lam: float = 0.5
    epsilon: float = 1e-6
    num_labels: int = NUM_LABELS
    clip: float = LOG_CLIP
    # separate Dice weights; None means share class_weights
    dice_weights: tuple = field(default=None)

    def __post_init__(self):
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if self.weighting not in WEIGHTING_SCHEMES:
            raise ConfigError(f"weighting must be one of {WEIGHTING_SCHEMES}, got {self.weighting!r}")
        if self.dice_weights is not None:
            object.__setattr__(self, "dice_weights", tuple(float(w) for w in self.dice_weights))
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.clip < 0.5:
            raise ConfigError(f"log clip must lie in (0, 0.5), got {self.clip}")
        for name in ("class_weights", "dice_weights"):
            w = getattr(self, name)
            if w is None:
                continue
            if len(w) != self.num_labels:
                raise ConfigError(f"{name} has {len(w)} entries, expected {self.num_labels}")
            if any(x < 0 or not np.isfinite(x) for x in w) or not any(x > 0 for x in w):
                raise ConfigError(f"{name} must be finite, nonnegative, and not all zero: {w}")

    @property
    def ce_class_weights(self):
        if self.class_weights is None:
            return (1.0,) * self.num_labels
        return self.class_weights

    @property
    def dice_class_weights(self):
        return self.dice_weights if self.dice_weights is not None else self.ce_class_weights

    def resolve(self, label_maps):
        """Fill in data-derived class weights when none were given."""
        if self.class_weights is not None:
            return self
        w = class_weights_from_labels(label_maps, self.weighting, self.num_labels)
        return replace(self, class_weights=w)


def inverse_frequency_weights(label_maps, num_labels=NUM_LABELS, power=1.0):
    """``freq ** -power`` per class, normalised to mean 1.

    Classes that never occur are counted once so the weight stays finite.
    """
    counts = np.zeros(num_labels, dtype=np.float64)
    for lab in label_maps:
        counts += np.bincount(np.asarray(lab).reshape(-1), minlength=num_labels)[:num_labels]
    freq = np.maximum(counts, 1.0) / max(counts.sum(), 1.0)
    w = freq ** -power
    return tuple(float(x) for x in w / w.mean())


def class_weights_from_labels(label_maps, scheme="sqrt_inverse", num_labels=NUM_LABELS):
    if scheme == "uniform":
        return (1.0,) * num_labels
    power = {"inverse": 1.0, "sqrt_inverse": 0.5}[scheme]
    return inverse_frequency_weights(label_maps, num_labels, power)


def one_hot(labels, num_labels=NUM_LABELS, dtype=np.float32):
    """``[N, H, W]`` integer labels -> ``[N, L, H, W]`` one-hot floats."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_labels:
        raise ValueError(f"labels must lie in [0, {num_labels})")
    eye = np.eye(num_labels, dtype=dtype)
    return np.ascontiguousarray(np.moveaxis(eye[labels], -1, 1))


def _const(x, like):
    return x if isinstance(x, T.Tensor) else T.Tensor(x, dtype=like.dtype)


def _check_shapes(pred, target):
    if tuple(pred.shape) != tuple(target.shape):
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")


def dice_loss_label(pred, target, label, epsilon=1e-6):
    """Soft Dice loss of one label summed over all pixels of the batch."""
    target = _const(target, pred)
    _check_shapes(pred, target)
    p = pred[:, label]
    y = target[:, label]
    overlap = (y * p).sum()
    denom = y.sum() + p.sum() + epsilon
    return 1.0 - 2.0 * overlap / denom


def weighted_dice_loss(pred, target, config):
    target = _const(target, pred)
    _check_shapes(pred, target)
    total = None
    for label, w in enumerate(config.dice_class_weights):
        if w == 0:
            continue
        term = dice_loss_label(pred, target, label, config.epsilon)
        term = term if w == 1 else term * w
        total = term if total is None else total + term
    return total


def weighted_ce_loss(pred, target, config):
    """Weighted categorical cross-entropy, summed over pixels."""
    target = _const(target, pred)
    _check_shapes(pred, target)
    w = np.asarray(config.ce_class_weights, dtype=pred.dtype).reshape(1, -1, 1, 1)
    weighted_target = T.Tensor(target.data * w, dtype=pred.dtype)
    logp = T.log(T.clip(pred, config.clip, 1.0 - config.clip))
    return -(weighted_target * logp).sum()


def binary_ce_loss(pred_lung, target_lung, clip=LOG_CLIP):
    """Two-class cross-entropy with unit weights for a sigmoid output."""
    target_lung = _const(target_lung, pred_lung)
    _check_shapes(pred_lung, target_lung)
    p = T.clip(pred_lung, clip, 1.0 - clip)
    y = target_lung
    return -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p)).sum()


def cnet_total_loss(pred, target, config):
    """``lam * WCE + (1 - lam) * weighted Dice``."""
    lam = config.lam
    ce = weighted_ce_loss(pred, target, config)
    dice = weighted_dice_loss(pred, target, config)
    return ce * lam + dice * (1.0 - lam)
