"""Ensembles of independently seeded cascades and their consensus outputs.

Member ``m`` is initialised and trained with seed ``base_seed + m``. The
consensus soft map is the plain mean of member soft maps, taken before any
argmax. Uncertainty is its per-pixel Shannon entropy in nats.
"""

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from hseg.errors import ConfigError, EnsembleError, TrainingError
from hseg.models import build_model
from hseg.training import TrainConfig, train_model

PATHOLOGY = (2, 3)


@dataclass(frozen=True)
class EnsembleConfig:
    k: int = 6
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    model_kind: str = "hunet"
    depth: int = 3
    base_channels: int = 8
    kernel_size: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"ensemble size k must be >= 1, got {self.k}")
        if self.model_kind not in ("hunet", "flat"):
            raise ConfigError(f"model_kind must be 'hunet' or 'flat', got {self.model_kind!r}")

    def member_seed(self, m):
        return self.base_seed + m


def train_member(dataset, config, m):
    seed = config.member_seed(m)
    model = build_model(config.model_kind, config.depth, config.base_channels,
                        config.kernel_size, seed=seed)
    try:
        return train_model(dataset, model, replace(config.train, seed=seed))
    except TrainingError as exc:
        raise TrainingError(str(exc), step=exc.step, member=m) from exc


def _train_member_job(args):
    return train_member(*args)


def train_ensemble(dataset, config, jobs=1):
    """Train ``config.k`` members; returns ``[(model, loss_trace), ...]`` by index.

    With ``jobs > 1`` members run in separate processes. Results are
    bit-identical to serial training.
    """
    work = [(dataset, config, m) for m in range(config.k)]
    if jobs <= 1 or config.k == 1:
        return [train_member(*w) for w in work]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(jobs, config.k), mp_context=ctx) as pool:
        return list(pool.map(_train_member_job, work))


def ensemble_predict(models, images):
    """Mean class and lung soft maps over members.

    ``images`` is ``[H, W]`` (returns ``[L, H, W]`` and ``[H, W]``) or
    ``[N, H, W]`` / ``[N, 1, H, W]`` (returns ``[N, L, H, W]`` and ``[N, H, W]``).
    """
    if not models:
        raise EnsembleError("ensemble has no members")
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    cls_sum = lung_sum = None
    for i, model in enumerate(models):
        lung, cls = model.predict(arr)
        if cls_sum is None:
            cls_sum, lung_sum = cls.astype(np.float64), lung[:, 0].astype(np.float64)
        elif cls.shape != cls_sum.shape:
            raise EnsembleError(f"member {i} output shape {cls.shape} != {cls_sum.shape}")
        else:
            cls_sum += cls
            lung_sum += lung[:, 0]
    k = len(models)
    cls_mean = (cls_sum / k).astype(np.float32)
    lung_mean = (lung_sum / k).astype(np.float32)
    if single:
        return cls_mean[0], lung_mean[0]
    return cls_mean, lung_mean


def hard_labels(soft):
    """Argmax over the label axis (``-3``); ties go to the lowest class index."""
    return np.argmax(np.asarray(soft), axis=-3).astype(np.uint8)


def uncertainty_map(soft):
    """Per-pixel entropy ``-sum p ln p`` with ``0 ln 0 = 0``."""
    p = np.asarray(soft, dtype=np.float64)
    plogp = np.zeros_like(p)
    pos = p > 0
    plogp[pos] = p[pos] * np.log(p[pos])
    return np.maximum(-plogp.sum(axis=-3), 0.0)


def slice_uncertainty(soft, labels=None):
    """Mean entropy over pixels labelled GGO or CON; 0 without such pixels.

    ``labels`` defaults to the argmax of ``soft``.
    """
    labels = hard_labels(soft) if labels is None else np.asarray(labels)
    ent = uncertainty_map(soft)
    if ent.shape != labels.shape:
        raise EnsembleError(f"soft map {ent.shape} and label map {labels.shape} differ")
    sel = np.isin(labels, PATHOLOGY)
    if not sel.any():
        return 0.0
    return float(ent[sel].mean())
