"""Segmentation quality measures: Dice, modified Hausdorff, pixel F1, Pearson."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.ndimage import binary_erosion

from hseg import kernels
from hseg.errors import DimensionError, UndefinedCorrelationError, UndefinedDistanceError

GGO, CON = 2, 3
PATHOLOGY = (GGO, CON)
CSV_COLUMNS = ("slice_id", "dice_ggo", "dice_con", "dice_binary",
               "mhd_ggo", "mhd_con", "mhd_binary", "pixel_f1")


def _same_shape(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != reference shape {gt.shape}")
    return pred, gt


def _mask(labels, label):
    if np.ndim(label) == 0:
        return labels == label
    return np.isin(labels, label)


def overlap_counts(pred, gt, label):
    """``(|P & G|, |P|, |G|)`` for a label or a tuple of labels merged into one."""
    pred, gt = _same_shape(pred, gt)
    p, g = _mask(pred, label), _mask(gt, label)
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def dice_from_counts(inter, n_pred, n_gt):
    if n_pred + n_gt == 0:
        return 1.0
    return 2.0 * inter / (n_pred + n_gt)


def dice_score(pred, gt, label):
    """2|P & G| / (|P| + |G|); 1 when both regions are empty."""
    return dice_from_counts(*overlap_counts(pred, gt, label))


def binary_pathology_dice(pred, gt):
    return dice_score(pred, gt, PATHOLOGY)


def boundary_points(mask):
    """Region pixels with at least one 8-neighbour outside the region.

    Pixels on the image border count as boundary. Returns ``(k, 2)`` float64
    ``(row, col)`` coordinates.
    """
    mask = np.asarray(mask, dtype=bool)
    inner = binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=0)
    return np.argwhere(mask & ~inner).astype(np.float64)


def directed_mean_distance(a, b):
    """Mean over ``a`` of the Euclidean distance to the nearest point of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    d = np.sqrt(kernels.min_sq_dists(a, b))
    return math.fsum(d) / len(a)


def mhd(a, b):
    """Modified Hausdorff distance between two non-empty 2-D point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedDistanceError(f"MHD undefined for empty point set (sizes {len(a)}, {len(b)})")
    return max(directed_mean_distance(a, b), directed_mean_distance(b, a))


def region_mhd(pred, gt, label):
    """MHD between the region boundaries of ``label``; None when either is empty."""
    pred, gt = _same_shape(pred, gt)
    a = boundary_points(_mask(pred, label))
    b = boundary_points(_mask(gt, label))
    if len(a) == 0 or len(b) == 0:
        return None
    return mhd(a, b)


def f1_counts(pred, gt, classes=PATHOLOGY):
    """Micro-averaged ``(tp, fp, fn)`` over the given classes."""
    pred, gt = _same_shape(pred, gt)
    tp = fp = fn = 0
    for c in classes:
        p, g = _mask(pred, c), _mask(gt, c)
        tp += int(np.count_nonzero(p & g))
        fp += int(np.count_nonzero(p & ~g))
        fn += int(np.count_nonzero(~p & g))
    return tp, fp, fn


def f1_from_counts(tp, fp, fn):
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def pixel_f1(pred, gt, classes=PATHOLOGY):
    """Pixel-wise F1 micro-averaged over the pathology classes."""
    return f1_from_counts(*f1_counts(pred, gt, classes))


def pearson(x, y):
    """Sample correlation and two-sided p-value from the t distribution."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson needs two equal-length 1-D inputs, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 3:
        raise DimensionError(f"pearson needs at least 3 samples, got {n}")
    dx = x - math.fsum(x) / n
    dy = y - math.fsum(y) / n
    sxx, syy = math.fsum(dx * dx), math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined: an input has zero variance")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    # P(|T| > t) for Student t with df degrees of freedom
    p = float(special.betainc(0.5 * df, 0.5, df / (df + t2)))
    return r, p


# ---------------------------------------------------------------------------
# reports


@dataclass
class SliceMetrics:
    slice_id: str
    dice_ggo: float
    dice_con: float
    dice_binary: float
    mhd_ggo: float = None
    mhd_con: float = None
    mhd_binary: float = None
    pixel_f1: float = None
    counts: dict = field(default_factory=dict, repr=False)


def slice_metrics(slice_id, pred, gt):
    counts = {
        "ggo": overlap_counts(pred, gt, GGO),
        "con": overlap_counts(pred, gt, CON),
        "binary": overlap_counts(pred, gt, PATHOLOGY),
        "f1": f1_counts(pred, gt),
    }
    return SliceMetrics(
        slice_id,
        dice_from_counts(*counts["ggo"]),
        dice_from_counts(*counts["con"]),
        dice_from_counts(*counts["binary"]),
        region_mhd(pred, gt, GGO),
        region_mhd(pred, gt, CON),
        region_mhd(pred, gt, PATHOLOGY),
        f1_from_counts(*counts["f1"]),
        counts,
    )


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, len(values)
    return float(np.mean(vals)), float(np.std(vals)), len(values) - len(vals)


@dataclass
class MetricReport:
    """Per-slice metrics plus a split-level aggregate.

    Aggregate Dice and F1 pool pixel counts over all slices. Aggregate MHD
    is the mean (and std) over slices where it is defined. ``excluded``
    counts the slices left out of each MHD mean.
    """

    slices: list
    dice: dict
    pixel_f1: float
    mhd_mean: dict
    mhd_std: dict
    excluded: dict

    @classmethod
    def from_slices(cls, slices):
        dice, mean, std, excl = {}, {}, {}, {}
        for key in ("ggo", "con", "binary"):
            inter = sum(s.counts[key][0] for s in slices)
            n_pred = sum(s.counts[key][1] for s in slices)
            n_gt = sum(s.counts[key][2] for s in slices)
            dice[key] = dice_from_counts(inter, n_pred, n_gt)
            mean[key], std[key], excl[key] = _mean_std([getattr(s, f"mhd_{key}") for s in slices])
        tp, fp, fn = (sum(s.counts["f1"][i] for s in slices) for i in range(3))
        return cls(list(slices), dice, f1_from_counts(tp, fp, fn), mean, std, excl)

    def aggregate_row(self):
        return ["ALL", self.dice["ggo"], self.dice["con"], self.dice["binary"],
                self.mhd_mean["ggo"], self.mhd_mean["con"], self.mhd_mean["binary"], self.pixel_f1]

    def rows(self):
        for s in self.slices:
            yield [s.slice_id, s.dice_ggo, s.dice_con, s.dice_binary,
                   s.mhd_ggo, s.mhd_con, s.mhd_binary, s.pixel_f1]
        yield self.aggregate_row()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for row in self.rows():
                w.writerow([_fmt(v) for v in row])

    def summary(self):
        def mhd_text(key):
            if self.mhd_mean[key] is None:
                return "n/a"
            return f"{self.mhd_mean[key]:.2f} +- {self.mhd_std[key]:.2f} (excluded {self.excluded[key]})"

        return (f"dice ggo={self.dice['ggo']:.4f} con={self.dice['con']:.4f} "
                f"binary={self.dice['binary']:.4f} | pixel_f1={self.pixel_f1:.4f} | "
                f"mhd ggo={mhd_text('ggo')} con={mhd_text('con')} binary={mhd_text('binary')}")


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def evaluate(pairs):
    """``pairs`` yields ``(slice_id, pred_labels, gt_labels)``."""
    return MetricReport.from_slices([slice_metrics(sid, p, g) for sid, p, g in pairs])
