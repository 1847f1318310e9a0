"""Infection extent and gravity per volume, with spread across ensemble members.

Lung cavity is healthy + GGO + CON taken from the class label map, so both
ratios come from one consistent segmentation.
"""

import csv
from dataclasses import dataclass

import numpy as np

from hseg.errors import UndefinedRatioError

HEALTHY, GGO, CON = 1, 2, 3
CSV_COLUMNS = ("volume_id", "n_lung", "n_ggo", "n_con", "extent", "gravity",
               "extent_std", "gravity_std", "excluded_members")


def class_counts(labels, num_labels=4):
    """Voxel count per class over a label map or a stack of slices."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("class_counts needs a non-empty label stack")
    return np.bincount(labels.reshape(-1), minlength=num_labels)[:num_labels].astype(np.int64)


def lung_count(counts):
    return int(counts[HEALTHY] + counts[GGO] + counts[CON])


def extent_ratio(counts):
    """(GGO + CON) / (healthy + GGO + CON)."""
    lung = lung_count(counts)
    if lung == 0:
        raise UndefinedRatioError("extent ratio undefined: no lung voxels")
    return (int(counts[GGO]) + int(counts[CON])) / lung


def gravity_ratio(counts):
    """CON / (GGO + CON)."""
    infected = int(counts[GGO]) + int(counts[CON])
    if infected == 0:
        raise UndefinedRatioError("gravity ratio undefined: no infected voxels")
    return int(counts[CON]) / infected


def _ratio_or_none(fn, counts):
    try:
        return fn(counts)
    except UndefinedRatioError:
        return None


def ratio_stats(values):
    """Mean and population std of the defined values, plus the excluded count."""
    defined = [v for v in values if v is not None]
    if not defined:
        raise UndefinedRatioError("ratio undefined for every ensemble member")
    arr = np.asarray(defined, dtype=np.float64)
    return float(arr.mean()), float(arr.std()), len(values) - len(defined)


def ensemble_ratio_stats(member_labelmaps):
    """``{"extent": (mean, std, excluded), "gravity": (...)}`` over members.

    A ratio that is undefined for every member maps to None.
    """
    counts = [class_counts(m) for m in member_labelmaps]
    if not counts:
        raise ValueError("need at least one ensemble member")
    out = {}
    for key, fn in (("extent", extent_ratio), ("gravity", gravity_ratio)):
        try:
            out[key] = ratio_stats([_ratio_or_none(fn, c) for c in counts])
        except UndefinedRatioError:
            out[key] = None
    return out


@dataclass
class SeverityReport:
    volume_id: str
    counts: np.ndarray
    extent: float
    gravity: float
    extent_std: float
    gravity_std: float
    excluded_members: int

    @property
    def n_lung(self):
        return lung_count(self.counts)

    def row(self):
        return [self.volume_id, self.n_lung, int(self.counts[GGO]), int(self.counts[CON]),
                self.extent, self.gravity, self.extent_std, self.gravity_std, self.excluded_members]


def volume_report(volume_id, consensus_labels, member_labelmaps=None):
    """Ratios from the consensus labels; spread from per-member labels."""
    counts = class_counts(consensus_labels)
    members = member_labelmaps if member_labelmaps else [consensus_labels]
    stats = ensemble_ratio_stats(members)
    excluded = max((s[2] for s in stats.values() if s is not None), default=len(members))
    return SeverityReport(
        volume_id, counts,
        _ratio_or_none(extent_ratio, counts),
        _ratio_or_none(gravity_ratio, counts),
        stats["extent"][1] if stats["extent"] else None,
        stats["gravity"][1] if stats["gravity"] else None,
        excluded,
    )


def write_reports_csv(path, reports):
    def fmt(v):
        if v is None:
            return "undefined"
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([fmt(v) for v in r.row()])
