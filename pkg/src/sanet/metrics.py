"""Pixel-count Jaccard / Dice with macro, micro and challenge-style averages."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

CLASS_NAMES = ("pigment_network", "negative_network", "milia_like_cyst", "globules", "streaks")


def binary_counts(pred, gt):
    """(intersection, union, predicted positives, ground-truth positives)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    return inter, union, int(np.count_nonzero(pred)), int(np.count_nonzero(gt))


def jaccard_dice(counts, empty_value=1.0):
    inter, union, pred_pos, gt_pos = counts
    if union == 0:
        return float(empty_value), float(empty_value)
    return inter / union, 2.0 * inter / (pred_pos + gt_pos)


def macro_average(values):
    return float(np.mean(np.asarray(values, dtype=np.float64)))


@dataclass
class MetricReport:
    jaccard: tuple
    dice: tuple
    macro_jaccard: float
    macro_dice: float
    micro_jaccard: float
    micro_dice: float
    challenge_jaccard: float
    challenge_dice: float

    def rows(self):
        """(name, jaccard, dice) rows: five classes, then the aggregates."""
        out = list(zip(CLASS_NAMES, self.jaccard, self.dice))
        out.append(("macro", self.macro_jaccard, self.macro_dice))
        out.append(("micro", self.micro_jaccard, self.micro_dice))
        out.append(("challenge_avg", self.challenge_jaccard, self.challenge_dice))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "jaccard", "dice"])
            for name, ja, di in self.rows():
                writer.writerow([name, f"{100 * ja:.2f}", f"{100 * di:.2f}"])


def aggregate(counts, empty_value=1.0):
    """Pool per-image counts of shape (images, 5, 4) into a report."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 3 or counts.shape[1:] != (len(CLASS_NAMES), 4) or counts.shape[0] < 1:
        raise ConfigurationError("counts must have shape (images >= 1, 5, 4)")
    per_class = counts.sum(axis=0)
    pairs = [jaccard_dice(c, empty_value) for c in per_class]
    ja = tuple(p[0] for p in pairs)
    di = tuple(p[1] for p in pairs)
    micro_ja, micro_di = jaccard_dice(per_class.sum(axis=0), empty_value)
    return MetricReport(
        jaccard=ja,
        dice=di,
        macro_jaccard=macro_average(ja),
        macro_dice=macro_average(di),
        micro_jaccard=micro_ja,
        micro_dice=micro_di,
        challenge_jaccard=macro_average(ja + (micro_ja,)),
        challenge_dice=macro_average(di + (micro_di,)),
    )


def image_counts(pred_masks, gt_masks):
    """Counts for one image's five mask pairs -> (5, 4)."""
    return np.array([binary_counts(p, g) for p, g in zip(pred_masks, gt_masks)], dtype=np.int64)
