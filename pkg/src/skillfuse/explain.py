"""Class activation maps over the task timeline and their comparison.

The network head is a single dense layer on a time-pooled feature map, so
the class-c activation map is the head-weighted sum of pre-pool features;
averaging the map over time recovers the class logit exactly. Maps are
min-max normalized and resampled to a fixed length so trials of different
durations can be averaged and compared across modalities by rank
correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnet import TrainedModel
from .signalproc import minmax_normalize

CAM_LENGTH = 100


@dataclass
class CamCurve:
    values: np.ndarray
    class_or_head: str
    modality: str
    n_trials_averaged: int = 1

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size < 2:
            raise ValueError("a CAM curve needs at least 2 points")


def compute_cam(model: TrainedModel, x: np.ndarray, class_index: int = 0) -> np.ndarray:
    """CAM(t) = sum_k head_w[k, class] * A_k(t) with A the pre-pool map."""
    head_w = model.net.params["head_w"]
    if not 0 <= class_index < head_w.shape[1]:
        raise ValueError(f"class_index must be in [0, {head_w.shape[1]})")
    amap = model.activation_map(np.asarray(x, dtype=np.float64))
    return amap @ head_w[:, class_index]


def cam_logit(model: TrainedModel, cam: np.ndarray, class_index: int = 0) -> float:
    """GAP of the CAM plus the class bias; equals the model's logit."""
    return float(cam.mean() + model.net.params["head_b"][class_index])


def normalize_resample_cam(cam, length: int = CAM_LENGTH,
                           class_or_head: str = "", modality: str = "neural") -> CamCurve:
    """Min-max to [0,1] (constant maps to 0.5), linear resample to `length`."""
    cam = np.asarray(cam, dtype=np.float64)
    if cam.ndim != 1 or cam.size < 2:
        raise ValueError("cam must be a 1-D series with >= 2 points")
    if length < 2:
        raise ValueError("length must be >= 2")
    normalized = minmax_normalize(cam[:, None])[:, 0]
    positions = np.linspace(0.0, cam.size - 1.0, length)
    values = np.interp(positions, np.arange(cam.size), normalized)
    return CamCurve(values, class_or_head=class_or_head, modality=modality)


def average_cams(curves: list[CamCurve]) -> CamCurve:
    """Pointwise mean of equal-length curves; counts trials averaged."""
    if not curves:
        raise ValueError("no curves to average")
    lengths = {c.values.size for c in curves}
    if len(lengths) != 1:
        raise ValueError("curves must share a length")
    stacked = np.stack([c.values for c in curves])
    total = sum(c.n_trials_averaged for c in curves)
    return CamCurve(stacked.mean(axis=0),
                    class_or_head=curves[0].class_or_head,
                    modality=curves[0].modality,
                    n_trials_averaged=total)


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based average ranks, ties sharing their midrank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Pearson correlation of midranks.

    Constant input has no rank variance, so the coefficient is undefined
    and raises rather than returning a silent 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise ValueError("series lengths differ")
    if a.size < 3:
        raise ValueError("need at least 3 points")
    ra, rb = midranks(a), midranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    va, vb = float(da @ da), float(db @ db)
    if va == 0 or vb == 0:
        raise ValueError("constant input: rank correlation undefined")
    return float((da @ db) / math.sqrt(va * vb))
