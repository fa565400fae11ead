"""Aligned, fused model inputs from motor features and neural channels.

Motor-action features arrive as T x D per-frame matrices; preprocessed
neural channels arrive as T x C hemoglobin matrices. Both are carried in
:class:`SpatioTemporalMatrix` and fused by channel concatenation once they
share a 1 Hz clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODALITIES = ("neural", "motor", "fused")
TASKS = ("pattern_cutting", "suturing")


@dataclass
class SpatioTemporalMatrix:
    """T x C time series with named channels and a modality tag."""

    data: np.ndarray
    sample_rate_hz: float
    channel_names: tuple[str, ...]
    modality: str

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("data must be a T x C matrix")
        t, c = self.data.shape
        if t < 1 or c < 1:
            raise ValueError("need at least one row and one channel")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("data contains non-finite entries")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        self.channel_names = tuple(str(n) for n in self.channel_names)
        if len(self.channel_names) != c:
            raise ValueError("channel_names length must match column count")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]


@dataclass
class TrialRecord:
    """One trial: identity, supervision targets, and both modality matrices."""

    trial_id: str
    subject_id: str
    task: str
    label: str
    score: float
    neural: SpatioTemporalMatrix
    motor: SpatioTemporalMatrix
    fused: SpatioTemporalMatrix | None = field(default=None)

    def __post_init__(self) -> None:
        if not str(self.subject_id):
            raise ValueError("subject_id must be non-empty")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")


def group_sizes(total: int, n_groups: int) -> list[int]:
    """Partition `total` channels into `n_groups` contiguous groups.

    Sizes are as equal as possible with the larger groups first, e.g.
    5 channels into 2 groups gives [3, 2].
    """
    if not 1 <= n_groups <= total:
        raise ValueError("group count must be in [1, total]")
    base, extra = divmod(total, n_groups)
    return [base + 1] * extra + [base] * (n_groups - extra)


def channel_group_gap(x: np.ndarray, d_prime: int) -> np.ndarray:
    """Average contiguous channel groups down to d_prime output channels."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be a T x D matrix")
    d = x.shape[1]
    if not 1 <= d_prime <= d:
        raise ValueError(f"d_prime must be in [1, {d}], got {d_prime}")
    sizes = group_sizes(d, d_prime)
    out = np.empty((x.shape[0], d_prime), dtype=np.float64)
    start = 0
    for j, size in enumerate(sizes):
        out[:, j] = x[:, start:start + size].mean(axis=1)
        start += size
    return out


def align_and_fuse(neural: SpatioTemporalMatrix,
                   motor: SpatioTemporalMatrix) -> SpatioTemporalMatrix:
    """Concatenate neural-then-motor channels on a shared clock.

    The longer series is tail-truncated to the shorter; mismatches after
    1 Hz resampling are at most a second, so no interpolation is done.
    """
    if neural.sample_rate_hz != motor.sample_rate_hz:
        raise ValueError("sample rates differ; resample before fusing")
    t = min(neural.n_samples, motor.n_samples)
    fused = np.concatenate([neural.data[:t], motor.data[:t]], axis=1)
    return SpatioTemporalMatrix(
        data=fused,
        sample_rate_hz=neural.sample_rate_hz,
        channel_names=neural.channel_names + motor.channel_names,
        modality="fused",
    )
