"""Neural-signal preprocessing.

Turns raw two-wavelength optical intensity recordings into clean, resampled,
normalized oxygenation (delta-HbO) channel matrices: optical density with
baseline correction, zero-phase band-pass filtering, spline-based motion
correction, Beer-Lambert conversion, uniform resampling and min-max scaling.

All functions are pure: they never mutate their inputs and are safe to run
concurrently across channels and trials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_smoothing_spline
from scipy.ndimage import uniform_filter1d
from scipy.signal import butter, sosfiltfilt


@dataclass
class IntensitySeries:
    """Raw detector intensities for one source-detector channel.

    ``samples`` is (T, W) with one column per wavelength, strictly positive,
    in arbitrary detector units.
    """

    samples: np.ndarray
    sample_rate_hz: float
    wavelengths_nm: tuple[float, ...]
    channel_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (T, W) matrix")
        if not np.all(self.samples > 0):
            raise ValueError("intensities must be strictly positive")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if len(self.wavelengths_nm) != self.samples.shape[1]:
            raise ValueError("one wavelength per sample column required")


@dataclass
class OdSeries:
    """Optical density (dimensionless), same layout as its source intensity."""

    samples: np.ndarray
    sample_rate_hz: float
    wavelengths_nm: tuple[float, ...]
    channel_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (T, W) matrix")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("optical density must be finite")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")


@dataclass
class HemoSeries:
    """Hemoglobin concentration changes (uM) for one channel."""

    delta_hbo: np.ndarray
    delta_hbr: np.ndarray
    sample_rate_hz: float
    channel_id: str = ""

    def __post_init__(self):
        self.delta_hbo = np.asarray(self.delta_hbo, dtype=np.float64)
        self.delta_hbr = np.asarray(self.delta_hbr, dtype=np.float64)
        if self.delta_hbo.shape != self.delta_hbr.shape:
            raise ValueError("delta_hbo and delta_hbr must have equal length")
        if not (np.all(np.isfinite(self.delta_hbo)) and np.all(np.isfinite(self.delta_hbr))):
            raise ValueError("concentrations must be finite")


def _default_extinction() -> np.ndarray:
    # Cope (1991) compilation at 760/850 nm, converted to 1/(uM*mm).
    # Rows = wavelengths, columns = [HbO, HbR]. Editable configuration;
    # downstream checks are forward/inverse round trips, so exact values
    # are not load-bearing.
    return np.array([[1.4866e-4, 3.8437e-4],
                     [2.5264e-4, 1.7986e-4]])


@dataclass
class MbllParams:
    """Beer-Lambert conversion constants for a two-wavelength channel.

    ``extinction`` is (2, 2) in 1/(uM*mm) with rows = wavelengths and
    columns = [HbO, HbR]; ``dpf`` is the per-wavelength differential
    pathlength factor and ``distance_mm`` the source-detector separation.
    """

    extinction: np.ndarray = field(default_factory=_default_extinction)
    dpf: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0]))
    distance_mm: float = 30.0

    def __post_init__(self):
        self.extinction = np.asarray(self.extinction, dtype=np.float64)
        self.dpf = np.asarray(self.dpf, dtype=np.float64)
        if self.extinction.shape != (2, 2):
            raise ValueError("extinction must be a 2x2 matrix")
        if abs(np.linalg.det(self.extinction)) <= 1e-12:
            raise ValueError("extinction matrix is singular")
        if not np.all(self.extinction > 0):
            raise ValueError("extinction coefficients must be positive")
        if self.dpf.shape != (2,) or not np.all(self.dpf > 0):
            raise ValueError("dpf must be two positive values")
        if self.distance_mm <= 0:
            raise ValueError("distance_mm must be positive")


def optical_density(intensity: IntensitySeries,
                    baseline_window: tuple[int, int] | None = None) -> OdSeries:
    """Convert intensity to optical density against a baseline window.

    OD[t, w] = -log10(I[t, w] / mean(I[window, w])), so the OD of the
    baseline window averages to ~0 per wavelength. The default window is
    the first 5 seconds.
    """
    samples = intensity.samples
    n = samples.shape[0]
    if baseline_window is None:
        baseline_window = (0, max(1, min(n, round(5.0 * intensity.sample_rate_hz))))
    start, stop = baseline_window
    if not (0 <= start < stop <= n):
        raise ValueError(f"baseline window [{start}, {stop}) empty or outside series of length {n}")
    baseline = samples[start:stop].mean(axis=0)
    od = -np.log10(samples / baseline)
    return OdSeries(od, intensity.sample_rate_hz, tuple(intensity.wavelengths_nm),
                    intensity.channel_id)


def bandpass_filter(od: OdSeries, low_hz: float = 0.01, high_hz: float = 0.5,
                    order: int = 3) -> OdSeries:
    """Zero-phase Butterworth band-pass, applied forward-backward per column.

    Removes DC and drift below ``low_hz`` and noise above ``high_hz`` without
    introducing phase lag. The series must be longer than the forward-backward
    warm-up of 3 * order * 2 samples.
    """
    fs = od.sample_rate_hz
    if not (0 < low_hz < high_hz < fs / 2):
        raise ValueError(f"cutoffs must satisfy 0 < {low_hz} < {high_hz} < {fs / 2} (Nyquist)")
    warmup = 3 * order * 2
    n = od.samples.shape[0]
    if n <= warmup:
        raise ValueError(f"series of length {n} shorter than "
                         f"filter warm-up ({warmup} samples)")
    sos = butter(order, [low_hz, high_hz], btype="bandpass", fs=fs, output="sos")
    # The low cutoff settles over ~1/low_hz seconds; pad generously (up to the
    # whole series) so edge transients stay out of the analysis window.
    padlen = int(min(n - 1, max(warmup, round(3 * fs / low_hz))))
    filtered = sosfiltfilt(sos, od.samples, axis=0, padlen=padlen)
    return OdSeries(filtered, fs, tuple(od.wavelengths_nm), od.channel_id)


def bandpass_gain(frequency_hz: float, sample_rate_hz: float,
                  low_hz: float = 0.01, high_hz: float = 0.5, order: int = 3) -> float:
    """Analytic amplitude gain of :func:`bandpass_filter` at one frequency.

    Forward-backward filtering squares the single-pass Butterworth magnitude.
    """
    from scipy.signal import sosfreqz
    sos = butter(order, [low_hz, high_hz], btype="bandpass", fs=sample_rate_hz, output="sos")
    _, h = sosfreqz(sos, worN=[frequency_hz], fs=sample_rate_hz)
    return float(np.abs(h[0]) ** 2)


def _moving_std(x: np.ndarray, window: int) -> np.ndarray:
    # E[x^2] - E[x]^2 with a centered boxcar; clamp tiny negatives from roundoff
    mean = uniform_filter1d(x, window, mode="nearest")
    mean_sq = uniform_filter1d(x * x, window, mode="nearest")
    var = np.maximum(mean_sq - mean * mean, 0.0)
    return np.sqrt(var)


def _segments(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) runs of True in a boolean mask."""
    edges = np.flatnonzero(np.diff(mask.astype(np.int8)))
    starts = list(edges[mask[edges + 1]] + 1)
    stops = list(edges[~mask[edges + 1]] + 1)
    if mask[0]:
        starts.insert(0, 0)
    if mask[-1]:
        stops.append(len(mask))
    return list(zip(starts, stops))


def spline_motion_correct(series: OdSeries, passes: int = 3,
                          detect_win_s: float = 1.0, detect_k: float = 3.0) -> OdSeries:
    """Remove motion artifacts by repeated spline fitting.

    Each pass flags samples whose moving standard deviation (window
    ``detect_win_s``) exceeds ``detect_k`` times the series-wide median
    moving-std, models every flagged segment with a cubic smoothing spline,
    subtracts it, and re-levels the segment to the mean of its neighbors.
    Length is always preserved; ``passes=0`` is the identity.
    """
    if passes < 0:
        raise ValueError("passes must be >= 0")
    fs = series.sample_rate_hz
    window = max(3, round(detect_win_s * fs))
    data = series.samples.copy()
    n = data.shape[0]
    for _ in range(passes):
        for col in range(data.shape[1]):
            x = data[:, col]
            mstd = _moving_std(x, window)
            threshold = detect_k * np.median(mstd)
            mask = mstd > threshold
            if not mask.any():
                continue
            for start, stop in _segments(mask):
                seg = x[start:stop]
                if stop - start >= 8:
                    idx = np.arange(start, stop, dtype=np.float64)
                    trend = make_smoothing_spline(idx, seg)(idx)
                else:
                    trend = seg  # too short to model; flatten outright
                left = x[max(0, start - window):start]
                right = x[stop:stop + window]
                neighbors = np.concatenate([left, right])
                level = neighbors.mean() if neighbors.size else seg.mean()
                x[start:stop] = (seg - trend) + level
    return OdSeries(data, fs, tuple(series.wavelengths_nm), series.channel_id)


def mbll_convert(od: OdSeries, params: MbllParams) -> HemoSeries:
    """Invert the Beer-Lambert forward model to concentration changes.

    Solves E @ [dHbO, dHbR] = dOD / (distance * dpf) per time step. Linear
    in the optical density, hence an exact inverse of :func:`mbll_forward`.
    """
    if od.samples.shape[1] != 2:
        raise ValueError("MBLL conversion requires exactly two wavelengths")
    scaled = od.samples / (params.distance_mm * params.dpf[None, :])
    conc = np.linalg.solve(params.extinction, scaled.T).T
    return HemoSeries(conc[:, 0], conc[:, 1], od.sample_rate_hz, od.channel_id)


def mbll_forward(delta_hbo: np.ndarray, delta_hbr: np.ndarray,
                 params: MbllParams, sample_rate_hz: float,
                 channel_id: str = "") -> OdSeries:
    """Forward-project concentration changes to optical density.

    dOD[t, w] = distance * dpf[w] * (E @ [dHbO[t], dHbR[t]])[w].
    """
    conc = np.stack([np.asarray(delta_hbo, dtype=np.float64),
                     np.asarray(delta_hbr, dtype=np.float64)], axis=1)
    od = (conc @ params.extinction.T) * (params.distance_mm * params.dpf[None, :])
    return OdSeries(od, sample_rate_hz, (760.0, 850.0), channel_id)


def resample_uniform(data: np.ndarray, sample_rate_hz: float,
                     target_hz: float = 1.0) -> tuple[np.ndarray, float]:
    """Linearly resample a (T, C) matrix onto a uniform ``target_hz`` grid.

    Output rows sit at t = 0, 1/target, 2/target, ... up to and including the
    last source timestamp, giving floor(duration * target) + 1 rows for
    duration (T - 1) / source rate.
    """
    data = np.asarray(data, dtype=np.float64)
    squeeze = data.ndim == 1
    if squeeze:
        data = data[:, None]
    n = data.shape[0]
    if n < 2:
        raise ValueError("resampling needs at least two samples")
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    ratio = sample_rate_hz / target_hz  # source samples per output step
    n_out = int(np.floor((n - 1) / ratio + 1e-9)) + 1
    positions = np.minimum(np.arange(n_out) * ratio, n - 1)
    src = np.arange(n, dtype=np.float64)
    out = np.empty((n_out, data.shape[1]))
    for col in range(data.shape[1]):
        out[:, col] = np.interp(positions, src, data[:, col])
    if squeeze:
        out = out[:, 0]
    return out, target_hz


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    """Scale each column of a (T, C) matrix to [0, 1].

    Constant columns map to 0.5 everywhere, keeping them centered instead of
    producing NaN. Idempotent on already-normalized input.
    """
    data = np.asarray(data, dtype=np.float64)
    squeeze = data.ndim == 1
    if squeeze:
        data = data[:, None]
    if data.shape[0] < 1:
        raise ValueError("matrix must have at least one row")
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    span = hi - lo
    out = np.empty_like(data)
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    out = (data - lo[None, :]) / safe[None, :]
    out[:, degenerate] = 0.5
    if squeeze:
        out = out[:, 0]
    return out
