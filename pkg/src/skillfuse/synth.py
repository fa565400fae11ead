"""Seeded synthetic trials with a known skill latent.

Every downstream stage is verified against data generated here: neural
channels are hemodynamic-like responses pushed through the forward
Beer-Lambert model to raw two-wavelength intensities, motor channels
are smoothed random walks, and both encode a per-subject latent skill
whose class effect size is the `separation` knob.

Because the preprocessing chain min-max normalizes every channel,
absolute amplitude is invisible downstream. Skill is therefore encoded
in shape statistics that survive normalization: evoked-response size
relative to a fixed noise floor on the neural side, and path
efficiency (directed reach versus meander) on the motor side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .featurestream import TASKS, SpatioTemporalMatrix, TrialRecord
from .signalproc import MbllParams, mbll_forward

_TASK_CHANNELS = {"pattern_cutting": 6, "suturing": 8}
_TASK_RATES = {"pattern_cutting": 7.8125, "suturing": 5.0863}

LABEL_PASS = "pass"
LABEL_FAIL = "fail"


@dataclass
class SynthConfig:
    n_subjects: int = 8
    trials_per_subject: int = 10
    task: str = "pattern_cutting"
    separation: float = 3.0
    channels_neural: int | None = None  # per-task default when None
    channels_motor: int = 16
    duration_s: tuple[float, float] = (40.0, 60.0)
    fs_neural: float | None = None  # per-task default when None
    fs_motor: float = 30.0
    artifact_rate: float = 2.0  # spike events per minute
    rng_seed: int = 0
    class_fraction: float = 0.5  # share of subjects drawn from the high class
    score_offset: float = 60.0
    score_scale: float = 12.0
    score_noise: float = 1.0
    render_frames: bool = False  # emit toy video frames instead of features
    frame_fps: float = 2.0
    frame_size: int = 24

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.channels_neural is None:
            self.channels_neural = _TASK_CHANNELS[self.task]
        if self.fs_neural is None:
            self.fs_neural = _TASK_RATES[self.task]
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be >= 2")
        if self.trials_per_subject < 1:
            raise ValueError("trials_per_subject must be >= 1")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if self.channels_neural < 1 or self.channels_motor < 1:
            raise ValueError("channel counts must be positive")
        lo, hi = self.duration_s
        if not 0 < lo <= hi:
            raise ValueError("duration_s must be a positive (low, high) range")
        if self.fs_neural <= 0 or self.fs_motor <= 0:
            raise ValueError("sample rates must be positive")
        if self.artifact_rate < 0:
            raise ValueError("artifact_rate must be >= 0")
        if not 0.0 <= self.class_fraction <= 1.0:
            raise ValueError("class_fraction must lie in [0, 1]")
        if self.frame_fps <= 0:
            raise ValueError("frame_fps must be positive")
        if self.frame_size < 8:
            raise ValueError("frame_size must be >= 8")


def _sigmoid(x: float | np.ndarray):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# Skill-to-statistic maps. The offsets shift each modality's informative
# (non-saturated) stretch to opposite flanks of the skill range, so the
# two streams are complementary and their fusion resolves more of the
# continuum than either alone.
_NEURAL_SLOPE = 0.5  # per unit separation
_NEURAL_OFFSET = 0.3
_MOTOR_SLOPE = 1.2
_MOTOR_OFFSET = -0.3
_EXPRESSION_NOISE = 0.4  # per-trial, per-modality skill observation noise


def _neural_gain(expressed_skill: float, separation: float) -> float:
    """Evoked-response amplitude factor in (0.2, 1.8).

    Bounded monotone map of skill x separation, exactly 1.0 at zero
    separation regardless of skill.
    """
    return float(0.2 + 1.6 * _sigmoid(
        _NEURAL_SLOPE * separation * (expressed_skill + _NEURAL_OFFSET)))


def _motor_efficiency(expressed_skill: float) -> float:
    """Path efficiency in (0, 1), monotone in skill."""
    return float(_sigmoid(_MOTOR_SLOPE * (expressed_skill + _MOTOR_OFFSET)))


def _gamma_kernel(fs: float, shape: float = 6.0, scale_s: float = 0.9,
                  length_s: float = 20.0) -> np.ndarray:
    """Unimodal hemodynamic-like kernel, peak-normalized to 1."""
    tau = np.arange(0.0, length_s, 1.0 / fs)
    with np.errstate(divide="ignore"):
        g = tau ** (shape - 1.0) * np.exp(-tau / scale_s)
    return g / g.max()


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance 1/f noise via spectral shaping."""
    freqs = np.fft.rfftfreq(n)
    spectrum = rng.normal(size=freqs.size) + 1j * rng.normal(size=freqs.size)
    weights = np.zeros_like(freqs)
    weights[1:] = 1.0 / np.sqrt(freqs[1:])
    shaped = np.fft.irfft(spectrum * weights, n=n)
    return shaped / shaped.std()


def _event_times(duration: float, rng: np.random.Generator) -> np.ndarray:
    """Task events every ~10 s, clear of the baseline window and the end."""
    times = []
    t = 8.0
    while t < duration - 6.0:
        times.append(t)
        t += rng.uniform(8.0, 12.0)
    return np.asarray(times)


def _evoked(n: int, fs: float, events: np.ndarray,
            kernel: np.ndarray) -> np.ndarray:
    impulses = np.zeros(n)
    for t in events:
        idx = int(round(t * fs))
        if idx < n:
            impulses[idx] = 1.0
    return np.convolve(impulses, kernel)[:n]


def _spike_train(n: int, fs: float, rate_per_min: float,
                 rng: np.random.Generator) -> list[tuple[int, float, float]]:
    """(sample index, width in samples, signed amplitude) per artifact."""
    expected = rate_per_min * (n / fs) / 60.0
    count = rng.poisson(expected)
    spikes = []
    for _ in range(count):
        idx = int(rng.integers(0, n))
        width = rng.uniform(0.2, 0.8) * fs
        amp = rng.uniform(2.0, 5.0) * rng.choice([-1.0, 1.0])
        spikes.append((idx, width, amp))
    return spikes


def _neural_matrix(expressed_skill: float, config: SynthConfig,
                   duration: float, rng: np.random.Generator) -> np.ndarray:
    """Raw two-wavelength intensities, columns paired per channel."""
    fs = config.fs_neural
    n = int(round(duration * fs))
    kernel = _gamma_kernel(fs)
    events = _event_times(duration, rng)
    evoked_base = _evoked(n, fs, events, kernel)
    gain = _neural_gain(expressed_skill, config.separation)
    t_axis = np.arange(n) / fs
    spikes = _spike_train(n, fs, config.artifact_rate, rng)
    params = MbllParams()

    columns = []
    for _ in range(config.channels_neural):
        channel_gain = gain * rng.uniform(0.8, 1.2)
        drift = (0.3 * rng.uniform(0.5, 1.5)
                 * np.sin(2 * np.pi * rng.uniform(0.004, 0.008) * t_axis
                          + rng.uniform(0, 2 * np.pi)))
        hbo = (0.8 * channel_gain * evoked_base
               + drift
               + 0.25 * _pink_noise(n, rng))
        hbr = (-0.35 * 0.8 * channel_gain * evoked_base
               + 0.5 * drift
               + 0.15 * _pink_noise(n, rng))
        for idx, width, amp in spikes:
            offsets = np.arange(n) - idx
            bump = amp * rng.uniform(0.5, 1.5) * np.exp(
                -0.5 * (offsets / width) ** 2)
            hbo = hbo + bump
            hbr = hbr + 0.4 * bump
        od = mbll_forward(hbo, hbr, params, fs)
        i0 = rng.uniform(0.5, 1.5, size=2)
        intensity = i0[None, :] * np.power(10.0, -od.samples)
        columns.append(intensity)
    return np.concatenate(columns, axis=1)


def _motor_path(efficiency: float, drift: float, n: int,
                rng: np.random.Generator) -> np.ndarray:
    """One trajectory: a directed reach mixed with correlated wander.

    Skilled movement is economical, so efficiency in (0, 1) sets how
    much of the path is straight drift versus meander. The mixture is a
    shape statistic: channel-wise min-max scaling downstream removes
    amplitude but not the ramp-versus-walk distinction.
    """
    rho = 0.95  # hand wobble correlation per sample
    innovation = np.sqrt(1.0 - rho * rho)
    wander = np.cumsum(lfilter([innovation], [1.0, -rho],
                               rng.normal(size=n)))
    std = wander.std()
    if std > 0:
        wander = wander / std
    reach = np.linspace(0.0, 1.0, n) * drift
    return (1.0 - efficiency) * wander + efficiency * reach


def _motor_matrix(expressed_skill: float, config: SynthConfig,
                  duration: float, rng: np.random.Generator) -> np.ndarray:
    """Random-walk trajectories; path efficiency encodes skill.

    The reach direction is drawn once per trial and shared across
    channels so that downstream channel-group averaging reinforces the
    drift component instead of cancelling it.
    """
    n = int(round(duration * config.fs_motor))
    efficiency = _motor_efficiency(expressed_skill)
    direction = float(rng.choice((-1.0, 1.0)))
    out = np.empty((n, config.channels_motor))
    for c in range(config.channels_motor):
        drift = 3.0 * direction * rng.uniform(0.7, 1.3)
        out[:, c] = (_motor_path(efficiency, drift, n, rng)
                     + 0.08 * rng.normal(size=n))
    return out


def render_motor_frames(expressed_skill: float, config: SynthConfig,
                        duration: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Toy video: a bright tool tip wandering over a fixed backdrop.

    Path smoothness scales with skill exactly like the feature-level
    walks, so a frame backbone can recover the same latent. Returns
    (n_frames, frame_size, frame_size, 3) in [0, 1].
    """
    n = max(4, int(round(duration * config.frame_fps)))
    size = config.frame_size
    efficiency = _motor_efficiency(expressed_skill)
    path = np.empty((n, 2))
    for axis in range(2):
        drift = 3.0 * float(rng.choice((-1.0, 1.0))) * rng.uniform(0.7, 1.3)
        walk = _motor_path(efficiency, drift, n, rng)
        span = walk.max() - walk.min()
        walk = (walk - walk.min()) / (span if span > 0 else 1.0)
        path[:, axis] = 0.15 + 0.7 * walk
    backdrop = np.zeros((size, size, 3))
    backdrop[:, :, 2] = np.linspace(0.1, 0.35, size)[None, :]
    backdrop[:, :, 1] = np.linspace(0.05, 0.2, size)[:, None]
    tip_color = rng.uniform(0.7, 1.0, size=3)
    frames = np.empty((n, size, size, 3))
    for i in range(n):
        img = backdrop + rng.normal(0.0, 0.015, size=(size, size, 3))
        r = int(round(path[i, 0] * (size - 3)))
        c = int(round(path[i, 1] * (size - 3)))
        img[r:r + 3, c:c + 3] = tip_color
        frames[i] = np.clip(img, 0.0, 1.0)
    return frames


def _neural_channel_names(config: SynthConfig) -> tuple[str, ...]:
    names = []
    for c in range(config.channels_neural):
        names.append(f"pfc{c + 1:02d}_760nm")
        names.append(f"pfc{c + 1:02d}_850nm")
    return tuple(names)


def _motor_channel_names(config: SynthConfig) -> tuple[str, ...]:
    return tuple(f"m{c + 1:02d}" for c in range(config.channels_motor))


def skill_label(subject_skill: float) -> str:
    """Threshold on the noise-free latent; score noise plays no part."""
    return LABEL_PASS if subject_skill >= 0.0 else LABEL_FAIL


def generate_trial(subject_skill: float, config: SynthConfig,
                   rng: np.random.Generator, subject_id: str = "s00",
                   trial_id: str = "s00t00") -> TrialRecord:
    """One raw trial for a subject with the given latent skill.

    Each modality observes the skill through its own per-trial noise, so
    fusing them genuinely reduces uncertainty about the latent.
    """
    duration = rng.uniform(*config.duration_s)
    expressed_neural = subject_skill + _EXPRESSION_NOISE * rng.normal()
    expressed_motor = subject_skill + _EXPRESSION_NOISE * rng.normal()
    neural = _neural_matrix(expressed_neural, config, duration, rng)
    motor = _motor_matrix(expressed_motor, config, duration, rng)
    score = (config.score_offset + config.score_scale * subject_skill
             + config.score_noise * rng.normal())
    return TrialRecord(
        trial_id=trial_id,
        subject_id=subject_id,
        task=config.task,
        label=skill_label(subject_skill),
        score=float(score),
        neural=SpatioTemporalMatrix(neural, config.fs_neural,
                                    _neural_channel_names(config), "neural"),
        motor=SpatioTemporalMatrix(motor, config.fs_motor,
                                   _motor_channel_names(config), "motor"),
    )


def subject_skills(config: SynthConfig) -> dict[str, float]:
    """Latent skill per subject id, drawn once.

    A fixed count of subjects (class_fraction of them) sits `separation`
    within-class standard deviations above the rest.
    """
    rng = np.random.default_rng([config.rng_seed, 1])
    n_high = int(round(config.class_fraction * config.n_subjects))
    order = rng.permutation(config.n_subjects)
    high = set(order[:n_high].tolist())
    skills = {}
    for j in range(config.n_subjects):
        offset = 0.5 if j in high else -0.5
        skills[f"s{j:02d}"] = offset * config.separation + rng.normal()
    return skills


def _trial_rng(config: SynthConfig, subject_index: int,
               trial_index: int) -> np.random.Generator:
    return np.random.default_rng([config.rng_seed, 2, subject_index,
                                  trial_index])


def trial_frames(config: SynthConfig, subject_index: int, trial_index: int,
                 subject_skill: float) -> np.ndarray:
    """Frames for one trial, matching its duration bit-exactly.

    Uses a sibling seed stream so frame rendering never perturbs the
    feature-level draws of :func:`generate_trial`.
    """
    duration = _trial_rng(config, subject_index,
                          trial_index).uniform(*config.duration_s)
    frame_rng = np.random.default_rng([config.rng_seed, 3, subject_index,
                                       trial_index])
    expressed = subject_skill + _EXPRESSION_NOISE * frame_rng.normal()
    return render_motor_frames(expressed, config, duration, frame_rng)


def generate_dataset(config: SynthConfig) -> tuple[list[TrialRecord],
                                                   list[dict]]:
    """All trials plus one manifest row per trial.

    Manifest paths are relative file names; writing the files is the
    command-line layer's job.
    """
    skills = subject_skills(config)
    trials = []
    manifest = []
    for j, (subject_id, skill) in enumerate(sorted(skills.items())):
        for k in range(config.trials_per_subject):
            trial_id = f"{subject_id}t{k:02d}"
            record = generate_trial(skill, config, _trial_rng(config, j, k),
                                    subject_id=subject_id, trial_id=trial_id)
            trials.append(record)
            manifest.append({
                "trial_id": trial_id,
                "subject_id": subject_id,
                "task": record.task,
                "label": record.label,
                "score": f"{record.score:.6f}",
                "neural_path": f"{trial_id}_neural.csv",
                "motor_path": (f"{trial_id}_frames.bin" if config.render_frames
                               else f"{trial_id}_motor.csv"),
                "neural_fs_hz": repr(config.fs_neural),
                "motor_fps": repr(config.frame_fps if config.render_frames
                                  else config.fs_motor),
            })
    return trials, manifest
