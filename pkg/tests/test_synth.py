"""Generator contracts: determinism, structure, and signal properties."""

import numpy as np
import pytest

from skillfuse.assess import mann_whitney_test, repeat_runs, run_assessment
from skillfuse.cli import materialize_config, preprocess_trial
from skillfuse.explain import spearman_rho
from skillfuse.nnet import VbaNetConfig
from skillfuse.synth import (LABEL_FAIL, LABEL_PASS, SynthConfig,
                             generate_dataset, generate_trial, skill_label,
                             subject_skills, trial_frames)

PREP = materialize_config({})["preprocess"]


def tiny_config(**overrides):
    base = dict(n_subjects=3, trials_per_subject=2, duration_s=(6.0, 9.0),
                rng_seed=11)
    base.update(overrides)
    return SynthConfig(**base)


def default_net(head="classify", **overrides):
    base = dict(in_channels=1, conv_filters=8, se_reduction=4, head=head,
                learning_rate=2e-3, max_epochs=60, patience=10, rng_seed=0)
    base.update(overrides)
    return VbaNetConfig(**base)


# --- config validation ---------------------------------------------------

def test_task_defaults_resolve():
    cutting = SynthConfig(task="pattern_cutting")
    suturing = SynthConfig(task="suturing")
    assert cutting.channels_neural == 6
    assert cutting.fs_neural == 7.8125
    assert suturing.channels_neural == 8
    assert suturing.fs_neural == 5.0863


def test_explicit_channels_survive_task_defaults():
    cfg = SynthConfig(task="suturing", channels_neural=4, fs_neural=10.0)
    assert cfg.channels_neural == 4
    assert cfg.fs_neural == 10.0


@pytest.mark.parametrize("bad", [
    dict(n_subjects=1),
    dict(trials_per_subject=0),
    dict(separation=-0.5),
    dict(task="knot_tying"),
    dict(duration_s=(5.0, 4.0)),
    dict(duration_s=(0.0, 4.0)),
    dict(fs_motor=0.0),
    dict(artifact_rate=-1.0),
    dict(class_fraction=1.2),
    dict(frame_size=4),
    dict(frame_fps=0.0),
    dict(channels_motor=0),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_skill_label_threshold():
    assert skill_label(0.0) == LABEL_PASS
    assert skill_label(2.5) == LABEL_PASS
    assert skill_label(-1e-9) == LABEL_FAIL


# --- determinism ---------------------------------------------------------

def test_same_seed_bit_identical_dataset():
    cfg = tiny_config()
    trials_a, manifest_a = generate_dataset(cfg)
    trials_b, manifest_b = generate_dataset(tiny_config())
    assert manifest_a == manifest_b
    for a, b in zip(trials_a, trials_b):
        assert a.trial_id == b.trial_id
        assert a.score == b.score
        assert np.array_equal(a.neural.data, b.neural.data)
        assert np.array_equal(a.motor.data, b.motor.data)


def test_different_seed_differs():
    trials_a, _ = generate_dataset(tiny_config())
    trials_b, _ = generate_dataset(tiny_config(rng_seed=12))
    assert not np.array_equal(trials_a[0].neural.data,
                              trials_b[0].neural.data)


def test_generate_trial_deterministic_given_rng():
    cfg = tiny_config()
    a = generate_trial(0.7, cfg, np.random.default_rng(3))
    b = generate_trial(0.7, cfg, np.random.default_rng(3))
    assert a.score == b.score
    assert np.array_equal(a.neural.data, b.neural.data)
    assert np.array_equal(a.motor.data, b.motor.data)


def test_trials_independent_of_generation_order():
    # each trial derives its own rng, so regenerating one subject's
    # trial in isolation reproduces the dataset's copy
    cfg = tiny_config()
    trials, _ = generate_dataset(cfg)
    skills = subject_skills(cfg)
    probe = trials[3]  # subject index 1, trial index 1
    rng = np.random.default_rng([cfg.rng_seed, 2, 1, 1])
    rebuilt = generate_trial(skills["s01"], cfg, rng,
                             subject_id="s01", trial_id="s01t01")
    assert rebuilt.trial_id == probe.trial_id
    assert rebuilt.score == probe.score
    assert np.array_equal(rebuilt.neural.data, probe.neural.data)


# --- dataset structure ---------------------------------------------------

def test_manifest_row_count_8x10():
    trials, manifest = generate_dataset(
        SynthConfig(n_subjects=8, trials_per_subject=10,
                    duration_s=(6.0, 8.0), rng_seed=5))
    assert len(manifest) == 80
    assert len(trials) == 80


def test_subject_trials_share_id_and_label():
    trials, _ = generate_dataset(tiny_config(trials_per_subject=4))
    by_subject = {}
    for t in trials:
        by_subject.setdefault(t.subject_id, []).append(t)
    assert len(by_subject) == 3
    for subject_id, group in by_subject.items():
        assert len(group) == 4
        assert {t.subject_id for t in group} == {subject_id}
        assert len({t.label for t in group}) == 1


def test_manifest_rows_complete():
    cfg = tiny_config()
    _, manifest = generate_dataset(cfg)
    expected = ("trial_id", "subject_id", "task", "label", "score",
                "neural_path", "motor_path", "neural_fs_hz", "motor_fps")
    for row in manifest:
        assert tuple(row.keys()) == expected
        assert row["task"] == "pattern_cutting"
        assert row["label"] in (LABEL_PASS, LABEL_FAIL)
        float(row["score"])
        assert row["neural_path"] == f"{row['trial_id']}_neural.csv"
        assert row["motor_path"] == f"{row['trial_id']}_motor.csv"
        assert float(row["neural_fs_hz"]) == 7.8125
        assert float(row["motor_fps"]) == 30.0


def test_frames_mode_manifest_points_at_blobs():
    _, manifest = generate_dataset(tiny_config(render_frames=True,
                                               frame_fps=2.0))
    for row in manifest:
        assert row["motor_path"].endswith("_frames.bin")
        assert float(row["motor_fps"]) == 2.0


def test_matrix_shapes_match_config():
    cfg = tiny_config(channels_motor=5)
    trials, _ = generate_dataset(cfg)
    for t in trials:
        assert t.neural.n_channels == 2 * cfg.channels_neural
        assert t.motor.n_channels == 5
        n_expected = int(round(t.motor.n_samples / cfg.fs_motor
                               * cfg.fs_neural))
        assert abs(t.neural.n_samples - n_expected) <= 1


def test_class_fraction_controls_imbalance():
    # 15 of 16 subjects in the high class at wide separation mirrors a
    # strongly imbalanced cohort (45 pass / 3 fail trials)
    cfg = SynthConfig(n_subjects=16, trials_per_subject=3, separation=5.0,
                      duration_s=(6.0, 8.0), class_fraction=15 / 16,
                      rng_seed=2)
    trials, _ = generate_dataset(cfg)
    n_pass = sum(t.label == LABEL_PASS for t in trials)
    assert n_pass == 45
    assert len(trials) - n_pass == 3


def test_subject_skills_high_group_size():
    # wide separation so no unit-variance draw crosses the threshold
    cfg = tiny_config(n_subjects=10, class_fraction=0.3, separation=8.0)
    skills = subject_skills(cfg)
    assert len(skills) == 10
    assert sum(s >= 0 for s in skills.values()) == 3


# --- signal properties ----------------------------------------------------

def test_intensities_strictly_positive():
    trials, _ = generate_dataset(tiny_config(n_subjects=4,
                                             trials_per_subject=3))
    for t in trials:
        assert t.neural.data.min() > 0.0


def test_score_tracks_skill():
    cfg = SynthConfig(n_subjects=8, trials_per_subject=10,
                      duration_s=(6.0, 8.0), rng_seed=0)
    trials, _ = generate_dataset(cfg)
    skills = subject_skills(cfg)
    scores = np.array([t.score for t in trials])
    latent = np.array([skills[t.subject_id] for t in trials])
    assert spearman_rho(scores, latent) >= 0.9


def test_zero_separation_channel_means_indistinguishable():
    # one channel mean per trial keeps the samples independent; within a
    # trial all channels share the efficiency and direction draws
    cfg = SynthConfig(n_subjects=10, trials_per_subject=20, separation=0.0,
                      duration_s=(8.0, 12.0), rng_seed=0)
    trials, _ = generate_dataset(cfg)
    for modality in ("neural", "motor"):
        means = {LABEL_PASS: [], LABEL_FAIL: []}
        for t in trials:
            means[t.label].append(float(getattr(t, modality).data[:, 0]
                                        .mean()))
        _, p = mann_whitney_test(np.array(means[LABEL_PASS]),
                                 np.array(means[LABEL_FAIL]))
        assert p > 0.05, f"{modality} channel means separable at sep=0"


def test_separation_three_default_pipeline_accuracy(default_dataset):
    trials, _ = default_dataset
    result = run_assessment(trials, "fused", default_net(), seed=0)
    assert result.metric == "accuracy"
    assert result.value >= 0.9


def test_accuracy_non_decreasing_in_separation():
    # three-point trend on a reduced-size pipeline with fixed seeds
    means = []
    for sep in (0.0, 1.0, 3.0):
        cfg = SynthConfig(n_subjects=8, trials_per_subject=6,
                          separation=sep, duration_s=(20.0, 30.0),
                          rng_seed=0)
        trials, _ = generate_dataset(cfg)
        trials = [preprocess_trial(t, PREP) for t in trials]
        dist = repeat_runs(trials, "fused", default_net(max_epochs=40),
                           n=3, master_seed=0)
        means.append(float(np.mean(dist.values)))
    assert means[0] <= means[1] <= means[2], means


# --- frame rendering ------------------------------------------------------

def test_trial_frames_shape_and_range():
    cfg = tiny_config(render_frames=True, frame_fps=2.0, frame_size=16)
    skills = subject_skills(cfg)
    frames = trial_frames(cfg, 0, 0, skills["s00"])
    assert frames.ndim == 4
    assert frames.shape[1:] == (16, 16, 3)
    assert frames.shape[0] >= 4
    assert frames.min() >= 0.0 and frames.max() <= 1.0


def test_trial_frames_deterministic():
    cfg = tiny_config(render_frames=True)
    skills = subject_skills(cfg)
    a = trial_frames(cfg, 1, 0, skills["s01"])
    b = trial_frames(cfg, 1, 0, skills["s01"])
    assert np.array_equal(a, b)


def test_trial_frames_duration_matches_trial():
    # frames derive the duration from the trial's own rng stream
    cfg = tiny_config(render_frames=True, frame_fps=3.0)
    trials, _ = generate_dataset(cfg)
    skills = subject_skills(cfg)
    probe = trials[0]
    duration = probe.motor.n_samples / cfg.fs_motor
    frames = trial_frames(cfg, 0, 0, skills["s00"])
    assert frames.shape[0] == max(4, int(round(duration * cfg.frame_fps)))


def test_frames_do_not_perturb_features():
    # rendering frames must not change the feature-level draws
    cfg_plain = tiny_config()
    cfg_frames = tiny_config(render_frames=True)
    trials_a, _ = generate_dataset(cfg_plain)
    trials_b, _ = generate_dataset(cfg_frames)
    for a, b in zip(trials_a, trials_b):
        assert np.array_equal(a.neural.data, b.neural.data)
        assert np.array_equal(a.motor.data, b.motor.data)
