"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: `synth` writes a raw dataset,
`preprocess` turns it into fused 1 Hz matrices, `train`/`assess` fit and
evaluate models, `compare` runs the significance protocol on two metric
distributions, `trust` and `cam` produce the interpretability artifacts,
and `report` bundles whatever a results directory holds.

Every run writes its fully materialized configuration next to its
outputs, all files are written atomically, and nothing records wall
time, so a rerun from the persisted config is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .assess import (MetricDistribution, repeat_runs, run_assessment,
                     significance_test)
from .contrastive import (BackboneConfig, Frame, extract_features,
                          read_frames_blob, train_contrastive,
                          write_frames_blob)
from .explain import average_cams, compute_cam, normalize_resample_cam
from .featurestream import (MODALITIES, TASKS, SpatioTemporalMatrix,
                            TrialRecord, align_and_fuse, channel_group_gap)
from .nnet import VbaNetConfig, save_model, train
from .signalproc import (IntensitySeries, MbllParams, bandpass_filter,
                         mbll_convert, minmax_normalize, optical_density,
                         resample_uniform, spline_motion_correct)
from .synth import SynthConfig, generate_dataset, subject_skills, trial_frames
from .trust import PredictionRecord, build_trust_spectrum

MANIFEST_FIELDS = ("trial_id", "subject_id", "task", "label", "score",
                   "neural_path", "motor_path", "neural_fs_hz", "motor_fps")

WAVELENGTHS_NM = (760.0, 850.0)


class ConfigError(ValueError):
    """Bad run configuration; maps to exit code 2."""


# --- run configuration ----------------------------------------------------------

_DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "raw_dir": "raw",
        "prep_dir": "prep",
        "results_dir": "results",
    },
    "synth": {
        "n_subjects": 8,
        "trials_per_subject": 10,
        "task": "pattern_cutting",
        "separation": 3.0,
        "channels_neural": None,
        "channels_motor": 16,
        "duration_s": [40.0, 60.0],
        "fs_neural": None,
        "fs_motor": 30.0,
        "artifact_rate": 2.0,
        "class_fraction": 0.5,
        "score_offset": 60.0,
        "score_scale": 12.0,
        "score_noise": 1.0,
        "render_frames": False,
        "frame_fps": 2.0,
        "frame_size": 24,
    },
    "preprocess": {
        "d_prime": 8,
        "baseline_window_s": 5.0,
        "low_hz": 0.01,
        "high_hz": 0.5,
        "filter_order": 3,
        "spline_passes": 3,
        "target_hz": 1.0,
    },
    "train": {
        "conv_filters": 8,
        "kernel": 3,
        "se_reduction": 4,
        "learning_rate": 2e-3,
        "max_epochs": 60,
        "patience": 10,
    },
    "assess": {
        "iterations": 100,
        "modality": "fused",
        "head": "classify",
        "jobs": 1,
    },
    "trust": {
        "alpha": 1.0,
        "beta": 1.0,
        "correct_only": False,
        "grid_points": 256,
    },
    "cam": {
        "resample_points": 100,
    },
    "contrastive": {
        "feature_dim": 8,
        "projection_dim": 16,
        "temperature": 0.5,
        "batch_size": 16,
        "epochs": 10,
        "patience": 5,
        "crop_size": 16,
        "conv_channels": [6, 8],
        "learning_rate": 3e-3,
        "val_fraction": 0.1,
        "max_train_frames": 256,
    },
}

# keys whose default None resolves per task at materialization time
_NULLABLE = {("synth", "channels_neural"), ("synth", "fs_neural")}


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def materialize_config(user: dict | None) -> dict:
    """Validate a user config against the schema and fill in every default."""
    user = user or {}
    if not isinstance(user, dict):
        raise ConfigError("run configuration must be a JSON object")
    cfg = json.loads(json.dumps(_DEFAULTS))  # deep copy
    for section, value in user.items():
        if section == "seed":
            if not _type_ok(value, 0):
                raise ConfigError("seed must be an integer")
            cfg["seed"] = value
            continue
        if section not in _DEFAULTS or section == "seed":
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, item in value.items():
            if key not in _DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            default = _DEFAULTS[section][key]
            if default is None or (section, key) in _NULLABLE:
                if item is not None and not isinstance(item, (int, float)):
                    raise ConfigError(f"{section}.{key} must be a number")
            elif not _type_ok(item, default):
                raise ConfigError(
                    f"{section}.{key} has type {type(item).__name__}, "
                    f"expected {type(default).__name__}")
            cfg[section][key] = item

    # resolve task-dependent defaults so the persisted copy is complete
    synth_cfg = synth_config(cfg)
    cfg["synth"]["channels_neural"] = synth_cfg.channels_neural
    cfg["synth"]["fs_neural"] = synth_cfg.fs_neural
    if cfg["assess"]["modality"] not in MODALITIES:
        raise ConfigError(f"assess.modality must be one of {MODALITIES}")
    if cfg["assess"]["head"] not in ("classify", "regress"):
        raise ConfigError("assess.head must be 'classify' or 'regress'")
    if cfg["assess"]["iterations"] < 2:
        raise ConfigError("assess.iterations must be >= 2")
    if cfg["assess"]["jobs"] < 1:
        raise ConfigError("assess.jobs must be >= 1")
    return cfg


def load_user_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc


def synth_config(cfg: dict) -> SynthConfig:
    section = dict(cfg["synth"])
    section["duration_s"] = tuple(section["duration_s"])
    try:
        return SynthConfig(rng_seed=cfg["seed"], **section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def net_config(cfg: dict, head: str, in_channels: int = 1) -> VbaNetConfig:
    try:
        return VbaNetConfig(in_channels=in_channels, head=head,
                            rng_seed=cfg["seed"], **cfg["train"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def backbone_config(cfg: dict) -> BackboneConfig:
    section = dict(cfg["contrastive"])
    section.pop("max_train_frames")
    section["conv_channels"] = tuple(section["conv_channels"])
    try:
        return BackboneConfig(rng_seed=cfg["seed"], **section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


# --- atomic file io ---------------------------------------------------------------

def atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_matrix_csv(path: str, matrix: SpatioTemporalMatrix) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(matrix.channel_names)
    for row in matrix.data:
        writer.writerow([repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_matrix_csv(path: str, sample_rate_hz: float,
                    modality: str) -> SpatioTemporalMatrix:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        names = tuple(next(reader))
        data = np.array([[float(v) for v in row] for row in reader])
    return SpatioTemporalMatrix(data, sample_rate_hz, names, modality)


def write_manifest(path: str, rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS,
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def read_manifest(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"unexpected manifest header in {path}")
        return list(reader)


# --- SVG charts ---------------------------------------------------------------------

_PALETTE = ("#2a6fdb", "#d1495b", "#3a7d44", "#8d6a9f", "#c77d1e", "#1b9aaa")


def svg_line_chart(curves: list[tuple[str, np.ndarray, np.ndarray]],
                   title: str, x_label: str, y_label: str,
                   width: int = 720, height: int = 400) -> str:
    """Hand-rolled multi-series line chart; no plotting dependency."""
    pad_l, pad_r, pad_t, pad_b = 60, 20, 40, 45
    plot_w = width - pad_l - pad_r
    plot_h = height - pad_t - pad_b
    xs_all = np.concatenate([np.asarray(xs, dtype=np.float64)
                             for _, xs, _ in curves])
    ys_all = np.concatenate([np.asarray(ys, dtype=np.float64)
                             for _, _, ys in curves])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x: float) -> float:
        return pad_l + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return pad_t + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]
    # axes
    parts.append(f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" '
                 f'y2="{pad_t + plot_h}" stroke="#333"/>')
    parts.append(f'<line x1="{pad_l}" y1="{pad_t + plot_h}" '
                 f'x2="{pad_l + plot_w}" y2="{pad_t + plot_h}" stroke="#333"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = y_lo + frac * (y_hi - y_lo)
        xv = x_lo + frac * (x_hi - x_lo)
        parts.append(f'<text x="{pad_l - 6}" y="{sy(yv) + 4:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{yv:.3g}</text>')
        parts.append(f'<text x="{sx(xv):.1f}" y="{pad_t + plot_h + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{xv:.3g}</text>')
    parts.append(f'<text x="{pad_l + plot_w / 2:.1f}" y="{height - 8}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{x_label}</text>')
    parts.append(f'<text x="16" y="{pad_t + plot_h / 2:.1f}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12" transform="rotate(-90 16 '
                 f'{pad_t + plot_h / 2:.1f})">{y_label}</text>')
    for idx, (name, xs, ys) in enumerate(curves):
        color = _PALETTE[idx % len(_PALETTE)]
        points = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}"
                          for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{points}"/>')
        parts.append(f'<text x="{pad_l + plot_w - 4}" '
                     f'y="{pad_t + 14 + 14 * idx}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- preprocessing pipeline -----------------------------------------------------------

def preprocess_trial(record: TrialRecord, prep: dict) -> TrialRecord:
    """Raw trial -> normalized 1 Hz matrices plus their fusion.

    Neural columns arrive as wavelength pairs per channel and leave as
    (HbO, HbR) pairs; motor columns wider than d_prime are group-averaged
    down to d_prime, narrower ones (e.g. frame embeddings) pass through.
    """
    raw = record.neural
    if raw.n_channels % 2 != 0:
        raise ValueError("neural matrix must hold two wavelengths per channel")
    fs = raw.sample_rate_hz
    baseline = (0, max(1, int(round(prep["baseline_window_s"] * fs))))
    params = MbllParams()
    hemo_cols = []
    hemo_names = []
    for c in range(raw.n_channels // 2):
        pair = raw.data[:, 2 * c:2 * c + 2]
        intensity = IntensitySeries(pair, fs, WAVELENGTHS_NM,
                                    channel_id=raw.channel_names[2 * c])
        od = optical_density(intensity, baseline)
        od = bandpass_filter(od, prep["low_hz"], prep["high_hz"],
                             prep["filter_order"])
        od = spline_motion_correct(od, prep["spline_passes"])
        hemo = mbll_convert(od, params)
        hemo_cols.append(np.stack([hemo.delta_hbo, hemo.delta_hbr], axis=1))
        stem = raw.channel_names[2 * c].rsplit("_", 1)[0]
        hemo_names.extend((f"{stem}_hbo", f"{stem}_hbr"))
    neural_mat = np.concatenate(hemo_cols, axis=1)
    neural_mat, rate = resample_uniform(neural_mat, fs, prep["target_hz"])
    neural = SpatioTemporalMatrix(minmax_normalize(neural_mat), rate,
                                  tuple(hemo_names), "neural")

    if record.motor.n_channels > prep["d_prime"]:
        reduced = channel_group_gap(record.motor.data, prep["d_prime"])
        motor_names = tuple(f"mg{j + 1:02d}" for j in range(prep["d_prime"]))
    else:
        reduced = record.motor.data
        motor_names = record.motor.channel_names
    motor_mat, rate = resample_uniform(reduced, record.motor.sample_rate_hz,
                                       prep["target_hz"])
    motor = SpatioTemporalMatrix(minmax_normalize(motor_mat), rate,
                                 motor_names, "motor")
    return replace(record, neural=neural, motor=motor,
                   fused=align_and_fuse(neural, motor))


def _train_frame_backbone(frames_by_trial: dict[str, list[Frame]],
                          cfg: dict):
    pool = [f for frames in frames_by_trial.values() for f in frames]
    limit = cfg["contrastive"]["max_train_frames"]
    if len(pool) > limit:
        picks = np.random.default_rng(cfg["seed"]).choice(
            len(pool), size=limit, replace=False)
        pool = [pool[i] for i in sorted(picks)]
    return train_contrastive(pool, backbone_config(cfg))


def load_raw_trials(raw_dir: str, cfg: dict) -> list[TrialRecord]:
    """Read a raw manifest; frame blobs are embedded with a backbone
    trained (self-supervised) on the pooled frames."""
    rows = read_manifest(os.path.join(raw_dir, "manifest.csv"))
    frames_by_trial: dict[str, list[Frame]] = {}
    for row in rows:
        if row["motor_path"].endswith(".bin"):
            frames_by_trial[row["trial_id"]] = read_frames_blob(
                os.path.join(raw_dir, row["motor_path"]))
    backbone = None
    if frames_by_trial:
        backbone = _train_frame_backbone(frames_by_trial, cfg)

    trials = []
    for row in rows:
        neural = read_matrix_csv(os.path.join(raw_dir, row["neural_path"]),
                                 float(row["neural_fs_hz"]), "neural")
        if row["trial_id"] in frames_by_trial:
            feats = extract_features(backbone, frames_by_trial[row["trial_id"]])
            names = tuple(f"emb{i + 1:02d}" for i in range(feats.shape[1]))
            motor = SpatioTemporalMatrix(feats, float(row["motor_fps"]),
                                         names, "motor")
        else:
            motor = read_matrix_csv(os.path.join(raw_dir, row["motor_path"]),
                                    float(row["motor_fps"]), "motor")
        trials.append(TrialRecord(
            trial_id=row["trial_id"], subject_id=row["subject_id"],
            task=row["task"], label=row["label"], score=float(row["score"]),
            neural=neural, motor=motor))
    return trials


def load_prep_trials(prep_dir: str) -> list[TrialRecord]:
    """Read preprocessed matrices and build each trial's fusion."""
    rows = read_manifest(os.path.join(prep_dir, "manifest.csv"))
    trials = []
    for row in rows:
        neural = read_matrix_csv(os.path.join(prep_dir, row["neural_path"]),
                                 float(row["neural_fs_hz"]), "neural")
        motor = read_matrix_csv(os.path.join(prep_dir, row["motor_path"]),
                                float(row["motor_fps"]), "motor")
        trials.append(TrialRecord(
            trial_id=row["trial_id"], subject_id=row["subject_id"],
            task=row["task"], label=row["label"], score=float(row["score"]),
            neural=neural, motor=motor,
            fused=align_and_fuse(neural, motor)))
    return trials


# --- subcommands ------------------------------------------------------------------------

def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def _cmd_synth(cfg: dict, args) -> int:
    out_dir = cfg["paths"]["raw_dir"]
    _ensure_dir(out_dir)
    scfg = synth_config(cfg)
    trials, manifest = generate_dataset(scfg)
    skills = dict(sorted(subject_skills(scfg).items()))
    per_subject = scfg.trials_per_subject
    for idx, (record, row) in enumerate(zip(trials, manifest)):
        write_matrix_csv(os.path.join(out_dir, row["neural_path"]),
                         record.neural)
        if scfg.render_frames:
            j, k = divmod(idx, per_subject)
            frames = trial_frames(scfg, j, k, skills[record.subject_id])
            write_frames_blob(os.path.join(out_dir, row["motor_path"]),
                              [Frame(frames[i]) for i in range(len(frames))],
                              dtype=np.float32)
        else:
            write_matrix_csv(os.path.join(out_dir, row["motor_path"]),
                             record.motor)
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    print(f"wrote {len(manifest)} trials to {out_dir}")
    return 0


def _cmd_preprocess(cfg: dict, args) -> int:
    raw_dir = cfg["paths"]["raw_dir"]
    out_dir = cfg["paths"]["prep_dir"]
    _ensure_dir(out_dir)
    prep = cfg["preprocess"]
    rows_out = []
    for record in load_raw_trials(raw_dir, cfg):
        done = preprocess_trial(record, prep)
        neural_path = f"{done.trial_id}_neural.csv"
        motor_path = f"{done.trial_id}_motor.csv"
        write_matrix_csv(os.path.join(out_dir, neural_path), done.neural)
        write_matrix_csv(os.path.join(out_dir, motor_path), done.motor)
        rows_out.append({
            "trial_id": done.trial_id, "subject_id": done.subject_id,
            "task": done.task, "label": done.label,
            "score": f"{done.score:.6f}",
            "neural_path": neural_path, "motor_path": motor_path,
            "neural_fs_hz": repr(done.neural.sample_rate_hz),
            "motor_fps": repr(done.motor.sample_rate_hz),
        })
    write_manifest(os.path.join(out_dir, "manifest.csv"), rows_out)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    print(f"preprocessed {len(rows_out)} trials into {out_dir}")
    return 0


def _modality_channels(trials: list[TrialRecord], modality: str) -> int:
    matrix = getattr(trials[0], modality)
    return matrix.n_channels


def _cmd_train(cfg: dict, args) -> int:
    out_dir = cfg["paths"]["results_dir"]
    _ensure_dir(out_dir)
    trials = load_prep_trials(cfg["paths"]["prep_dir"])
    modality = cfg["assess"]["modality"]
    head = cfg["assess"]["head"]
    labels = sorted({t.label for t in trials})
    label_index = {name: i for i, name in enumerate(labels)}
    ncfg = net_config(cfg, head, _modality_channels(trials, modality))
    if head == "classify":
        ncfg = replace(ncfg, n_classes=len(labels))
    data = [(getattr(t, modality).data,
             label_index[t.label] if head == "classify" else t.score)
            for t in trials]
    model = train(ncfg, data)
    save_model(model, os.path.join(out_dir, "model.json"))
    write_json(os.path.join(out_dir, "train_summary.json"), {
        "modality": modality,
        "head": head,
        "labels": labels,
        "n_trials": len(trials),
        "best_epoch": model.best_epoch,
        "epochs_run": len(model.history),
        "final_loss": model.history[-1],
        "best_loss": min(model.history),
    })
    write_json(os.path.join(out_dir, "config.json"), cfg)
    print(f"trained {head} model on {len(trials)} trials "
          f"(best epoch {model.best_epoch})")
    return 0


def _cmd_assess(cfg: dict, args) -> int:
    out_dir = cfg["paths"]["results_dir"]
    _ensure_dir(out_dir)
    trials = load_prep_trials(cfg["paths"]["prep_dir"])
    modality = cfg["assess"]["modality"]
    head = cfg["assess"]["head"]
    ncfg = net_config(cfg, head)
    dist = repeat_runs(trials, modality, ncfg,
                       n=cfg["assess"]["iterations"],
                       master_seed=cfg["seed"],
                       jobs=cfg["assess"]["jobs"])
    stem = f"assess_{modality}_{dist.metric}"
    payload = {
        "metric": dist.metric,
        "modality": dist.modality,
        "task": dist.task,
        "master_seed": dist.master_seed,
        "values": dist.values,
        "summary": dist.summary(),
    }
    write_json(os.path.join(out_dir, f"{stem}.json"), payload)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("iteration", dist.metric))
    for i, value in enumerate(dist.values):
        writer.writerow((i, repr(value)))
    atomic_write_text(os.path.join(out_dir, f"{stem}.csv"), buf.getvalue())

    xs = np.arange(len(dist.values), dtype=np.float64)
    chart = svg_line_chart(
        [(modality, xs, np.asarray(dist.values))],
        title=f"{dist.metric} across repeated runs",
        x_label="iteration", y_label=dist.metric)
    atomic_write_text(os.path.join(out_dir, f"{stem}.svg"), chart)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    print(f"{modality} {dist.metric}: {dist.summary()['formatted']}")
    return 0


def _load_distribution(path: str) -> MetricDistribution:
    payload = read_json(path)
    return MetricDistribution(metric=payload["metric"],
                              values=[float(v) for v in payload["values"]],
                              modality=payload["modality"],
                              task=payload["task"],
                              master_seed=int(payload["master_seed"]))


def _cmd_compare(cfg: dict, args) -> int:
    dist_a = _load_distribution(args.file_a)
    dist_b = _load_distribution(args.file_b)
    report = significance_test(dist_a.values, dist_b.values)
    out_dir = cfg["paths"]["results_dir"]
    _ensure_dir(out_dir)
    payload = asdict(report)
    payload["a"] = {"path": args.file_a, "modality": dist_a.modality,
                    "summary": dist_a.summary()}
    payload["b"] = {"path": args.file_b, "modality": dist_b.modality,
                    "summary": dist_b.summary()}
    write_json(os.path.join(out_dir, "comparison.json"), payload)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    verdict = "significant" if report.significant else "not significant"
    print(f"{dist_a.modality} vs {dist_b.modality}: {report.test_used} "
          f"p={report.p_value:.4g} ({verdict})")
    return 0


def _cmd_trust(cfg: dict, args) -> int:
    out_dir = cfg["paths"]["results_dir"]
    _ensure_dir(out_dir)
    trials = load_prep_trials(cfg["paths"]["prep_dir"])
    modality = cfg["assess"]["modality"]
    ncfg = net_config(cfg, "classify")
    result = run_assessment(trials, modality, ncfg, seed=cfg["seed"])
    records = [PredictionRecord(trial_id=p.trial_id,
                                true_class=p.true_class,
                                predicted_class=p.predicted_class,
                                confidence=p.confidence)
               for p in result.predictions]
    tcfg = cfg["trust"]
    spectrum = build_trust_spectrum(records, alpha=tcfg["alpha"],
                                    beta=tcfg["beta"],
                                    correct_only=tcfg["correct_only"],
                                    grid_points=tcfg["grid_points"])
    labels = result.label_names
    write_json(os.path.join(out_dir, "trust.json"), {
        "modality": modality,
        "alpha": tcfg["alpha"],
        "beta": tcfg["beta"],
        "correct_only": spectrum.correct_only,
        "nts": {labels[k]: v for k, v in sorted(spectrum.nts.items())},
        "n_predictions": len(records),
    })

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    classes = sorted(spectrum.densities)
    writer.writerow(["trust"] + [labels[k] for k in classes])
    for i, x in enumerate(spectrum.grid):
        writer.writerow([repr(float(x))]
                        + [repr(float(spectrum.densities[k][i]))
                           for k in classes])
    atomic_write_text(os.path.join(out_dir, "trust_density.csv"),
                      buf.getvalue())
    chart = svg_line_chart(
        [(labels[k], spectrum.grid, spectrum.densities[k]) for k in classes],
        title="trust spectrum by class", x_label="trust", y_label="density")
    atomic_write_text(os.path.join(out_dir, "trust_density.svg"), chart)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    nts_txt = ", ".join(f"{labels[k]}={v:.3f}"
                        for k, v in sorted(spectrum.nts.items()))
    print(f"net trust ({modality}): {nts_txt}")
    return 0


def _cmd_cam(cfg: dict, args) -> int:
    out_dir = cfg["paths"]["results_dir"]
    _ensure_dir(out_dir)
    trials = load_prep_trials(cfg["paths"]["prep_dir"])
    modality = cfg["assess"]["modality"]
    labels = sorted({t.label for t in trials})
    label_index = {name: i for i, name in enumerate(labels)}
    ncfg = net_config(cfg, "classify",
                      _modality_channels(trials, modality))
    ncfg = replace(ncfg, n_classes=len(labels))
    data = [(getattr(t, modality).data, label_index[t.label])
            for t in trials]
    model = train(ncfg, data)

    points = cfg["cam"]["resample_points"]
    averaged = {}
    for label in labels:
        curves = [normalize_resample_cam(
            compute_cam(model, getattr(t, modality).data,
                        label_index[label]),
            points, class_or_head=label, modality=modality)
            for t in trials if t.label == label]
        averaged[label] = average_cams(curves)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["position"] + labels)
    for i in range(points):
        writer.writerow([repr(i / (points - 1))]
                        + [repr(float(averaged[lb].values[i]))
                           for lb in labels])
    atomic_write_text(os.path.join(out_dir, "cam.csv"), buf.getvalue())
    xs = np.linspace(0.0, 1.0, points)
    chart = svg_line_chart(
        [(lb, xs, averaged[lb].values) for lb in labels],
        title=f"class activation over normalized time ({modality})",
        x_label="normalized time", y_label="activation")
    atomic_write_text(os.path.join(out_dir, "cam.svg"), chart)
    write_json(os.path.join(out_dir, "cam.json"), {
        "modality": modality,
        "labels": labels,
        "n_trials": {lb: averaged[lb].n_trials_averaged for lb in labels},
        "resample_points": points,
    })
    write_json(os.path.join(out_dir, "config.json"), cfg)
    print(f"wrote averaged activation curves for {len(labels)} classes")
    return 0


def _cmd_report(cfg: dict, args) -> int:
    out_dir = cfg["paths"]["results_dir"]
    _ensure_dir(out_dir)
    distributions = []
    curves = []
    for name in sorted(os.listdir(out_dir)):
        if name.startswith("assess_") and name.endswith(".json"):
            payload = read_json(os.path.join(out_dir, name))
            distributions.append(payload["summary"])
            values = np.asarray(payload["values"], dtype=np.float64)
            curves.append((f'{payload["modality"]} {payload["metric"]}',
                           np.arange(values.size, dtype=np.float64), values))
    bundle = {"distributions": distributions}
    for extra in ("comparison", "trust", "cam"):
        path = os.path.join(out_dir, f"{extra}.json")
        if os.path.exists(path):
            bundle[extra] = read_json(path)

    write_json(os.path.join(out_dir, "report.json"), bundle)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("metric", "modality", "task", "n", "mean", "std",
                     "formatted", "n_post_tukey", "mean_post_tukey",
                     "std_post_tukey", "formatted_post_tukey"))
    for s in distributions:
        writer.writerow((s["metric"], s["modality"], s["task"], s["n"],
                         repr(s["mean"]), repr(s["std"]), s["formatted"],
                         s["n_post_tukey"], repr(s["mean_post_tukey"]),
                         repr(s["std_post_tukey"]),
                         s["formatted_post_tukey"]))
    atomic_write_text(os.path.join(out_dir, "report.csv"), buf.getvalue())
    if curves:
        chart = svg_line_chart(curves, title="repeated-run metrics",
                               x_label="iteration", y_label="metric")
        atomic_write_text(os.path.join(out_dir, "report.svg"), chart)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    print(f"report bundles {len(distributions)} distribution(s)")
    return 0


# --- argument parsing ----------------------------------------------------------------------

_OUT_PATH_KEY = {
    "synth": "raw_dir",
    "preprocess": "prep_dir",
    "train": "results_dir",
    "assess": "results_dir",
    "compare": "results_dir",
    "trust": "results_dir",
    "cam": "results_dir",
    "report": "results_dir",
}

_HANDLERS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "assess": _cmd_assess,
    "compare": _cmd_compare,
    "trust": _cmd_trust,
    "cam": _cmd_cam,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skillfuse",
        description="Multimodal surgical-skill assessment pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, help_text in (
            ("synth", "generate a synthetic raw dataset"),
            ("preprocess", "convert raw trials to fused 1 Hz matrices"),
            ("train", "train one model on all preprocessed trials"),
            ("assess", "repeated leave-one-user-out evaluation"),
            ("compare", "significance test between two metric files"),
            ("trust", "trust spectrum and per-class net trust"),
            ("cam", "averaged class activation curves"),
            ("report", "bundle results into JSON/CSV/SVG")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH",
                       help="run configuration JSON")
        p.add_argument("--out", metavar="DIR",
                       help="output directory for this stage")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--task", choices=TASKS, help="task override")
        if name == "compare":
            p.add_argument("file_a", help="first metric distribution JSON")
            p.add_argument("file_b", help="second metric distribution JSON")
        if name in ("train", "assess", "trust", "cam"):
            p.add_argument("--modality", choices=MODALITIES,
                           help="input modality override")
        if name in ("train", "assess"):
            p.add_argument("--head", choices=("classify", "regress"),
                           help="model head override")
        if name == "assess":
            p.add_argument("--iterations", type=int,
                           help="repeated runs (default 100)")
            p.add_argument("--jobs", type=int,
                           help="parallel workers for iterations")
        if name == "trust":
            p.add_argument("--correct-only", action="store_true",
                           default=None,
                           help="density over correct predictions only")
    return parser


def _apply_overrides(user: dict, args) -> dict:
    def section(name: str) -> dict:
        return user.setdefault(name, {})

    if args.seed is not None:
        user["seed"] = args.seed
    if getattr(args, "task", None) is not None:
        section("synth")["task"] = args.task
    if getattr(args, "modality", None) is not None:
        section("assess")["modality"] = args.modality
    if getattr(args, "head", None) is not None:
        section("assess")["head"] = args.head
    if getattr(args, "iterations", None) is not None:
        section("assess")["iterations"] = args.iterations
    if getattr(args, "jobs", None) is not None:
        section("assess")["jobs"] = args.jobs
    if getattr(args, "correct_only", None):
        section("trust")["correct_only"] = True
    if args.out is not None:
        section("paths")[_OUT_PATH_KEY[args.command]] = args.out
    return user


def dispatch(argv: list[str]) -> int:
    """Parse arguments and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 0 for --help, 2 for usage
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        user = load_user_config(args.config)
        user = _apply_overrides(user, args)
        cfg = materialize_config(user)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> 1, per the exit contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
