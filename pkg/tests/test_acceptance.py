"""Release gate: ten checks, one printed verdict line each.

Each test re-derives its expected values from first principles or frozen
oracles; thresholds are part of the package contract and must not be
loosened to make a failing build pass.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from skillfuse.assess import (
    louo_folds,
    mann_whitney_u,
    repeat_runs,
    run_assessment,
    shapiro_wilk,
    tukey_fences,
)
from skillfuse.cli import dispatch
from skillfuse.contrastive import nt_xent_loss
from skillfuse.explain import cam_logit, compute_cam, spearman_rho
from skillfuse.featurestream import SpatioTemporalMatrix, TrialRecord
from skillfuse.nnet import VbaNetConfig, conv1d_backward, conv1d_forward, \
    grad_check, train
from skillfuse.signalproc import (
    MbllParams,
    OdSeries,
    bandpass_filter,
    mbll_convert,
    mbll_forward,
)
from skillfuse.trust import build_trust_spectrum, PredictionRecord

FS = 7.8125


@pytest.fixture
def announce(capsys):
    @contextmanager
    def _announce(number, label):
        verdict = "FAIL"
        try:
            yield
            verdict = "PASS"
        finally:
            with capsys.disabled():
                print(f"\nCRITERION {number}: {verdict} ({label})")
    return _announce


# --- 1: gradients -----------------------------------------------------------

def test_criterion_01_gradient_correctness(announce):
    with announce(1, "reverse-mode gradients match finite differences"):
        start = time.perf_counter()
        rng = np.random.default_rng(100)
        x = rng.normal(size=(20, 3))
        base = dict(in_channels=3, conv_filters=8, se_reduction=4)
        # composed network, both heads, 250 sampled coordinates each
        err_cls = grad_check(VbaNetConfig(**base, n_classes=2), x, 1,
                             n_coords=250)
        err_reg = grad_check(VbaNetConfig(**base, head="regress"), x, 0.4,
                             n_coords=250)
        assert err_cls < 1e-4
        assert err_reg < 1e-4

        # convolution layer in isolation under a fixed linear readout
        xc = rng.normal(size=(12, 3))
        w = rng.normal(size=(5, 3, 3))
        b = rng.normal(size=5)
        readout = rng.normal(size=(12, 5))
        _, xp = conv1d_forward(xc, w, b)
        dx, dw, db = conv1d_backward(readout, xp, w)

        def conv_loss():
            y, _ = conv1d_forward(xc, w, b)
            return float((y * readout).sum())

        eps = 1e-6
        for arr, grad in ((w, dw), (b, db), (xc, dx)):
            flat, gflat = arr.ravel(), grad.ravel()
            for idx in range(0, flat.size, max(1, flat.size // 12)):
                orig = flat[idx]
                flat[idx] = orig + eps
                hi = conv_loss()
                flat[idx] = orig - eps
                lo = conv_loss()
                flat[idx] = orig
                fd = (hi - lo) / (2 * eps)
                rel = abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]),
                                                 1e-8)
                assert rel < 1e-6

        # dense head in isolation against the analytic MSE gradient
        xd = rng.normal(size=8)
        wd = rng.normal(size=8)
        bd, target = 0.3, -0.7
        dpred = 2.0 * (xd @ wd + bd - target)
        for i in range(8):
            w_hi, w_lo = wd.copy(), wd.copy()
            w_hi[i] += 1e-5
            w_lo[i] -= 1e-5
            fd = ((xd @ w_hi + bd - target) ** 2
                  - (xd @ w_lo + bd - target) ** 2) / 2e-5
            assert abs(fd - xd[i] * dpred) / max(abs(fd), 1e-8) < 1e-6

        assert time.perf_counter() - start < 30.0


# --- 2: filter --------------------------------------------------------------

def _od(data):
    data = np.asarray(data, dtype=np.float64)[:, None]
    return OdSeries(data, FS, (760.0,))


def test_criterion_02_filter_contract(announce):
    with announce(2, "zero-phase band-pass frequency response"):
        n = int(300 * FS)
        t = np.arange(n) / FS

        inband = bandpass_filter(_od(np.sin(2 * np.pi * 0.1 * t)))
        mid = inband.samples[n // 4:3 * n // 4, 0]
        amplitude = math.sqrt(2) * np.sqrt(np.mean((mid - mid.mean()) ** 2))
        assert abs(amplitude - 1.0) < 0.05

        stopband = bandpass_filter(_od(np.sin(2 * np.pi * 2.0 * t)))
        residual = np.abs(stopband.samples[n // 4:3 * n // 4, 0]).max()
        assert residual <= 10 ** (-20 / 20)  # >= 20 dB down

        dc = bandpass_filter(_od(np.full(2000, 3.7)))
        assert np.abs(dc.samples).max() < 1e-3 * 3.7

        short = int(120 * FS)
        x = np.sin(2 * np.pi * 0.1 * np.arange(short) / FS)
        y = bandpass_filter(_od(x)).samples[:, 0]
        corr = np.correlate(y - y.mean(), x - x.mean(), mode="full")
        lag = int(corr.argmax()) - (short - 1)
        assert lag == 0


# --- 3: MBLL ------------------------------------------------------------------

def test_criterion_03_mbll_round_trip(announce):
    with announce(3, "Beer-Lambert forward/inverse round trip"):
        rng = np.random.default_rng(200)
        variants = (
            MbllParams(),
            MbllParams(dpf=np.array([5.2, 6.8]), distance_mm=25.0),
            MbllParams(extinction=np.array([[1.2, 2.1], [2.4, 1.1]]),
                       dpf=np.array([6.5, 5.5]), distance_mm=35.0),
        )
        for params in variants:
            hbo = rng.normal(0.0, 2.0, size=120)
            hbr = rng.normal(0.0, 1.0, size=120)
            hemo = mbll_convert(mbll_forward(hbo, hbr, params, FS), params)
            assert np.abs(hemo.delta_hbo - hbo).max() < 1e-9
            assert np.abs(hemo.delta_hbr - hbr).max() < 1e-9


# --- 4: statistics oracles ---------------------------------------------------

def test_criterion_04_statistics_oracles(announce):
    with announce(4, "rank/normality/outlier statistics against oracles"):
        rng = np.random.default_rng(300)
        for _ in range(12):
            m, n = rng.integers(3, 13, size=2)
            a = np.round(rng.normal(size=m), 1)  # rounding forces ties
            b = np.round(rng.normal(0.4, 1.0, size=n), 1)
            wins = sum(1.0 if x > y else 0.5 if x == y else 0.0
                       for x in a for y in b)
            assert mann_whitney_u(a, b) == wins

        sample = np.array([148, 154, 158, 160, 161, 162, 166, 170, 182,
                           195, 236], dtype=np.float64)
        w, _ = shapiro_wilk(sample)
        assert abs(w - stats.shapiro(sample).statistic) <= 0.01

        kept = tukey_fences(np.array([1, 2, 3, 4, 5, 6, 7, 8, 9, 100],
                                     dtype=np.float64))
        assert_allclose(np.sort(kept), np.arange(1.0, 10.0))


# --- 5: contrastive loss -------------------------------------------------------

def test_criterion_05_nt_xent_oracle(announce):
    with announce(5, "contrastive loss closed forms and gradient"):
        orthogonal = np.array([
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
        ])
        loss, _ = nt_xent_loss(orthogonal, temperature=1.0)
        assert abs(loss - math.log(1.0 + 2.0 / math.e)) <= 1e-9

        single, grad = nt_xent_loss(np.random.default_rng(0).normal(size=(2, 5)),
                                    0.5)
        assert single == 0.0
        assert np.abs(grad).max() == 0.0

        e = np.random.default_rng(400).normal(size=(6, 4))
        _, grad = nt_xent_loss(e, 0.5)
        h = 1e-6
        for i in range(e.shape[0]):
            for j in range(e.shape[1]):
                ep, em = e.copy(), e.copy()
                ep[i, j] += h
                em[i, j] -= h
                fd = (nt_xent_loss(ep, 0.5)[0] - nt_xent_loss(em, 0.5)[0]) / (2 * h)
                rel = abs(fd - grad[i, j]) / max(1e-8, abs(fd) + abs(grad[i, j]))
                assert rel < 1e-6


# --- 6: trust -----------------------------------------------------------------

def test_criterion_06_trust_contracts(announce):
    with announce(6, "trust score identities and density normalization"):
        perfect = [PredictionRecord(f"t{i}", c, c, 1.0)
                   for i, c in enumerate([0, 1, 0, 1, 0, 1])]
        spectrum = build_trust_spectrum(perfect)
        assert spectrum.nts == {0: 1.0, 1: 1.0}

        rng = np.random.default_rng(500)
        records = [PredictionRecord(f"r{i}", int(rng.integers(0, 2)),
                                    int(rng.integers(0, 2)),
                                    float(rng.uniform(0.4, 1.0)))
                   for i in range(50)]
        spectrum = build_trust_spectrum(records)
        for cls in (0, 1):
            group = [r for r in records if r.true_class == cls]
            mean_form = (sum(r.confidence for r in group
                             if r.predicted_class == cls)
                         + sum(1.0 - r.confidence for r in group
                               if r.predicted_class != cls)) / len(group)
            assert abs(spectrum.nts[cls] - mean_form) < 1e-12
        for cls, density in spectrum.densities.items():
            integral = np.trapezoid(density, spectrum.grid)
            assert abs(integral - 1.0) <= 1e-3


# --- 7: explanations ------------------------------------------------------------

def _train_toy(head, n_classes, seed):
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(6 * n_classes):
        label = i % n_classes
        x = rng.normal(0, 0.2, size=(18, 3)) + (label - 1.0)
        trials.append((x, label if head == "classify"
                       else 50.0 + 10.0 * label))
    cfg = VbaNetConfig(in_channels=3, conv_filters=8, se_reduction=4,
                       head=head, n_classes=max(2, n_classes),
                       max_epochs=25, rng_seed=seed)
    return train(cfg, trials), trials


def test_criterion_07_cam_identity_and_spearman(announce):
    with announce(7, "activation-map logit identity and rank correlation"):
        suite = [_train_toy("classify", 2, 3), _train_toy("classify", 3, 5),
                 _train_toy("regress", 2, 7)]
        for model, trials in suite:
            heads = (model.net.config.n_classes
                     if model.net.config.head == "classify" else 1)
            for x, _ in trials[:4]:
                amap = model.activation_map(x)
                logits = np.atleast_1d(
                    amap.mean(axis=0) @ model.net.params["head_w"]
                    + model.net.params["head_b"])
                for k in range(heads):
                    cam = compute_cam(model, x, k)
                    assert abs(cam_logit(model, cam, k) - logits[k]) < 1e-9

        a = np.array([3.0, 1.0, 4.0, 1.5, 9.0])
        assert abs(spearman_rho(a, a) - 1.0) <= 1e-12
        up = np.arange(1.0, 6.0)
        assert abs(spearman_rho(up, up[::-1]) + 1.0) <= 1e-12
        tie_a = np.array([1.0, 2.0, 2.0, 2.0, 2.0, 3.0])
        tie_b = np.array([1.0, 1.0, 1.0, 2.0, 1.0, 3.0])
        assert abs(spearman_rho(tie_a, tie_b) - 0.7) <= 1e-12


# --- 8: end-to-end ordering -------------------------------------------------------

def test_criterion_08_multimodal_ordering(announce, default_dataset):
    with announce(8, "fused modality beats single modalities end to end"):
        start = time.perf_counter()
        trials, _ = default_dataset
        base = dict(in_channels=1, conv_filters=8, se_reduction=4,
                    learning_rate=2e-3, max_epochs=60, patience=10,
                    rng_seed=0)
        cls_cfg = VbaNetConfig(**base)
        reg_cfg = VbaNetConfig(**base, head="regress")

        acc = {m: repeat_runs(trials, m, cls_cfg, n=10, master_seed=0)
               for m in ("motor", "fused")}
        r2 = {m: repeat_runs(trials, m, reg_cfg, n=10, master_seed=0)
              for m in ("neural", "motor", "fused")}
        acc_mean = {m: float(np.mean(d.values)) for m, d in acc.items()}
        r2_mean = {m: float(np.mean(d.values)) for m, d in r2.items()}

        assert acc_mean["fused"] >= acc_mean["motor"], acc_mean
        assert r2_mean["fused"] >= r2_mean["neural"], r2_mean
        assert r2_mean["fused"] >= r2_mean["motor"], r2_mean
        assert time.perf_counter() - start < 900.0


# --- 9: cross-validation integrity ---------------------------------------------

def test_criterion_09_louo_integrity(announce, default_dataset):
    with announce(9, "fold partition invariants and leakage guard"):
        trials, _ = default_dataset
        folds = louo_folds(trials)
        assert len(folds) == len({t.subject_id for t in trials})
        all_ids = {t.trial_id for t in trials}
        by_id = {t.trial_id: t for t in trials}
        seen = []
        for fold in folds:
            train_set, val_set = set(fold.train_trials), set(fold.val_trials)
            assert train_set & val_set == set()
            assert train_set | val_set == all_ids
            assert {by_id[v].subject_id for v in val_set} \
                == {fold.held_out_subject}
            seen.extend(fold.val_trials)
        assert sorted(seen) == sorted(all_ids)

        # constant per-subject fingerprints, labels shuffled per trial:
        # accuracy must stay within 3 sigma of coin flipping
        rng = np.random.default_rng(42)
        leak_trials = []
        for s in range(6):
            fingerprint = rng.normal(size=2)
            for j in range(6):
                data = np.tile(fingerprint, (10, 1)) + rng.normal(
                    0, 0.01, (10, 2))
                neural = SpatioTemporalMatrix(data, 1.0, ("a", "b"), "neural")
                motor = SpatioTemporalMatrix(data.copy(), 1.0, ("c", "d"),
                                             "motor")
                label = "pass" if rng.uniform() < 0.5 else "fail"
                leak_trials.append(TrialRecord(
                    f"t{s}_{j}", f"subj{s}", "pattern_cutting", label, 50.0,
                    neural, motor))
        cfg = VbaNetConfig(in_channels=2, conv_filters=8, se_reduction=4,
                           max_epochs=25)
        result = run_assessment(leak_trials, "neural", cfg, seed=3)
        sigma = math.sqrt(0.25 / len(leak_trials))
        assert abs(result.value - 0.5) <= 3 * sigma


# --- 10: reproducibility ----------------------------------------------------------

def test_criterion_10_reproducible_reports(announce, tmp_path):
    with announce(10, "same config and seed give byte-identical reports"):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "synth": {"n_subjects": 4, "trials_per_subject": 2,
                      "duration_s": [10.0, 14.0]},
            "train": {"max_epochs": 4},
            "assess": {"iterations": 3},
            "paths": {"raw_dir": str(tmp_path / "raw"),
                      "prep_dir": str(tmp_path / "prep")},
        }))
        assert dispatch(["synth", "--config", str(cfg_path)]) == 0
        assert dispatch(["preprocess", "--config", str(cfg_path)]) == 0
        outputs = []
        for run in ("first", "second"):
            out = tmp_path / run
            assert dispatch(["assess", "--config", str(cfg_path),
                             "--out", str(out)]) == 0
            outputs.append({
                name: (out / name).read_bytes()
                for name in ("assess_fused_accuracy.json",
                             "assess_fused_accuracy.csv")})
        assert outputs[0] == outputs[1]
