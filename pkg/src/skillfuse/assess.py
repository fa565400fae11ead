"""Leave-one-user-out evaluation and the modality-comparison protocol.

Statistics are written out by hand (W-test weights, exact rank-sum tails)
so that every number can be checked against independent oracles; scipy is
used only for special functions (normal and t distribution CDFs).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri, stdtr

from . import nnet
from .featurestream import TrialRecord

SIGNIFICANCE_LEVEL = 0.05


# --- outlier removal ---------------------------------------------------------

def tukey_fences(values, k: float = 1.5) -> np.ndarray:
    """Drop values outside [Q1 - k*IQR, Q3 + k*IQR].

    Quartiles use linear interpolation between order statistics, the
    convention the fences were tuned against; changing it moves the fences.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 4:
        raise ValueError("tukey_fences needs at least 4 values")
    q1, q3 = np.percentile(values, [25.0, 75.0])
    iqr = q3 - q1
    lo, hi = q1 - k * iqr, q3 + k * iqr
    return values[(values >= lo) & (values <= hi)]


# --- Shapiro-Wilk (Royston's approximation) ----------------------------------

_SW_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_SW_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SW_MU_SMALL = (0.5440, -0.39978, 0.025054, -6.714e-4)
_SW_SIG_SMALL = (1.3822, -0.77857, 0.062767, -0.0020322)
_SW_MU_LARGE = (-1.5861, -0.31082, -0.083751, 0.0038915)
_SW_SIG_LARGE = (-0.4803, -0.082676, 0.0030302)
_SW_GAMMA = (-2.273, 0.459)


def _poly(coeffs, x: float) -> float:
    return float(sum(c * x ** i for i, c in enumerate(coeffs)))


def shapiro_wilk(values) -> tuple[float, float]:
    """W statistic and upper-tail p-value for the normality null.

    Weights and the W -> z transformations follow Royston's published
    approximation, valid for 3 <= n <= 5000.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    if not 3 <= n <= 5000:
        raise ValueError("shapiro_wilk requires 3 <= n <= 5000")
    if x[-1] - x[0] <= 0:
        raise ValueError("all values identical; W undefined")

    m = ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    summ2 = float(m @ m)
    c = m / math.sqrt(summ2)
    u = 1.0 / math.sqrt(n)

    a = np.empty(n)
    if n == 3:
        a[:] = (-math.sqrt(0.5), 0.0, math.sqrt(0.5))
    elif n <= 5:
        a_n = c[-1] + _poly(_SW_C1, u)
        phi = (summ2 - 2 * m[-1] ** 2) / (1 - 2 * a_n ** 2)
        a[1:-1] = m[1:-1] / math.sqrt(phi)
        a[-1], a[0] = a_n, -a_n
    else:
        a_n = c[-1] + _poly(_SW_C1, u)
        a_n1 = c[-2] + _poly(_SW_C2, u)
        phi = (summ2 - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / \
              (1 - 2 * a_n ** 2 - 2 * a_n1 ** 2)
        a[2:-2] = m[2:-2] / math.sqrt(phi)
        a[-1], a[-2] = a_n, a_n1
        a[0], a[1] = -a_n, -a_n1

    w_num = float(a @ x) ** 2
    w_den = float(((x - x.mean()) ** 2).sum())
    w = min(w_num / w_den, 1.0)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))

    one_minus = max(1.0 - w, 1e-15)
    if n <= 11:
        gamma = _poly(_SW_GAMMA, n)
        if gamma - math.log(one_minus) <= 0:
            return w, 1e-99
        y = -math.log(gamma - math.log(one_minus))
        mu = _poly(_SW_MU_SMALL, n)
        sigma = math.exp(_poly(_SW_SIG_SMALL, n))
    else:
        y = math.log(one_minus)
        ln_n = math.log(n)
        mu = _poly(_SW_MU_LARGE, ln_n)
        sigma = math.exp(_poly(_SW_SIG_LARGE, ln_n))
    z = (y - mu) / sigma
    return w, float(ndtr(-z))


# --- Mann-Whitney ------------------------------------------------------------

def _midranks(pooled: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def mann_whitney_u(a, b) -> float:
    """U for sample a: pairwise wins over b, ties counting one half."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    r_a = float(ranks[:a.size].sum())
    return r_a - a.size * (a.size + 1) / 2


def _exact_mwu_tail(a: np.ndarray, b: np.ndarray) -> float:
    """P(rank-sum of a >= observed) by exact counting over arrangements.

    Works with ties: the null distribution is over which pooled positions
    belong to a, and tied positions share a midrank, so only the per-group
    take counts matter. Integer arithmetic throughout (doubled ranks).
    """
    m, n = a.size, b.size
    pooled = np.sort(np.concatenate([a, b]))
    groups: list[tuple[int, int]] = []  # (count, doubled midrank)
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and pooled[j + 1] == pooled[i]:
            j += 1
        groups.append((j - i + 1, i + j + 2))  # 2 * ((i+1 + j+1) / 2)
        i = j + 1

    ranks = _midranks(pooled)
    # observed doubled rank-sum of a within the pooled ordering
    obs2 = int(round(2 * float(_midranks(np.concatenate([a, b]))[:m].sum())))
    del ranks

    # dp[(chosen, doubled_ranksum)] = number of arrangements
    dp: dict[tuple[int, int], int] = {(0, 0): 1}
    for count, r2 in groups:
        nxt: dict[tuple[int, int], int] = {}
        for (chosen, s2), ways in dp.items():
            for take in range(0, min(count, m - chosen) + 1):
                key = (chosen + take, s2 + take * r2)
                nxt[key] = nxt.get(key, 0) + ways * math.comb(count, take)
        dp = nxt

    total = math.comb(m + n, m)
    tail = sum(ways for (chosen, s2), ways in dp.items()
               if chosen == m and s2 >= obs2)
    return tail / total


def mann_whitney_test(a, b) -> tuple[float, float]:
    """One-sided U test that a tends larger than b: (U_a, p).

    Exact tail enumeration up to 20 per sample; beyond that a normal
    approximation with tie correction and continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 1 or b.size < 1:
        raise ValueError("both samples must be non-empty")
    u_a = mann_whitney_u(a, b)
    m, n = a.size, b.size
    if max(m, n) <= 20:
        return u_a, _exact_mwu_tail(a, b)

    big_n = m + n
    pooled = np.sort(np.concatenate([a, b]))
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum())
    mu = m * n / 2.0
    sigma2 = m * n / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if sigma2 <= 0:
        return u_a, 1.0  # all values tied: no evidence either way
    z = (u_a - mu - 0.5) / math.sqrt(sigma2)
    return u_a, float(ndtr(-z))


# --- Welch's t ----------------------------------------------------------------

def welch_t_test(a, b) -> tuple[float, float]:
    """One-sided unequal-variance t test that mean(a) > mean(b): (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("welch_t_test needs >= 2 values per sample")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    se2 = va / a.size + vb / b.size
    if se2 == 0:
        t = 0.0 if a.mean() == b.mean() else math.inf * np.sign(a.mean() - b.mean())
        return t, (0.5 if t == 0 else (0.0 if t > 0 else 1.0))
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 ** 2 / ((va / a.size) ** 2 / (a.size - 1)
                     + (vb / b.size) ** 2 / (b.size - 1))
    return float(t), float(stdtr(df, -t))


# --- significance pipeline -----------------------------------------------------

@dataclass
class StatReport:
    normal_a: bool
    normal_b: bool
    test_used: str  # t_one_sided | mann_whitney_one_sided
    statistic: float
    p_value: float
    significant: bool
    direction: str  # a_greater | b_greater
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


def _values_of(sample) -> np.ndarray:
    if hasattr(sample, "values"):
        sample = sample.values
    return np.asarray(sample, dtype=np.float64)


def _testably_normal(x: np.ndarray) -> bool:
    # Constant or tiny samples leave W undefined; route them to the rank
    # test, whose tie handling is exact.
    if x.size < 3 or np.ptp(x) == 0:
        return False
    _, p = shapiro_wilk(x)
    return p >= SIGNIFICANCE_LEVEL


def significance_test(a, b) -> StatReport:
    """Tukey -> normality gate -> one-sided Welch t or Mann-Whitney U.

    The alternative hypothesis is fixed to the larger-(post-fence)-mean
    side, so swapping the arguments mirrors direction but keeps p.
    """
    a = _values_of(a)
    b = _values_of(b)
    a = tukey_fences(a) if a.size >= 4 else a
    b = tukey_fences(b) if b.size >= 4 else b
    normal_a = _testably_normal(a)
    normal_b = _testably_normal(b)

    a_is_greater = a.mean() >= b.mean()
    hi, lo = (a, b) if a_is_greater else (b, a)
    if normal_a and normal_b:
        statistic, p = welch_t_test(hi, lo)
        test_used = "t_one_sided"
    else:
        statistic, p = mann_whitney_test(hi, lo)
        test_used = "mann_whitney_one_sided"

    return StatReport(
        normal_a=normal_a,
        normal_b=normal_b,
        test_used=test_used,
        statistic=float(statistic),
        p_value=float(p),
        significant=bool(p < SIGNIFICANCE_LEVEL),
        direction="a_greater" if a_is_greater else "b_greater",
        mean_a=float(a.mean()),
        mean_b=float(b.mean()),
        n_a=int(a.size),
        n_b=int(b.size),
    )


# --- cross-validation ----------------------------------------------------------

@dataclass
class Fold:
    held_out_subject: str
    train_trials: list[str]
    val_trials: list[str]


def louo_folds(trials: list[TrialRecord]) -> list[Fold]:
    """One fold per subject; that subject's trials are the validation set."""
    subjects: dict[str, list[str]] = {}
    for t in trials:
        subjects.setdefault(t.subject_id, []).append(t.trial_id)
    if len(subjects) < 2:
        raise ValueError("leave-one-user-out needs >= 2 subjects")
    folds = []
    for subject in sorted(subjects):
        val = subjects[subject]
        train = [t.trial_id for t in trials if t.subject_id != subject]
        folds.append(Fold(subject, train, val))
    return folds


@dataclass
class TrialPrediction:
    trial_id: str
    subject_id: str
    true_class: int | None = None
    predicted_class: int | None = None
    confidence: float | None = None
    true_score: float | None = None
    predicted_score: float | None = None


@dataclass
class AssessmentResult:
    metric: str  # accuracy | r_squared
    value: float
    predictions: list[TrialPrediction]
    label_names: list[str]
    pooling: str = "micro"


def r_squared(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    sst = float(((y_true - y_true.mean()) ** 2).sum())
    if sst == 0:
        raise ValueError("targets are constant; R^2 undefined")
    sse = float(((y_true - y_pred) ** 2).sum())
    return 1.0 - sse / sst


def _modality_matrix(trial: TrialRecord, modality: str) -> np.ndarray:
    if modality == "neural":
        return trial.neural.data
    if modality == "motor":
        return trial.motor.data
    if modality == "fused":
        if trial.fused is None:
            raise ValueError(f"trial {trial.trial_id} has no fused matrix")
        return trial.fused.data
    raise ValueError(f"unknown modality {modality!r}")


def _fold_seed(master_seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, fold_index]).generate_state(1)[0])


def run_assessment(trials: list[TrialRecord], modality: str,
                   config: nnet.VbaNetConfig, seed: int,
                   trainer=nnet.train) -> AssessmentResult:
    """Train one model per LOUO fold and pool held-out predictions.

    Metrics are micro-averaged over the pool: accuracy for classifiers,
    R^2 on the original score scale for regressors.
    """
    folds = louo_folds(trials)
    by_id = {t.trial_id: t for t in trials}
    label_names = sorted({t.label for t in trials})
    label_index = {name: i for i, name in enumerate(label_names)}
    classify = config.head == "classify"

    predictions: list[TrialPrediction] = []
    for fold_idx, fold in enumerate(folds):
        train_set = []
        for tid in fold.train_trials:
            t = by_id[tid]
            x = _modality_matrix(t, modality)
            target = label_index[t.label] if classify else t.score
            train_set.append((x, target))
        fold_cfg = replace(config,
                           in_channels=train_set[0][0].shape[1],
                           n_classes=len(label_names) if classify else config.n_classes,
                           rng_seed=_fold_seed(seed, fold_idx))
        model = trainer(fold_cfg, train_set)
        for tid in fold.val_trials:
            t = by_id[tid]
            x = _modality_matrix(t, modality)
            if classify:
                probs = model.predict(x)
                k = int(np.argmax(probs))
                predictions.append(TrialPrediction(
                    trial_id=tid, subject_id=t.subject_id,
                    true_class=label_index[t.label], predicted_class=k,
                    confidence=float(probs[k])))
            else:
                predictions.append(TrialPrediction(
                    trial_id=tid, subject_id=t.subject_id,
                    true_score=float(t.score),
                    predicted_score=float(model.predict(x))))

    if classify:
        hits = [p.predicted_class == p.true_class for p in predictions]
        return AssessmentResult("accuracy", float(np.mean(hits)),
                                predictions, label_names)
    value = r_squared([p.true_score for p in predictions],
                      [p.predicted_score for p in predictions])
    return AssessmentResult("r_squared", value, predictions, label_names)


# --- iteration layer ------------------------------------------------------------

@dataclass
class MetricDistribution:
    metric: str
    values: list[float]
    modality: str
    task: str
    master_seed: int = 0

    def post_tukey(self) -> np.ndarray:
        return tukey_fences(self.values) if len(self.values) >= 4 \
            else np.asarray(self.values)

    def summary(self) -> dict:
        raw = np.asarray(self.values, dtype=np.float64)
        kept = self.post_tukey()
        return {
            "metric": self.metric,
            "modality": self.modality,
            "task": self.task,
            "n": int(raw.size),
            "mean": float(raw.mean()),
            "std": float(raw.std(ddof=1)) if raw.size > 1 else 0.0,
            "formatted": format_mean_std(raw),
            "n_post_tukey": int(kept.size),
            "mean_post_tukey": float(kept.mean()),
            "std_post_tukey": float(kept.std(ddof=1)) if kept.size > 1 else 0.0,
            "formatted_post_tukey": format_mean_std(kept),
        }


def format_mean_std(values) -> str:
    """Render a distribution the way result tables do, e.g. '0.889±.011'."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    std = values.std(ddof=1) if values.size > 1 else 0.0
    std_txt = f"{std:.3f}"
    if std_txt.startswith("0."):
        std_txt = std_txt[1:]
    return f"{mean:.3f}±{std_txt}"


def _one_iteration(args) -> float:
    trials, modality, config, seed, trainer = args
    return run_assessment(trials, modality, config, seed, trainer=trainer).value


def repeat_runs(trials: list[TrialRecord], modality: str,
                config: nnet.VbaNetConfig, n: int = 100, master_seed: int = 0,
                jobs: int = 1, trainer=nnet.train) -> MetricDistribution:
    """n independent assessments seeded master_seed + i, collected in order."""
    if n < 2:
        raise ValueError("repeat_runs needs n >= 2")
    metric = "accuracy" if config.head == "classify" else "r_squared"
    task = trials[0].task if trials else "pattern_cutting"
    work = [(trials, modality, config, master_seed + i, trainer)
            for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_one_iteration, work))
    else:
        values = [_one_iteration(w) for w in work]
    return MetricDistribution(metric=metric, values=[float(v) for v in values],
                              modality=modality, task=task,
                              master_seed=master_seed)
