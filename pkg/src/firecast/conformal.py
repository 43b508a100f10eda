"""Distribution-free prediction sets for magnitude classification.

The non-conformity score of a label c under a probability vector p is

    score(c) = mass_above(c) + p(c) * U + lambda_reg * (rank(c) - k_reg)^+,

where mass_above sums the probabilities strictly greater than p(c), rank is
one plus the count of strictly greater entries, and U is a per-example
uniform randomizer.  A label enters the prediction set when the fraction of
calibration scores at or below its score stays under 1 - alpha.

Two calibration strategies ship: a split-conformal baseline (one model, one
fixed calibration split) and a bootstrap ensemble with leave-one-out
aggregation and a sliding calibration window that absorbs revealed test
labels batch by batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreParams:
    """Regularization of the non-conformity score; defaults (1, 2)."""

    lambda_reg: float = 1.0
    k_reg: int = 2

    def __post_init__(self):
        if self.lambda_reg < 0 or self.k_reg < 0:
            raise ValueError("lambda_reg and k_reg must be nonnegative")


def check_probability_vector(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise ValueError("expected a nonnegative vector summing to 1")
    return p


def mass_above(p: np.ndarray, c: int) -> float:
    """Total probability of labels strictly more likely than c."""
    p = np.asarray(p, dtype=float)
    return float(p[p > p[c]].sum())


def rank_of(p: np.ndarray, c: int) -> int:
    """1 + number of labels strictly more likely than c (ties share a rank)."""
    p = np.asarray(p, dtype=float)
    return int((p > p[c]).sum()) + 1


def score(p: np.ndarray, c: int, u: float, sp: ScoreParams) -> float:
    """Non-conformity of label c with randomizer u in [0, 1]."""
    p = np.asarray(p, dtype=float)
    reg = sp.lambda_reg * max(rank_of(p, c) - sp.k_reg, 0)
    return mass_above(p, c) + float(p[c]) * u + reg


def scores_all_labels(p: np.ndarray, u: float, sp: ScoreParams) -> np.ndarray:
    """Vectorized ``score`` over every label of one probability vector."""
    p = np.asarray(p, dtype=float)
    greater = p[None, :] > p[:, None]          # greater[c, c'] = p(c') > p(c)
    mass = greater @ p
    rank = greater.sum(axis=1) + 1
    return mass + p * u + sp.lambda_reg * np.maximum(rank - sp.k_reg, 0)


@dataclass(frozen=True)
class CalibrationStore:
    """Insertion-ordered window of calibration scores backing the set rule."""

    scores: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=float)
        object.__setattr__(self, "scores", arr)
        object.__setattr__(self, "_sorted", np.sort(arr))

    def __len__(self) -> int:
        return len(self.scores)

    def fraction_leq(self, x: float | np.ndarray) -> np.ndarray:
        """Empirical fraction of stored scores <= x."""
        if len(self.scores) == 0:
            raise RuntimeError("calibration store is empty")
        counts = np.searchsorted(self._sorted, np.asarray(x, dtype=float), side="right")
        return counts / len(self.scores)

    def quantile(self, alpha: float) -> float:
        """Diagnostic threshold: ceil((1 - alpha)(N + 1))-th order statistic."""
        n = len(self.scores)
        if n == 0:
            raise RuntimeError("calibration store is empty")
        idx = min(n, math.ceil((1.0 - alpha) * (n + 1)))
        return float(self._sorted[idx - 1])

    def slide(self, new_scores: np.ndarray) -> "CalibrationStore":
        """Drop the oldest len(new_scores) entries and append the new ones."""
        new_scores = np.asarray(new_scores, dtype=float)
        if len(new_scores) > len(self.scores):
            raise ValueError("cannot slide by more than the window size")
        return CalibrationStore(np.concatenate([self.scores[len(new_scores):], new_scores]))


@dataclass(frozen=True)
class PredictionSet:
    """Labels kept for one test point at one alpha, plus score diagnostics."""

    labels: np.ndarray        # included label values, ascending
    alpha: float
    threshold: float          # order-statistic quantile of the store
    label_scores: np.ndarray  # score per class, aligned with class_labels
    class_labels: np.ndarray  # all label values, ascending

    def __contains__(self, label) -> bool:
        return bool(np.isin(label, self.labels))

    @property
    def size(self) -> int:
        return len(self.labels)


def build_set(
    p: np.ndarray,
    store: CalibrationStore,
    alpha: float,
    u: float,
    sp: ScoreParams,
    class_labels: np.ndarray | None = None,
) -> PredictionSet:
    """Prediction set rule: keep c while fraction(tau <= score(c)) < 1 - alpha."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    p = check_probability_vector(p)
    if class_labels is None:
        class_labels = np.arange(len(p))
    label_scores = scores_all_labels(p, u, sp)
    keep = store.fraction_leq(label_scores) < 1.0 - alpha
    return PredictionSet(
        labels=np.asarray(class_labels)[keep],
        alpha=alpha,
        threshold=store.quantile(alpha),
        label_scores=label_scores,
        class_labels=np.asarray(class_labels),
    )


class LogisticClassifier:
    """Multinomial logistic regression trained by full-batch gradient descent.

    Deterministic given the training data and seed: zero-initialized weights,
    standardized features, fixed step count.
    """

    def __init__(self, learning_rate: float = 1.0, epochs: int = 300, l2: float = 1e-4):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.l2 = l2
        self._weights = None
        self._x_mean = None
        self._x_std = None

    def clone(self) -> "LogisticClassifier":
        return LogisticClassifier(self.learning_rate, self.epochs, self.l2)

    def fit(self, X: np.ndarray, y: np.ndarray, num_classes: int, seed: int = 0):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        n, d = X.shape
        self._x_mean = X.mean(axis=0)
        self._x_std = np.where(X.std(axis=0) > 1e-12, X.std(axis=0), 1.0)
        Z = np.hstack([(X - self._x_mean) / self._x_std, np.ones((n, 1))])
        W = np.zeros((d + 1, num_classes))
        onehot = np.zeros((n, num_classes))
        onehot[np.arange(n), y] = 1.0
        for _ in range(self.epochs):
            logits = Z @ W
            logits -= logits.max(axis=1, keepdims=True)
            proba = np.exp(logits)
            proba /= proba.sum(axis=1, keepdims=True)
            grad = Z.T @ (proba - onehot) / n + self.l2 * W
            W -= self.learning_rate * grad
        self._weights = W
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self._weights is None:
            raise RuntimeError("classifier is not fitted")
        X = np.asarray(X, dtype=float)
        Z = np.hstack([(X - self._x_mean) / self._x_std, np.ones((len(X), 1))])
        logits = Z @ self._weights
        logits -= logits.max(axis=1, keepdims=True)
        proba = np.exp(logits)
        proba /= proba.sum(axis=1, keepdims=True)
        return proba


@dataclass
class ConformalRun:
    """Prediction-set stream plus its coverage report."""

    method: str
    alphas: tuple[float, ...]
    sets: dict                       # alpha -> list[PredictionSet]
    coverage: dict                   # alpha -> float (nan if truths unknown)
    mean_size: dict                  # alpha -> float
    class_labels: np.ndarray
    loo_fallbacks: int = 0


def _encode_labels(train_y, test_y):
    class_labels = np.unique(np.asarray(train_y))
    if len(class_labels) < 2:
        raise ValueError(
            f"training labels are degenerate (single class {class_labels}); "
            "cannot calibrate a classifier"
        )
    lookup = {v: i for i, v in enumerate(class_labels)}
    y_train = np.array([lookup[v] for v in np.asarray(train_y)], dtype=np.int64)
    y_test = None
    if test_y is not None:
        test_y = np.asarray(test_y)
        missing = set(np.unique(test_y)) - set(class_labels.tolist())
        if missing:
            raise ValueError(f"test labels {sorted(missing)} never appear in training data")
        y_test = np.array([lookup[v] for v in test_y], dtype=np.int64)
    return class_labels, y_train, y_test


def _renormalize(p: np.ndarray) -> np.ndarray:
    p = np.maximum(p, 0.0)
    return p / p.sum(axis=-1, keepdims=True)


def eraps(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    *,
    num_bootstrap: int,
    batch_size: int,
    alphas,
    score_params: ScoreParams = ScoreParams(),
    classifier_factory=None,
    phi=None,
    seed: int = 0,
) -> ConformalRun:
    """Bootstrap leave-one-out ensemble prediction sets with a sliding window.

    Trains ``num_bootstrap`` classifiers on resampled training sets; each
    training point is scored under the aggregate of the models whose
    bootstrap excluded it (falling back to the full ensemble when none did);
    test points are scored under the aggregate of those leave-one-out
    aggregates.  After every ``batch_size`` revealed test labels the oldest
    calibration scores are replaced by the newly computed ones.  One store
    serves every requested alpha.

    ``phi`` aggregates probability rows: a callable from an (m, C) array to
    a length-C vector, applied per training point over its out-of-bootstrap
    models and again across training points at each test feature.  The
    default (None) is the elementwise mean, which runs on a fast vectorized
    path; custom aggregators take the literal, much slower route.
    """
    train_x = np.asarray(train_x, dtype=float)
    test_x = np.asarray(test_x, dtype=float)
    n_train, n_test = len(train_x), len(test_x)
    if num_bootstrap < 2:
        raise ValueError("need at least 2 bootstrap models")
    if n_train < 10:
        raise ValueError("need at least 10 training points")
    if not 1 <= batch_size <= max(n_test, 1):
        raise ValueError("batch_size must be in [1, number of test points]")
    alphas = tuple(float(a) for a in alphas)
    if classifier_factory is None:
        classifier_factory = LogisticClassifier

    class_labels, y_train, y_test = _encode_labels(train_y, test_y)
    C = len(class_labels)
    rng = np.random.default_rng(seed)
    boot_indices = rng.integers(0, n_train, size=(num_bootstrap, n_train))
    uniforms = rng.uniform(size=n_train + n_test)

    p_train = np.zeros((num_bootstrap, n_train, C))
    p_test = np.zeros((num_bootstrap, n_test, C))
    for b in range(num_bootstrap):
        clf = classifier_factory()
        clf.fit(train_x[boot_indices[b]], y_train[boot_indices[b]], num_classes=C, seed=seed + b)
        p_train[b] = clf.predict_proba(train_x)
        p_test[b] = clf.predict_proba(test_x)

    in_sample = np.zeros((num_bootstrap, n_train), dtype=bool)
    for b in range(num_bootstrap):
        in_sample[b, boot_indices[b]] = True
    out = (~in_sample).T.astype(float)             # (n_train, B)
    out_counts = out.sum(axis=1)
    fallbacks = int((out_counts == 0).sum())
    if fallbacks:
        logger.info(
            "%d training points appear in every bootstrap sample; "
            "their leave-one-out aggregate falls back to the full ensemble mean",
            fallbacks,
        )
    weights = np.where(
        out_counts[:, None] > 0, out / np.maximum(out_counts[:, None], 1.0), 1.0 / num_bootstrap
    )

    if phi is None:
        loo_train = _renormalize(np.einsum("ib,bic->ic", weights, p_train))
        # test-point probabilities: mean of the per-training-point LOO ensembles
        w_bar = weights.mean(axis=0)
        proba_test = _renormalize(np.einsum("b,bjc->jc", w_bar, p_test))
    else:
        out_models = [np.flatnonzero(out[i]) for i in range(n_train)]
        loo_train = np.zeros((n_train, C))
        for i in range(n_train):
            rows = p_train[out_models[i], i, :] if len(out_models[i]) else p_train[:, i, :]
            loo_train[i] = phi(rows)
        loo_train = _renormalize(loo_train)
        proba_test = np.zeros((n_test, C))
        for j in range(n_test):
            per_train = np.array(
                [
                    phi(p_test[out_models[i], j, :] if len(out_models[i]) else p_test[:, j, :])
                    for i in range(n_train)
                ]
            )
            proba_test[j] = phi(per_train)
        proba_test = _renormalize(proba_test)

    tau_init = np.array(
        [score(loo_train[i], y_train[i], uniforms[i], score_params) for i in range(n_train)]
    )
    store = CalibrationStore(tau_init)

    sets: dict[float, list[PredictionSet]] = {a: [] for a in alphas}
    for j in range(n_test):
        u_j = uniforms[n_train + j]
        for a in alphas:
            sets[a].append(build_set(proba_test[j], store, a, u_j, score_params, class_labels))
        if (j + 1) % batch_size == 0:
            batch = range(j + 1 - batch_size, j + 1)
            new_scores = np.array(
                [
                    score(proba_test[i], y_test[i], uniforms[n_train + i], score_params)
                    for i in batch
                ]
            )
            store = store.slide(new_scores)

    coverage, mean_size = _summaries(sets, np.asarray(test_y), alphas)
    return ConformalRun(
        method="eraps",
        alphas=alphas,
        sets=sets,
        coverage=coverage,
        mean_size=mean_size,
        class_labels=class_labels,
        loo_fallbacks=fallbacks,
    )


def sraps(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray | None = None,
    *,
    split_fraction: float = 0.5,
    alphas,
    score_params: ScoreParams = ScoreParams(),
    classifier_factory=None,
    seed: int = 0,
) -> ConformalRun:
    """Split-conformal baseline: one model, one fixed calibration split,
    the same score and set rule, no sliding."""
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must be in (0, 1)")
    train_x = np.asarray(train_x, dtype=float)
    test_x = np.asarray(test_x, dtype=float)
    alphas = tuple(float(a) for a in alphas)
    if classifier_factory is None:
        classifier_factory = LogisticClassifier

    class_labels, y_train, y_test = _encode_labels(train_y, test_y)
    C = len(class_labels)
    n_train, n_test = len(train_x), len(test_x)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_train)
    n_proper = max(1, int(math.floor(split_fraction * n_train)))
    if n_proper >= n_train:
        raise ValueError("calibration split is empty")
    proper, cal = perm[:n_proper], perm[n_proper:]
    if len(np.unique(y_train[proper])) < 2:
        raise ValueError("proper-training split is degenerate (single class)")
    uniforms = rng.uniform(size=len(cal) + n_test)

    clf = classifier_factory()
    clf.fit(train_x[proper], y_train[proper], num_classes=C, seed=seed)
    p_cal = clf.predict_proba(train_x[cal])
    tau_cal = np.array(
        [score(p_cal[i], y_train[cal[i]], uniforms[i], score_params) for i in range(len(cal))]
    )
    store = CalibrationStore(tau_cal)

    proba_test = clf.predict_proba(test_x)
    sets: dict[float, list[PredictionSet]] = {a: [] for a in alphas}
    for j in range(n_test):
        u_j = uniforms[len(cal) + j]
        for a in alphas:
            sets[a].append(build_set(proba_test[j], store, a, u_j, score_params, class_labels))

    truths = np.asarray(test_y) if test_y is not None else None
    coverage, mean_size = _summaries(sets, truths, alphas)
    return ConformalRun(
        method="sraps",
        alphas=alphas,
        sets=sets,
        coverage=coverage,
        mean_size=mean_size,
        class_labels=class_labels,
    )


def _summaries(sets, truths, alphas):
    coverage, mean_size = {}, {}
    for a in alphas:
        stream = sets[a]
        mean_size[a] = float(np.mean([s.size for s in stream])) if stream else 0.0
        if truths is None:
            coverage[a] = float("nan")
        else:
            hits = [truths[i] in stream[i] for i in range(len(stream))]
            coverage[a] = float(np.mean(hits)) if hits else float("nan")
    return coverage, mean_size


def coverage_report(sets_by_alpha: dict, truths: np.ndarray, alphas=None):
    """Marginal coverage and mean set size per alpha.

    Returns a list of ``{"alpha", "coverage", "mean_size"}`` rows sorted by
    alpha.
    """
    truths = np.asarray(truths)
    if alphas is None:
        alphas = sorted(sets_by_alpha)
    rows = []
    for a in alphas:
        stream = sets_by_alpha[a]
        if len(stream) != len(truths):
            raise ValueError("prediction-set stream and truth stream are misaligned")
        coverage = float(np.mean([truths[i] in stream[i] for i in range(len(stream))])) if len(stream) else float("nan")
        mean_size = float(np.mean([s.size for s in stream])) if len(stream) else 0.0
        rows.append({"alpha": float(a), "coverage": coverage, "mean_size": mean_size})
    return rows
