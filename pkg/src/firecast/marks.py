"""Mark models: how a feature vector scales the ground intensity.

The linear model scores a mark vector as ``gamma @ m`` with the weights held
in the point-process parameters.  The nonlinear model delegates to an
arbitrary fitted scorer ``(marks, time, location) -> nonnegative score``;
two simple scorers ship here (a per-event lookup table and a Gaussian KDE),
anything fancier plugs in through the same callable contract.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde


class LinearMarkModel:
    """Mark score ``gamma @ m`` with ``gamma`` taken from the model params."""

    uses_gamma = True

    def event_scores(self, gamma: np.ndarray, seq) -> np.ndarray:
        return seq.marks @ gamma

    def score(self, gamma: np.ndarray, marks: np.ndarray, t: float, location: int) -> float:
        marks = np.asarray(marks, dtype=float)
        if marks.shape != gamma.shape:
            raise ValueError(
                f"mark vector has length {marks.shape}, expected {gamma.shape}"
            )
        return float(gamma @ marks)


class NonLinearMarkModel:
    """Mark score from a fitted deterministic scorer, independent of gamma."""

    uses_gamma = False

    def __init__(self, scorer):
        self.scorer = scorer

    def event_scores(self, gamma: np.ndarray, seq) -> np.ndarray:
        return np.array(
            [
                self.scorer(seq.marks[i], float(seq.times[i]), int(seq.locations[i]))
                for i in range(len(seq))
            ],
            dtype=float,
        )

    def score(self, gamma: np.ndarray, marks: np.ndarray, t: float, location: int) -> float:
        return float(self.scorer(np.asarray(marks, dtype=float), t, location))


def precomputed_scorer(times: np.ndarray, locations: np.ndarray, scores: np.ndarray, time_tol: float = 1e-9):
    """Scorer backed by per-event scores computed offline.

    Lookup is by exact (time, location) match; querying a pair that was not
    scored raises, since inventing a score would silently corrupt the
    likelihood.
    """
    times = np.asarray(times, dtype=float)
    locations = np.asarray(locations, dtype=np.int64)
    scores = np.asarray(scores, dtype=float)
    if not (len(times) == len(locations) == len(scores)):
        raise ValueError("times, locations, scores must have equal length")

    table = {}
    for t, u, s in zip(times, locations, scores):
        table[(round(float(t) / time_tol), int(u))] = float(s)

    def scorer(marks, t, location):
        key = (round(float(t) / time_tol), int(location))
        if key not in table:
            raise KeyError(f"no precomputed score for (t={t}, location={location})")
        return table[key]

    return scorer


def load_precomputed_scores(path: str | Path):
    """Load a ``time,location,score`` CSV into a precomputed scorer."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    return precomputed_scorer(data["time"], data["location"].astype(np.int64), data["score"])


def kde_scorer(train_marks: np.ndarray):
    """Gaussian kernel-density scorer fitted on training marks.

    Bandwidth follows Scott's rule.  The returned scorer ignores time and
    location and is deterministic given the training marks.
    """
    train_marks = np.asarray(train_marks, dtype=float)
    if train_marks.ndim != 2 or train_marks.shape[0] < 2:
        raise ValueError("need a (n, p) mark matrix with n >= 2")
    kde = gaussian_kde(train_marks.T)  # Scott's rule is the scipy default

    def scorer(marks, t, location):
        return float(kde(np.asarray(marks, dtype=float).reshape(-1, 1))[0])

    return scorer
