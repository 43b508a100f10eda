"""Binary event detection from risk trajectories via dynamic thresholds.

Per location the detector keeps a threshold that is updated only after
incorrect predictions (raise after a false alarm, lower after a miss on the
first step), projected into a per-location band, floored so that sharp risk
rises lift it quickly, and reset outright when the risk collapses.  A step
is flagged only when the relative risk increase clears a slope gate and the
risk exceeds the threshold.  Three screening rules can additionally veto
positives before they are emitted, to cap false alarms:

1. the location must have had at least one fire in the validation window,
2. emitted detections must not exceed the validation-window fire count,
3. the time since the last emitted positive must reach the average
   validation occurrence gap.

Screening filters the output stream only; the threshold feedback runs on
the detector's own raw predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ThresholdConfig:
    """Per-location detector knobs.

    ``from_first_day_risk`` derives the defaults: band endpoints at
    risk/1.8 and risk*1.8, learning rate (band width) / horizon^1.5, slope
    gate 0.05, and both ratio knobs at 1.1.
    """

    tau_min: np.ndarray
    tau_max: np.ndarray
    eta: np.ndarray
    delta: np.ndarray
    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        for name in ("tau_min", "tau_max", "eta", "delta", "a1", "a2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.tau_min > self.tau_max):
            raise ValueError("tau_min must be <= tau_max")
        if np.any(self.eta < 0) or np.any(self.delta < 0):
            raise ValueError("eta and delta must be nonnegative")
        if np.any(self.a1 <= 0) or np.any(self.a2 <= 0):
            raise ValueError("a1 and a2 must be positive")

    @property
    def num_locations(self) -> int:
        return len(self.tau_min)

    @classmethod
    def from_first_day_risk(
        cls,
        first_risk: np.ndarray,
        horizon_steps: int,
        delta: float = 0.05,
        a1: float = 1.1,
        a2: float = 1.1,
    ) -> "ThresholdConfig":
        first_risk = np.asarray(first_risk, dtype=float)
        if np.any(first_risk <= 0):
            raise ValueError(
                "first-day risk must be strictly positive (clamp the risk series upstream)"
            )
        tau_min = first_risk / 1.8
        tau_max = first_risk * 1.8
        eta = (tau_max - tau_min) / horizon_steps**1.5
        K = len(first_risk)
        return cls(
            tau_min=tau_min,
            tau_max=tau_max,
            eta=eta,
            delta=np.full(K, delta),
            a1=np.full(K, a1),
            a2=np.full(K, a2),
        )


def project_threshold(x: float, config: ThresholdConfig, k: int) -> float:
    """Closest point of [tau_min_k, tau_max_k] to x, i.e. a clamp."""
    return float(min(max(x, config.tau_min[k]), config.tau_max[k]))


@dataclass
class ScreeningState:
    """Validation statistics plus running detection counters for the rules."""

    fire_count: np.ndarray     # fires per location in the validation window
    avg_gap: np.ndarray        # mean gap (days) between validation fires
    detections: np.ndarray = field(default=None)
    last_positive: np.ndarray = field(default=None)

    def __post_init__(self):
        self.fire_count = np.asarray(self.fire_count, dtype=np.int64)
        self.avg_gap = np.asarray(self.avg_gap, dtype=float)
        if self.detections is None:
            self.detections = np.zeros(len(self.fire_count), dtype=np.int64)
        if self.last_positive is None:
            self.last_positive = np.full(len(self.fire_count), -np.inf)

    @classmethod
    def from_validation(cls, truth: np.ndarray, window_length: float | None = None) -> "ScreeningState":
        """Build the per-location statistics from a (T, K) validation truth
        matrix with entries in {-1, 1}; a single fire gets gap = window length."""
        truth = np.asarray(truth)
        T, K = truth.shape
        if window_length is None:
            window_length = float(T)
        counts = (truth == 1).sum(axis=0)
        gaps = np.full(K, np.inf)
        for k in range(K):
            fire_steps = np.flatnonzero(truth[:, k] == 1)
            if len(fire_steps) >= 2:
                gaps[k] = float(np.diff(fire_steps).mean())
            elif len(fire_steps) == 1:
                gaps[k] = window_length
        return cls(fire_count=counts, avg_gap=gaps)

    def copy(self) -> "ScreeningState":
        return ScreeningState(
            fire_count=self.fire_count.copy(),
            avg_gap=self.avg_gap.copy(),
            detections=self.detections.copy(),
            last_positive=self.last_positive.copy(),
        )

    def allows(self, k: int, t: float) -> bool:
        if self.fire_count[k] < 1:
            return False
        if self.detections[k] >= self.fire_count[k]:
            return False
        return t - self.last_positive[k] >= self.avg_gap[k]

    def record(self, k: int, t: float) -> None:
        self.detections[k] += 1
        self.last_positive[k] = t


@dataclass(frozen=True)
class DetectionTrace:
    """Per (step, location): risk, final threshold, emitted prediction, truth."""

    risk: np.ndarray        # (T, K)
    threshold: np.ndarray   # (T, K)
    prediction: np.ndarray  # (T, K), values in {-1, 1}
    truth: np.ndarray       # (T, K), values in {-1, 1}


def _detect_one(lam, truth, tau_min, tau_max, eta, delta, a1, a2, allow, record):
    """Threshold dynamics for one location; truth is revealed step by step."""
    T = len(lam)
    thresholds = np.zeros(T)
    emitted = np.zeros(T, dtype=np.int64)

    def proj(x):
        return min(max(x, tau_min), tau_max)

    def emit(t, raw):
        if raw == 1 and not allow(t):
            emitted[t] = -1
            return
        emitted[t] = raw
        if raw == 1:
            record(t)

    tau = tau_min
    thresholds[0] = tau
    raw = 1 if lam[0] > tau else -1
    emit(0, raw)
    if raw != truth[0]:
        tau = max(proj(tau + eta * raw), lam[0] / a1)
    for t in range(1, T):
        thresholds[t] = tau
        increase = abs((lam[t] - lam[t - 1]) / lam[t - 1])
        raw = -1
        if increase >= delta and lam[t] > tau:
            raw = 1
            if raw != truth[t]:
                tau = max(proj(thresholds[t - 1] + eta * raw), lam[t - 1] / a1)
                thresholds[t] = tau
        if lam[t] <= lam[t - 1] / a2:
            tau = lam[t]
            thresholds[t] = tau
        emit(t, raw)
    return thresholds, emitted


def detect(
    risk: np.ndarray,
    truth: np.ndarray,
    config: ThresholdConfig,
    screening: ScreeningState | None = None,
) -> DetectionTrace:
    """Run the dynamic-threshold detector on a (T, K) risk matrix.

    ``truth`` has entries in {-1, 1} and is consumed one step behind the
    predictions (feedback).  ``screening=None`` disables the veto rules.
    The caller's screening state is not mutated.
    """
    risk = np.asarray(risk, dtype=float)
    truth = np.asarray(truth)
    if risk.shape != truth.shape:
        raise ValueError(f"risk shape {risk.shape} != truth shape {truth.shape}")
    if risk.ndim != 2:
        raise ValueError("risk must be (steps, locations)")
    if np.any(risk <= 0):
        raise ValueError("risk series must be strictly positive (clamp upstream)")
    if not np.all(np.isin(truth, (-1, 1))):
        raise ValueError("truth entries must be -1 or 1")
    T, K = risk.shape
    if config.num_locations != K:
        raise ValueError("config has wrong number of locations")
    state = screening.copy() if screening is not None else None

    thresholds = np.zeros((T, K))
    predictions = np.zeros((T, K), dtype=np.int64)
    for k in range(K):
        if state is None:
            allow = lambda t: True
            record = lambda t: None
        else:
            allow = lambda t, k=k: state.allows(k, t)
            record = lambda t, k=k: state.record(k, t)
        thresholds[:, k], predictions[:, k] = _detect_one(
            risk[:, k],
            truth[:, k],
            float(config.tau_min[k]),
            float(config.tau_max[k]),
            float(config.eta[k]),
            float(config.delta[k]),
            float(config.a1[k]),
            float(config.a2[k]),
            allow,
            record,
        )
    return DetectionTrace(risk=risk, threshold=thresholds, prediction=predictions, truth=truth)
