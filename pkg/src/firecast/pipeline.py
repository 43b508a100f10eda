"""Data ingestion, spatial gridding, evaluation metrics, and end-to-end runs.

Raw incident files carry either latitude/longitude pairs (mapped onto a
square grid, default 0.24-degree cells) or precomputed cell ids.  Continuous
mark columns are imputed per location with a degree-5 spline over time
(linear below six observed points, then constant fill), standardized, and
min-max scaled to [0, 1]; scaling statistics are fitted once on training
data and can be frozen for later files.  ``run_end_to_end`` chains
simulate-or-ingest, fitting, detection, metrics, and optionally conformal
sets, writing every artifact plus a reproducibility manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import InterpolatedUnivariateSpline

from . import conformal as conformal_mod
from . import estimation, model, simulation, thresholding
from .events import EventSequence, save_events_csv
from .marks import LinearMarkModel, NonLinearMarkModel, kde_scorer
from .model import ModelParams, RATE_FLOOR

__version__ = "0.1.0"


class PipelineError(RuntimeError):
    """Stage-tagged failure; partial artifacts already written are retained."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


# ---------------------------------------------------------------------------
# spatial grid


@dataclass(frozen=True)
class GridSpec:
    """Square-cell discretization of a bounding box.

    Retained cells (those not excluded, e.g. ocean) get compact ids
    0..K-1 in row-major order; ``excluded`` holds full-grid row-major
    indices.
    """

    lat_min: float
    lon_min: float
    lat_max: float
    lon_max: float
    cell_size: float = 0.24
    excluded: tuple[int, ...] = ()

    def __post_init__(self):
        if self.lat_max <= self.lat_min or self.lon_max <= self.lon_min:
            raise ValueError("bounding box is empty")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        # tolerate float error when the span is an exact multiple of the cell
        n_rows = max(1, math.ceil((self.lat_max - self.lat_min) / self.cell_size - 1e-9))
        n_cols = max(1, math.ceil((self.lon_max - self.lon_min) / self.cell_size - 1e-9))
        retained = [i for i in range(n_rows * n_cols) if i not in set(self.excluded)]
        if not retained:
            raise ValueError("all grid cells are excluded")
        compact = {full: cid for cid, full in enumerate(retained)}
        object.__setattr__(self, "_n_rows", n_rows)
        object.__setattr__(self, "_n_cols", n_cols)
        object.__setattr__(self, "_retained", tuple(retained))
        object.__setattr__(self, "_compact", compact)

    @property
    def shape(self) -> tuple[int, int]:
        return (self._n_rows, self._n_cols)

    @property
    def num_cells(self) -> int:
        return len(self._retained)

    def cell_of(self, lat: float, lon: float) -> int | None:
        """Compact cell id for a coordinate; None if outside or excluded."""
        if not (self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max):
            return None
        row = min(int((lat - self.lat_min) / self.cell_size), self._n_rows - 1)
        col = min(int((lon - self.lon_min) / self.cell_size), self._n_cols - 1)
        return self._compact.get(row * self._n_cols + col)

    def rowcol_of(self, cell_id: int) -> tuple[int, int]:
        row, col = divmod(self._retained[cell_id], self._n_cols)
        return int(row), int(col)

    def cell_at(self, row: int, col: int) -> int | None:
        """Compact id of the cell at (row, col); None if excluded/out of range."""
        if not (0 <= row < self._n_rows and 0 <= col < self._n_cols):
            return None
        return self._compact.get(row * self._n_cols + col)

    def centroid(self, cell_id: int) -> tuple[float, float]:
        # clamped into the box so edge cells truncated by the boundary still
        # round-trip through cell_of
        full = self._retained[cell_id]
        row, col = divmod(full, self._n_cols)
        return (
            min(self.lat_min + (row + 0.5) * self.cell_size, self.lat_max),
            min(self.lon_min + (col + 0.5) * self.cell_size, self.lon_max),
        )

    def centroids(self) -> np.ndarray:
        return np.array([self.centroid(cid) for cid in range(self.num_cells)])

    def to_dict(self) -> dict:
        return {
            "lat_min": self.lat_min,
            "lon_min": self.lon_min,
            "lat_max": self.lat_max,
            "lon_max": self.lon_max,
            "cell_size": self.cell_size,
            "excluded": list(self.excluded),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            lat_min=float(d["lat_min"]),
            lon_min=float(d["lon_min"]),
            lat_max=float(d["lat_max"]),
            lon_max=float(d["lon_max"]),
            cell_size=float(d.get("cell_size", 0.24)),
            excluded=tuple(int(i) for i in d.get("excluded", ())),
        )


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    spline_degree: int = 5
    categorical_columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.spline_degree < 1:
            raise ValueError("spline_degree must be >= 1")


@dataclass
class MarkStats:
    """Frozen scaling statistics: standardize then min-max per column.

    Zero-variance columns skip standardization and map to a constant 0.5.
    """

    columns: list
    mean: np.ndarray
    std: np.ndarray
    z_min: np.ndarray
    z_max: np.ndarray
    categories: dict = field(default_factory=dict)  # column -> sorted category values

    def transform(self, values: np.ndarray) -> np.ndarray:
        out = np.empty_like(values, dtype=float)
        for j in range(values.shape[1]):
            col = values[:, j]
            if self.std[j] <= 0 or self.z_max[j] <= self.z_min[j]:
                out[:, j] = 0.5
                continue
            z = (col - self.mean[j]) / self.std[j]
            out[:, j] = (z - self.z_min[j]) / (self.z_max[j] - self.z_min[j])
        return np.clip(out, 0.0, 1.0)

    @classmethod
    def fit(cls, values: np.ndarray, columns, categories=None) -> "MarkStats":
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        z_min = np.zeros(values.shape[1])
        z_max = np.zeros(values.shape[1])
        for j in range(values.shape[1]):
            if std[j] > 1e-12:
                z = (values[:, j] - mean[j]) / std[j]
                z_min[j], z_max[j] = z.min(), z.max()
            else:
                std[j] = 0.0
        return cls(
            columns=list(columns),
            mean=mean,
            std=std,
            z_min=z_min,
            z_max=z_max,
            categories=categories or {},
        )


def impute_series(times: np.ndarray, values: np.ndarray, degree: int = 5) -> np.ndarray:
    """Fill NaNs in a time series by spline interpolation over observed points.

    Falls back to linear interpolation below degree+1 observed points and to
    a constant below two.  Duplicate timestamps are averaged before fitting.
    """
    values = np.asarray(values, dtype=float).copy()
    observed = ~np.isnan(values)
    if observed.all():
        return values
    n_obs = int(observed.sum())
    if n_obs == 0:
        return values
    t_obs, v_obs = times[observed], values[observed]
    uniq, inverse = np.unique(t_obs, return_inverse=True)
    if len(uniq) != len(t_obs):
        v_uniq = np.zeros(len(uniq))
        counts = np.bincount(inverse)
        np.add.at(v_uniq, inverse, v_obs)
        v_uniq /= counts
        t_obs, v_obs = uniq, v_uniq
    missing = ~observed
    if len(t_obs) == 1:
        values[missing] = v_obs[0]
    elif len(t_obs) <= degree:
        values[missing] = np.interp(times[missing], t_obs, v_obs)
    else:
        spline = InterpolatedUnivariateSpline(t_obs, v_obs, k=degree, ext=3)
        values[missing] = spline(times[missing])
    return values


@dataclass
class IngestResult:
    sequence: EventSequence
    stats: MarkStats
    dropped_outside: int
    messages: list


def _read_raw_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, row))
    return header, rows


def ingest(
    csv_path,
    grid: GridSpec | None = None,
    prep: PreprocessConfig = PreprocessConfig(),
    horizon: float | None = None,
    stats: MarkStats | None = None,
) -> IngestResult:
    """Read an incident CSV into a preprocessed event sequence.

    The file needs a ``time`` column plus either ``location`` (cell ids) or
    ``lat``/``lon`` (mapped through ``grid``).  Every remaining column except
    ``magnitude`` is a mark; columns listed in ``prep.categorical_columns``
    are one-hot encoded, the rest are imputed and rescaled.  Events outside
    the grid are dropped and counted.  Pass ``stats`` to reuse scaling
    statistics fitted on training data.
    """
    header, rows = _read_raw_csv(csv_path)
    cols = {name: i for i, name in enumerate(header)}
    if "time" not in cols:
        raise ValueError(f"{csv_path}: missing 'time' column")
    has_coords = "lat" in cols and "lon" in cols
    if not has_coords and "location" not in cols:
        raise ValueError(f"{csv_path}: need either 'location' or 'lat'/'lon' columns")
    if has_coords and grid is None:
        raise ValueError("coordinate input requires a GridSpec")
    reserved = {"time", "lat", "lon", "location", "magnitude"}
    mark_cols = [name for name in header if name not in reserved]

    times, locs, mags = [], [], []
    raw_marks: dict[str, list] = {name: [] for name in mark_cols}
    dropped = 0
    messages: list[str] = []
    for lineno, row in rows:
        try:
            t = float(row[cols["time"]])
            if has_coords:
                cell = grid.cell_of(float(row[cols["lat"]]), float(row[cols["lon"]]))
            else:
                cell = int(row[cols["location"]])
                if grid is not None and not 0 <= cell < grid.num_cells:
                    cell = None
            if cell is None:
                dropped += 1
                continue
            times.append(t)
            locs.append(cell)
            if "magnitude" in cols:
                mags.append(int(row[cols["magnitude"]]))
            for name in mark_cols:
                raw = row[cols[name]].strip()
                if name in prep.categorical_columns:
                    raw_marks[name].append(raw)
                else:
                    raw_marks[name].append(float(raw) if raw else np.nan)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{csv_path}:{lineno}: unparseable row: {exc}") from exc
    if dropped:
        messages.append(f"dropped {dropped} events outside the grid")
    if not times:
        raise ValueError(f"{csv_path}: no events retained")

    order = np.argsort(np.asarray(times), kind="stable")
    times_arr = np.asarray(times, dtype=float)[order]
    locs_arr = np.asarray(locs, dtype=np.int64)[order]

    # expand categoricals (categories frozen with the stats), keep numerics
    categories = dict(stats.categories) if stats is not None else {}
    out_cols: list[str] = []
    out_vals: list[np.ndarray] = []
    for name in mark_cols:
        if name in prep.categorical_columns:
            column = [raw_marks[name][i] for i in order]
            if name not in categories:
                categories[name] = sorted(set(column))
            for cat in categories[name]:
                out_cols.append(f"{name}={cat}")
                out_vals.append(np.array([1.0 if v == cat else 0.0 for v in column]))
        else:
            col = np.asarray(raw_marks[name], dtype=float)[order]
            for k in np.unique(locs_arr):
                sel = locs_arr == k
                col[sel] = impute_series(times_arr[sel], col[sel], prep.spline_degree)
            if np.isnan(col).any():  # locations with zero observed values
                fill = np.nanmean(col) if not np.isnan(col).all() else 0.0
                col = np.where(np.isnan(col), fill, col)
            out_cols.append(name)
            out_vals.append(col)
    values = np.column_stack(out_vals) if out_vals else np.zeros((len(times_arr), 0))

    if stats is None:
        stats = MarkStats.fit(values, out_cols, categories)
    elif stats.columns != out_cols:
        raise ValueError(f"frozen statistics cover columns {stats.columns}, file has {out_cols}")
    scaled = stats.transform(values) if values.shape[1] else values

    if horizon is None:
        horizon = float(math.ceil(times_arr[-1])) if len(times_arr) else 1.0
    K = grid.num_cells if grid is not None else int(locs_arr.max()) + 1
    seq = EventSequence(
        times=times_arr,
        locations=locs_arr,
        marks=scaled,
        horizon=horizon,
        num_locations=K,
        magnitudes=np.asarray(mags, dtype=np.int64)[order] if mags else None,
    )
    return IngestResult(sequence=seq, stats=stats, dropped_outside=dropped, messages=messages)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def f1_metrics(predictions: np.ndarray, truths: np.ndarray) -> MetricsReport:
    """Per-location precision/recall/F1 with the 0/0 -> 1 convention.

    A location with no fires and no alarms counts as perfect; F1 is 0 when
    precision and recall are both 0.
    """
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape or predictions.ndim != 2:
        raise ValueError("predictions and truths must be aligned (steps, locations) arrays")
    K = predictions.shape[1]
    precision = np.zeros(K)
    recall = np.zeros(K)
    f1 = np.zeros(K)
    for k in range(K):
        V = int((predictions[:, k] == 1).sum())
        U = int((truths[:, k] == 1).sum())
        hits = int(((predictions[:, k] == 1) & (truths[:, k] == 1)).sum())
        precision[k] = hits / V if V else 1.0
        recall[k] = hits / U if U else 1.0
        f1[k] = 2 * precision[k] * recall[k] / (precision[k] + recall[k]) if precision[k] + recall[k] > 0 else 0.0
    counts, edges = np.histogram(f1, bins=10, range=(0.0, 1.0))
    return MetricsReport(precision=precision, recall=recall, f1=f1, hist_counts=counts, hist_edges=edges)


def metrics_from_trace(trace: thresholding.DetectionTrace) -> MetricsReport:
    return f1_metrics(trace.prediction, trace.truth)


# ---------------------------------------------------------------------------
# risk series and day-level truths


def daily_truths(seq: EventSequence, num_days: int) -> np.ndarray:
    """(num_days, K) matrix, +1 where day (d-1, d] saw an event, else -1."""
    truth = np.full((num_days, seq.num_locations), -1, dtype=np.int64)
    for t, k in zip(seq.times, seq.locations):
        day = max(1, math.ceil(t)) if t > 0 else 1
        if day <= num_days:
            truth[day - 1, int(k)] = 1
    return truth


def query_marks_by_location(seq: EventSequence) -> np.ndarray:
    """Per-location mean training mark, used as the query mark vector."""
    K, p = seq.num_locations, seq.mark_dim
    out = np.full((K, p), 0.5)
    if len(seq):
        overall = seq.marks.mean(axis=0)
        for k in range(K):
            sel = seq.locations == k
            out[k] = seq.marks[sel].mean(axis=0) if sel.any() else overall
    return out


def risk_series(
    params: ModelParams,
    seq: EventSequence,
    mark_model,
    times: np.ndarray | None = None,
    query_marks: np.ndarray | None = None,
) -> np.ndarray:
    """Predicted intensity lambda(t, k, m) on a time grid, floored at RATE_FLOOR.

    ``times`` defaults to day ends 1..floor(horizon); ``query_marks`` is a
    (K, p) matrix of mark vectors, defaulting to per-location training means.
    """
    if times is None:
        times = np.arange(1.0, math.floor(seq.horizon) + 1.0)
    times = np.asarray(times, dtype=float)
    if query_marks is None:
        query_marks = query_marks_by_location(seq)
    K = seq.num_locations
    mu, alpha, beta = params.mu, params.alpha, params.beta

    ground = np.zeros((len(times), K))
    excite = np.zeros(K)
    t_cur = 0.0
    ei = 0
    ev_times, ev_locs = seq.times, seq.locations
    for idx, t in enumerate(times):
        while ei < len(ev_times) and ev_times[ei] < t:
            excite *= np.exp(-beta * (ev_times[ei] - t_cur))
            excite += beta * alpha[ev_locs[ei], :]
            t_cur = ev_times[ei]
            ei += 1
        ground[idx] = mu + excite * np.exp(-beta * (t - t_cur))

    out = np.zeros_like(ground)
    for k in range(K):
        for idx, t in enumerate(times):
            s = mark_model.score(params.gamma, query_marks[k], float(t), k)
            out[idx, k] = max(ground[idx, k] * s, RATE_FLOOR)
    return out


def counterfactual_delta(
    params: ModelParams,
    seq: EventSequence,
    mark_model,
    t: float,
    k: int,
    marks_a: np.ndarray,
    marks_b: np.ndarray,
) -> dict:
    """Risk change when the external condition switches from A to B."""
    lam_a = model.conditional_intensity(params, seq, mark_model, t, k, marks_a)
    lam_b = model.conditional_intensity(params, seq, mark_model, t, k, marks_b)
    return {"lambda_a": lam_a, "lambda_b": lam_b, "delta": lam_b - lam_a}


# ---------------------------------------------------------------------------
# artifact writers (deterministic byte-for-byte)


def write_fit_trace_csv(path, trace: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("iter,objective\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{float(v)!r}\n")


def write_detections_csv(path, trace: thresholding.DetectionTrace, times=None) -> None:
    T, K = trace.risk.shape
    if times is None:
        times = np.arange(1, T + 1)
    with open(path, "w", newline="") as fh:
        fh.write("time,location,risk,threshold,prediction,truth\n")
        for t in range(T):
            for k in range(K):
                fh.write(
                    f"{float(times[t])!r},{k},{float(trace.risk[t, k])!r},"
                    f"{float(trace.threshold[t, k])!r},{int(trace.prediction[t, k])},"
                    f"{int(trace.truth[t, k])}\n"
                )


def read_detections_csv(path) -> thresholding.DetectionTrace:
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    locs = data["location"].astype(int)
    times = np.unique(data["time"])
    K = locs.max() + 1
    T = len(times)
    order = {t: i for i, t in enumerate(times)}
    risk = np.zeros((T, K))
    thr = np.zeros((T, K))
    pred = np.zeros((T, K), dtype=np.int64)
    truth = np.zeros((T, K), dtype=np.int64)
    for row in data:
        i = order[row["time"]]
        k = int(row["location"])
        risk[i, k] = row["risk"]
        thr[i, k] = row["threshold"]
        pred[i, k] = int(row["prediction"])
        truth[i, k] = int(row["truth"])
    return thresholding.DetectionTrace(risk=risk, threshold=thr, prediction=pred, truth=truth)


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("location,precision,recall,f1\n")
        for k in range(len(report.f1)):
            fh.write(
                f"{k},{float(report.precision[k])!r},{float(report.recall[k])!r},"
                f"{float(report.f1[k])!r}\n"
            )


def write_conformal_sets_jsonl(path, run: conformal_mod.ConformalRun) -> None:
    with open(path, "w") as fh:
        for a in run.alphas:
            for i, pset in enumerate(run.sets[a]):
                fh.write(
                    json.dumps(
                        {"index": i, "alpha": a, "set": [int(v) for v in pset.labels]},
                        sort_keys=True,
                    )
                    + "\n"
                )


def write_conformal_summary_csv(path, run: conformal_mod.ConformalRun) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("alpha,coverage,mean_size,method\n")
        for a in run.alphas:
            fh.write(f"{a!r},{run.coverage[a]!r},{run.mean_size[a]!r},{run.method}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# end-to-end orchestration


def _bundle_simulate(cfg: dict, seed: int, wants_magnitudes: bool):
    params = (
        ModelParams.from_json(Path(cfg["params_file"]).read_text())
        if "params_file" in cfg
        else ModelParams.from_json(json.dumps(cfg["params"]))
    )
    magnitude_sampler = None
    n_classes = int(cfg.get("magnitude_classes", 0))
    if wants_magnitudes and n_classes >= 2:
        def magnitude_sampler(rng, marks, location):
            # label tied to the first mark so a classifier has signal
            return 1 + min(n_classes - 1, int(marks[0] * n_classes))

    sim = simulation.SimConfig(
        params=params,
        horizon=float(cfg["horizon"]),
        seed=seed,
        mark_sampler=(
            simulation.linear_density_mark_sampler(params.gamma)
            if cfg.get("mark_distribution", "linear") == "linear"
            else simulation.uniform_mark_sampler
        ),
        magnitude_sampler=magnitude_sampler,
    )
    return simulation.simulate(sim), params.mask


def run_end_to_end(bundle: dict, out_dir) -> dict:
    """Execute the full chain described by a config bundle; returns the manifest.

    Stages: simulate-or-ingest -> fit -> predict -> eval -> optional
    conformal.  All artifacts land in ``out_dir`` with fixed names; the
    manifest records the seed, package version, config hash, and artifact
    digests, and two runs with the same bundle are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(bundle.get("seed", 0))
    config_hash = hashlib.sha256(
        json.dumps(bundle, sort_keys=True).encode()
    ).hexdigest()
    artifacts: dict[str, str] = {}
    notes: list[str] = []
    stages: list[str] = []

    # --- data
    try:
        wants_mag = "conformal" in bundle
        if "simulate" in bundle:
            seq, mask = _bundle_simulate(bundle["simulate"], seed, wants_mag)
        elif "ingest" in bundle:
            cfg = bundle["ingest"]
            grid = GridSpec.from_dict(cfg["grid"]) if "grid" in cfg else None
            prep = PreprocessConfig(
                spline_degree=int(cfg.get("spline_degree", 5)),
                categorical_columns=tuple(cfg.get("categorical_columns", ())),
            )
            result = ingest(cfg["csv"], grid, prep, horizon=cfg.get("horizon"))
            seq = result.sequence
            notes.extend(result.messages)
            mask = np.ones((seq.num_locations, seq.num_locations), dtype=bool)
            if grid is not None and "neighbor_radius" in cfg:
                mask = model.mask_from_centroids(grid.centroids(), float(cfg["neighbor_radius"]))
        else:
            raise ValueError("bundle needs a 'simulate' or 'ingest' stage")
        save_events_csv(seq, out / "events.csv")
        artifacts["events.csv"] = _sha256(out / "events.csv")
        stages.append("data")
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("data", str(exc)) from exc

    # --- fit
    try:
        cfg = dict(bundle.get("fit", {}))
        method = cfg.pop("method", "grid")
        mark_model = _mark_model_from_config(cfg.pop("mark_model", "linear"), seq)
        fit_config = estimation.FitConfig(**cfg)
        feasible = estimation.FeasibleSet(mask=mask)
        if method == "alternating":
            fit = estimation.alternating_fit(seq, mark_model, fit_config, feasible)
        else:
            fit = estimation.grid_fit(seq, mark_model, fit_config, feasible)
        fit.params.to_json(out / "params.json")
        write_fit_trace_csv(out / "fit_trace.csv", fit.trace)
        artifacts["params.json"] = _sha256(out / "params.json")
        artifacts["fit_trace.csv"] = _sha256(out / "fit_trace.csv")
        stages.append("fit")
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("fit", str(exc)) from exc

    # --- predict
    try:
        cfg = bundle.get("predict", {})
        num_days = int(math.floor(seq.horizon))
        risk = risk_series(fit.params, seq, mark_model)
        truth = daily_truths(seq, num_days)
        tconfig = thresholding.ThresholdConfig.from_first_day_risk(
            risk[0],
            num_days,
            delta=float(cfg.get("delta", 0.05)),
            a1=float(cfg.get("a1", 1.1)),
            a2=float(cfg.get("a2", 1.1)),
        )
        screening = (
            thresholding.ScreeningState.from_validation(truth) if cfg.get("screening", True) else None
        )
        trace = thresholding.detect(risk, truth, tconfig, screening)
        write_detections_csv(out / "detections.csv", trace)
        artifacts["detections.csv"] = _sha256(out / "detections.csv")
        stages.append("predict")
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("predict", str(exc)) from exc

    # --- eval
    try:
        report = metrics_from_trace(trace)
        write_metrics_csv(out / "metrics.csv", report)
        artifacts["metrics.csv"] = _sha256(out / "metrics.csv")
        stages.append("eval")
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("eval", str(exc)) from exc

    # --- conformal (optional)
    if "conformal" in bundle:
        try:
            cfg = bundle["conformal"]
            if seq.magnitudes is None:
                raise ValueError("conformal stage needs magnitude labels in the data")
            frac = float(cfg.get("train_fraction", 0.6))
            n_train = max(10, int(frac * len(seq)))
            if n_train >= len(seq):
                raise ValueError("not enough events for a conformal test stream")
            X, y = seq.marks, seq.magnitudes
            sp = conformal_mod.ScoreParams(
                lambda_reg=float(cfg.get("lambda_reg", 1.0)), k_reg=int(cfg.get("k_reg", 2))
            )
            alphas = tuple(float(a) for a in cfg.get("alphas", (0.1,)))
            method = cfg.get("method", "eraps")
            if method == "eraps":
                run = conformal_mod.eraps(
                    X[:n_train], y[:n_train], X[n_train:], y[n_train:],
                    num_bootstrap=int(cfg.get("num_bootstrap", 10)),
                    batch_size=min(int(cfg.get("batch_size", 10)), len(seq) - n_train),
                    alphas=alphas,
                    score_params=sp,
                    seed=seed,
                )
            else:
                run = conformal_mod.sraps(
                    X[:n_train], y[:n_train], X[n_train:], y[n_train:],
                    split_fraction=float(cfg.get("split_fraction", 0.5)),
                    alphas=alphas,
                    score_params=sp,
                    seed=seed,
                )
            write_conformal_sets_jsonl(out / "conformal_sets.jsonl", run)
            write_conformal_summary_csv(out / "conformal_summary.csv", run)
            artifacts["conformal_sets.jsonl"] = _sha256(out / "conformal_sets.jsonl")
            artifacts["conformal_summary.csv"] = _sha256(out / "conformal_summary.csv")
            stages.append("conformal")
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError("conformal", str(exc)) from exc

    manifest = {
        "package_version": __version__,
        "seed": seed,
        "config_sha256": config_hash,
        "stages": stages,
        "artifacts": artifacts,
        "notes": notes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def _mark_model_from_config(spec, seq: EventSequence):
    if spec == "linear":
        return LinearMarkModel()
    if spec == "kde":
        return NonLinearMarkModel(kde_scorer(seq.marks))
    raise ValueError(f"unknown mark model {spec!r}")
