"""Constrained maximum likelihood for the point-process parameters.

At a fixed temporal decay ``beta`` the penalized negative log-likelihood is
convex in (mu, alpha, gamma); it is minimized by projected gradient descent
with step sizes ``t_k = 1 / (kappa * (k + 1))`` and soft-thresholding for
the l1 part of the gamma block.  ``beta`` itself is handled either by a
one-dimensional grid search (``grid_fit``) or by alternating the convex
solve with a golden-section line search (``alternating_fit``).

All routines are deterministic: same inputs give bit-identical results.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import model
from .events import EventSequence
from .model import ModelParams, RATE_FLOOR

LINE_SCAN_POINTS = 25  # coarse scan resolution of the beta line search


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient evaluation produces NaN or infinity."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite gradient at step {step}")


@dataclass(frozen=True)
class FeasibleSet:
    """Convex constraint region: balls per block, nonnegativity, and the
    interaction sparsity mask."""

    mask: np.ndarray
    mu_radius: float = 1.0
    alpha_radius: float = 1.0
    gamma_radius: float = 1.0
    nonneg_mu: bool = True
    nonneg_beta: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def num_locations(self) -> int:
        return self.mask.shape[0]


def _scale_into_ball(x: np.ndarray, radius: float) -> np.ndarray:
    nrm = float(np.linalg.norm(x))
    if nrm <= radius:
        return x
    return x * (radius / nrm)


def project(raw: ModelParams, feasible: FeasibleSet) -> ModelParams:
    """Exact Euclidean projection onto the feasible set.

    Per block: mu is clamped to the nonnegative orthant then scaled into its
    l2 ball; alpha has masked entries zeroed then is scaled into its
    Frobenius ball; gamma is scaled into its l2 ball; beta is clamped at
    zero.  Each composition is the exact projection for its intersection
    (orthant-with-ball and subspace-with-ball, both centered at the origin).
    """
    if raw.mu.shape != (feasible.num_locations,) or raw.alpha.shape != feasible.mask.shape:
        raise ValueError("parameter shapes do not match the feasible set")
    mu = np.maximum(raw.mu, 0.0) if feasible.nonneg_mu else raw.mu
    mu = _scale_into_ball(mu, feasible.mu_radius)
    alpha = _scale_into_ball(np.where(feasible.mask, raw.alpha, 0.0), feasible.alpha_radius)
    gamma = _scale_into_ball(raw.gamma, feasible.gamma_radius)
    beta = max(raw.beta, 0.0) if feasible.nonneg_beta else raw.beta
    return ModelParams(mu=mu, alpha=alpha, beta=beta, gamma=gamma, mask=feasible.mask)


def soft_threshold(x: np.ndarray, amount: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - amount, 0.0)


def projected_gradient_descent(
    x0: np.ndarray,
    grad_fn,
    project_fn,
    steps: int,
    kappa: float,
    objective_fn=None,
    prox_fn=None,
    backtracking: bool = False,
    max_halvings: int = 40,
    callback=None,
):
    """Generic projected (proximal) gradient loop with 1/(kappa (k+1)) steps.

    Returns the final point and the objective trace (one entry per accepted
    iterate, starting from the projected initial point).  With
    ``backtracking`` the trial step starts at the nominal rule, capped at
    twice the previously accepted step so the halving search stays short,
    and is halved until the objective stops increasing; the trace is then
    nonincreasing.  Without backtracking the rule is applied exactly.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    x = project_fn(np.asarray(x0, dtype=float))
    trace = []
    if objective_fn is not None:
        trace.append(float(objective_fn(x)))
    if callback is not None:
        callback(0, x)
    t_accepted = None
    for k in range(1, steps + 1):
        g = grad_fn(x)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(k)
        t_k = 1.0 / (kappa * (k + 1))
        if backtracking and t_accepted is not None:
            t_k = min(t_k, 2.0 * t_accepted)

        def step_to(t):
            y = x - t * g
            if prox_fn is not None:
                y = prox_fn(y, t)
            return project_fn(y)

        x_new = step_to(t_k)
        if objective_fn is not None:
            f_new = float(objective_fn(x_new))
            if backtracking:
                f_prev = trace[-1]
                halvings = 0
                while f_new > f_prev and halvings < max_halvings:
                    t_k *= 0.5
                    x_new = step_to(t_k)
                    f_new = float(objective_fn(x_new))
                    halvings += 1
            trace.append(f_new)
        t_accepted = t_k
        x = x_new
        if callback is not None:
            callback(k, x)
    return x, np.asarray(trace)


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the fitting routines.

    ``kappa`` is the step-size scale from the 1/(kappa (k+1)) rule; the true
    strong-monotonicity constant of the likelihood is unknown, so the default
    of 1.0 relies on ``backtracking`` to tame the early steps.
    """

    beta_low: float = 0.01
    beta_high: float = 2.0
    grid_points: int = 8          # J: the grid has J + 1 points
    pgd_steps: int = 500          # k_max per convex solve
    kappa: float = 1.0
    l1_weight: float = 1.0
    backtracking: bool = True
    eps_beta: float = 0.01        # alternating-loop stopping tolerance
    max_outer: int = 10
    beta_init: float = 1.0

    def __post_init__(self):
        if self.beta_low > self.beta_high:
            # equal endpoints are allowed: the grid degenerates to one point
            raise ValueError("beta_low must be <= beta_high")
        if self.beta_low <= 0:
            raise ValueError("beta_low must be positive")
        if self.grid_points < 1 or self.max_outer < 1:
            raise ValueError("grid_points and max_outer must be >= 1")
        if self.pgd_steps < 0:
            raise ValueError("pgd_steps must be >= 0")
        if self.eps_beta <= 0 or self.kappa <= 0:
            raise ValueError("eps_beta and kappa must be positive")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be nonnegative")


@dataclass
class PgdResult:
    params: ModelParams
    trace: np.ndarray  # penalized objective per accepted iterate


@dataclass
class FitResult:
    params: ModelParams
    objective: float               # penalized objective, recomputed from scratch
    trace: np.ndarray              # selected run's per-iteration objective
    grid_betas: np.ndarray | None = None
    grid_objectives: np.ndarray | None = None
    selected_index: int | None = None
    outer_iterations: int | None = None
    outer_trace: np.ndarray | None = None
    total_steps: int = 0
    wall_time: float = 0.0         # diagnostic only, never serialized


class _FixedBetaProblem:
    """Penalized objective and smooth gradient at a fixed beta, with the
    history excitation precomputed once.  Operates on a flat parameter
    vector [mu, alpha.ravel(), gamma].

    The event intensities for the most recent argument are cached by object
    identity: the descent loop evaluates the objective and the gradient at
    the same accepted iterate, so each is computed once.
    """

    def __init__(self, seq: EventSequence, mark_model, beta: float, l1_weight: float):
        self.seq = seq
        self.beta = float(beta)
        self.l1_weight = float(l1_weight)
        self.K = seq.num_locations
        self.p = seq.mark_dim
        self.n = len(seq)
        self.R = model.excitation_matrix(seq.times, seq.locations, self.K, beta)
        self.marks = np.ascontiguousarray(seq.marks)
        self._flat_idx = np.arange(self.n) * self.K + seq.locations
        self.onehot = np.zeros((self.n, self.K))
        if self.n:
            self.onehot[np.arange(self.n), seq.locations] = 1.0
        self.w = 1.0 - np.exp(-beta * (seq.horizon - seq.times)) if self.n else np.zeros(0)
        self.sum_w_by_loc = self.onehot.T @ self.w if self.n else np.zeros(self.K)
        self.uses_gamma = mark_model.uses_gamma
        if not self.uses_gamma:
            scores = model.event_mark_scores(
                ModelParams(
                    mu=np.zeros(self.K),
                    alpha=np.zeros((self.K, self.K)),
                    beta=beta,
                    gamma=np.zeros(self.p),
                    mask=np.ones((self.K, self.K), dtype=bool),
                ),
                seq,
                mark_model,
            )
            self.const_mark_term = float(np.log(np.maximum(scores, RATE_FLOOR)).sum())
        self._cache_key: np.ndarray | None = None
        self._cache_lam: np.ndarray | None = None

    def split(self, x: np.ndarray):
        K, p = self.K, self.p
        return x[:K], x[K : K + K * K].reshape(K, K), x[K + K * K :]

    def flatten(self, mu, alpha, gamma) -> np.ndarray:
        return np.concatenate([mu, alpha.ravel(), gamma])

    def _event_intensities(self, x, mu, alpha):
        if self._cache_key is x:
            return self._cache_lam
        if not self.n:
            lam = np.zeros(0)
        else:
            lam = mu.take(self.seq.locations)
            lam += self.beta * (self.R @ alpha).take(self._flat_idx)
        self._cache_key = x
        self._cache_lam = lam
        return lam

    def objective(self, x: np.ndarray) -> float:
        mu, alpha, gamma = self.split(x)
        lam = self._event_intensities(x, mu, alpha)
        event_term = float(np.log(np.maximum(lam, RATE_FLOOR)).sum())
        if self.uses_gamma:
            scores = self.marks @ gamma if self.n else np.zeros(0)
            mark_term = float(np.log(np.maximum(scores, RATE_FLOOR)).sum())
        else:
            mark_term = self.const_mark_term
        comp = self.seq.horizon * mu.sum() + float(alpha.sum(axis=1) @ self.sum_w_by_loc)
        return -(event_term + mark_term - comp) + self.l1_weight * float(np.abs(gamma).sum())

    def smooth_gradient(self, x: np.ndarray) -> np.ndarray:
        mu, alpha, gamma = self.split(x)
        lam = self._event_intensities(x, mu, alpha)
        inv_lam = np.where(lam > RATE_FLOOR, 1.0 / np.maximum(lam, RATE_FLOOR), 0.0)
        g_mu = self.seq.horizon - self.onehot.T @ inv_lam
        event_part = (self.R * (self.beta * inv_lam)[:, None]).T @ self.onehot
        g_alpha = -event_part + self.sum_w_by_loc[:, None]
        if self.uses_gamma and self.n:
            scores = self.marks @ gamma
            inv_s = np.where(scores > RATE_FLOOR, 1.0 / np.maximum(scores, RATE_FLOOR), 0.0)
            g_gamma = -(self.marks.T @ inv_s)
        else:
            g_gamma = np.zeros(self.p)
        return self.flatten(g_mu, g_alpha, g_gamma)


def default_feasible_set(seq: EventSequence, mask: np.ndarray | None = None) -> FeasibleSet:
    K = seq.num_locations
    if mask is None:
        mask = np.ones((K, K), dtype=bool)
    return FeasibleSet(mask=mask)


def default_init(seq: EventSequence, feasible: FeasibleSet, beta: float) -> ModelParams:
    """Starting point: event-rate baseline, no interaction, flat mark weights."""
    K, p = seq.num_locations, seq.mark_dim
    mu = np.full(K, len(seq) / (K * seq.horizon))
    gamma = np.full(p, 1.0 / math.sqrt(p)) if p else np.zeros(0)
    raw = ModelParams(mu=mu, alpha=np.zeros((K, K)), beta=beta, gamma=gamma, mask=feasible.mask)
    return project(raw, feasible)


def pgd_fit(
    seq: EventSequence,
    mark_model,
    beta: float,
    config: FitConfig,
    feasible: FeasibleSet | None = None,
    init: ModelParams | None = None,
) -> PgdResult:
    """Projected gradient descent for the convex subproblem at fixed beta."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if feasible is None:
        feasible = default_feasible_set(seq)
    if init is None:
        init = default_init(seq, feasible, beta)
    problem = _FixedBetaProblem(seq, mark_model, beta, config.l1_weight)
    K = problem.K
    masked_out = ~feasible.mask.ravel()

    def project_flat(x):
        # same block projections as project(), on the flat layout
        out = x.copy()
        mu = out[:K]
        if feasible.nonneg_mu:
            np.maximum(mu, 0.0, out=mu)
        nrm = float(np.linalg.norm(mu))
        if nrm > feasible.mu_radius:
            mu *= feasible.mu_radius / nrm
        a = out[K : K + K * K]
        a[masked_out] = 0.0
        nrm = float(np.linalg.norm(a))
        if nrm > feasible.alpha_radius:
            a *= feasible.alpha_radius / nrm
        g = out[K + K * K :]
        nrm = float(np.linalg.norm(g))
        if nrm > feasible.gamma_radius:
            g *= feasible.gamma_radius / nrm
        return out

    def prox_flat(x, t):
        # l1 part of the objective enters through soft-thresholding on gamma
        if config.l1_weight == 0:
            return x
        out = x.copy()
        out[K + K * K :] = soft_threshold(x[K + K * K :], t * config.l1_weight)
        return out

    x0 = problem.flatten(init.mu, init.alpha, init.gamma)
    x, trace = projected_gradient_descent(
        x0,
        grad_fn=problem.smooth_gradient,
        project_fn=project_flat,
        steps=config.pgd_steps,
        kappa=config.kappa,
        objective_fn=problem.objective,
        prox_fn=prox_flat,
        backtracking=config.backtracking,
    )
    mu, alpha, gamma = problem.split(x)
    params = ModelParams(mu=mu, alpha=alpha, beta=beta, gamma=gamma, mask=feasible.mask)
    return PgdResult(params=params, trace=trace)


def grid_fit(
    seq: EventSequence,
    mark_model,
    config: FitConfig,
    feasible: FeasibleSet | None = None,
    init: ModelParams | None = None,
) -> FitResult:
    """Run the convex solve on a beta grid and keep the best objective.

    Grid points are ``beta_j = beta_low + (j / J) (beta_high - beta_low)``
    for j = 0..J; ties go to the smallest j.  Individual grid points may
    fail (non-finite gradients); the fit fails only if all of them do.
    """
    start = time.perf_counter()
    if feasible is None:
        feasible = default_feasible_set(seq)
    J = config.grid_points
    betas = np.array(
        [config.beta_low + (j / J) * (config.beta_high - config.beta_low) for j in range(J + 1)]
    )
    results: list[PgdResult | None] = []
    objectives = np.full(J + 1, np.inf)
    errors: list[str] = []
    for j, beta in enumerate(betas):
        try:
            res = pgd_fit(seq, mark_model, float(beta), config, feasible, init)
        except NonFiniteGradientError as exc:
            results.append(None)
            errors.append(f"beta={beta:.6g}: {exc}")
            continue
        results.append(res)
        objectives[j] = model.penalized_objective(res.params, seq, mark_model, config.l1_weight)
    if all(r is None for r in results):
        raise RuntimeError("all grid points failed: " + "; ".join(errors))
    j_star = int(np.argmin(objectives))
    best = results[j_star]
    return FitResult(
        params=best.params,
        objective=float(objectives[j_star]),
        trace=best.trace,
        grid_betas=betas,
        grid_objectives=objectives,
        selected_index=j_star,
        total_steps=(J + 1) * config.pgd_steps,
        wall_time=time.perf_counter() - start,
    )


def _golden_section(f, a: float, b: float, tol: float = 1e-8, max_iter: int = 200):
    """Golden-section minimization on [a, b]; returns (x_best, f_best)."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def alternating_fit(
    seq: EventSequence,
    mark_model,
    config: FitConfig,
    feasible: FeasibleSet | None = None,
    init: ModelParams | None = None,
) -> FitResult:
    """Alternate the convex solve at fixed beta with a line search for beta.

    The beta step scans 25 evenly spaced points on ``[beta_low, 2**k]``
    (k = outer iteration), then refines by golden section inside the
    bracketing neighbors of the scan minimum; a scan minimum on the boundary
    means no bracket, in which case the scan point is used and a warning is
    emitted.  Stops when consecutive beta estimates differ by at most
    ``eps_beta``.  The convex solve warm-starts from the previous iterate
    with backtracking forced on, so the objective never increases across
    outer iterations.
    """
    start = time.perf_counter()
    if feasible is None:
        feasible = default_feasible_set(seq)
    inner = dataclasses.replace(config, backtracking=True)
    beta = float(config.beta_init)
    params = init if init is not None else default_init(seq, feasible, beta)
    outer_trace = []
    trace = np.zeros(0)
    outer_done = 0
    for outer in range(1, config.max_outer + 1):
        res = pgd_fit(seq, mark_model, beta, inner, feasible, init=params)
        params = res.params
        trace = res.trace

        def f_beta(b: float) -> float:
            trial = ModelParams(
                mu=params.mu, alpha=params.alpha, beta=float(b), gamma=params.gamma, mask=params.mask
            )
            return model.penalized_objective(trial, seq, mark_model, config.l1_weight)

        hi = max(2.0**outer, config.beta_low * 2.0)
        scan = np.linspace(config.beta_low, hi, LINE_SCAN_POINTS)
        scan_vals = np.array([f_beta(b) for b in scan])
        best = int(np.argmin(scan_vals))
        if 0 < best < LINE_SCAN_POINTS - 1:
            beta_cand, f_cand = _golden_section(f_beta, scan[best - 1], scan[best + 1])
            if scan_vals[best] < f_cand:
                beta_cand, f_cand = float(scan[best]), float(scan_vals[best])
        else:
            warnings.warn(
                f"beta line search: scan minimum on the boundary of [{config.beta_low}, {hi}]; "
                "using the grid scan value"
            )
            beta_cand, f_cand = float(scan[best]), float(scan_vals[best])
        # never move beta uphill relative to the current iterate
        if f_cand <= f_beta(beta):
            beta_new = beta_cand
        else:
            beta_new = beta
        outer_trace.append(f_beta(beta_new))
        outer_done = outer
        delta_beta = abs(beta_new - beta)
        beta = beta_new
        if delta_beta <= config.eps_beta:
            break
    params = ModelParams(
        mu=params.mu, alpha=params.alpha, beta=beta, gamma=params.gamma, mask=params.mask
    )
    return FitResult(
        params=params,
        objective=model.penalized_objective(params, seq, mark_model, config.l1_weight),
        trace=trace,
        outer_iterations=outer_done,
        outer_trace=np.asarray(outer_trace),
        total_steps=outer_done * config.pgd_steps,
        wall_time=time.perf_counter() - start,
    )
