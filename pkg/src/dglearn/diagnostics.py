"""Empirical checks of the convergence analysis.

Two kinds of instruments live here:

* proxies computed on real training runs (input-distribution drift between
  evaluation windows, gradient-norm traces, the weighted-average rate shape);
* a synthetic quadratic probe where the smoothness constant, the gradient
  second-moment bound and the distribution drift are all known in closed form,
  so the per-step descent inequality and its telescoped sum can be checked by
  Monte-Carlo.

The drift estimator is this package's own construction: the true limiting
input density is unobservable, so consecutive windows are compared and the
total variation distance is approximated with histograms of random 1-D
projections. It reports values in [0, 1] (half the L1 distance).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .tensor import LrSchedule

log = logging.getLogger(__name__)

MIN_DRIFT_BATCH = 16


def estimate_drift(a: np.ndarray, b: np.ndarray, n_projections: int = 16, bins: int = 32,
                   seed: int = 0) -> float:
    """Histogram/projection estimate of the total variation between two batches.

    Each batch is flattened per sample. For ``n_projections`` seeded random
    unit directions the projected values of both batches are binned on a
    shared equal-width grid and ``0.5 * sum |p - q|`` is taken; the maximum
    over directions is returned.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.shape != b.shape:
        raise ValueError(f"feature batches differ in shape: {a.shape} vs {b.shape}")
    if len(a) < MIN_DRIFT_BATCH:
        log.warning("drift estimate on %d samples (< %d) has a wide confidence band",
                    len(a), MIN_DRIFT_BATCH)
    if np.array_equal(a, b):
        return 0.0
    dirs = np.random.default_rng(seed).normal(size=(a.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa, pb = a @ dirs, b @ dirs
    worst = 0.0
    for r in range(n_projections):
        lo = min(pa[:, r].min(), pb[:, r].min())
        hi = max(pa[:, r].max(), pb[:, r].max())
        if hi <= lo:
            continue
        ha, _ = np.histogram(pa[:, r], bins=bins, range=(lo, hi))
        hb, _ = np.histogram(pb[:, r], bins=bins, range=(lo, hi))
        tv = 0.5 * np.abs(ha / len(a) - hb / len(b)).sum()
        worst = max(worst, float(tv))
    return worst


@dataclass
class DriftMonitor:
    """Tracks drift of each module's input on a fixed probe batch."""

    n_modules: int
    seed: int = 0
    previous: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.previous = [None] * self.n_modules
        self.trace = [[] for _ in range(self.n_modules)]

    def observe(self, j: int, features: np.ndarray) -> float:
        prev = self.previous[j]
        c = float("nan") if prev is None else estimate_drift(prev, features, seed=self.seed)
        self.previous[j] = np.array(features, copy=True)
        self.trace[j].append(c)
        return c


# ---------------------------------------------------------------------------
# Step-size schedules


@dataclass(frozen=True)
class ConstantRate:
    rate: float

    def __call__(self, t: int) -> float:
        return self.rate

    robbins_monro = False


@dataclass(frozen=True)
class InverseTime:
    """``scale / (t + offset)``, the harmonic family."""

    scale: float = 1.0
    offset: float = 1.0

    def __call__(self, t: int) -> float:
        return self.scale / (t + self.offset)

    robbins_monro = True


@dataclass(frozen=True)
class InverseSqrtTime:
    scale: float = 1.0
    offset: float = 1.0

    def __call__(self, t: int) -> float:
        return self.scale / math.sqrt(t + self.offset)

    # sum of squares is harmonic, so diverges
    robbins_monro = False


@dataclass(frozen=True)
class StepDecay:
    """Per-epoch step decay on a finite horizon (the training schedule)."""

    schedule: LrSchedule
    steps_per_epoch: int = 1

    def __call__(self, t: int) -> float:
        return self.schedule.rate(t // self.steps_per_epoch)

    robbins_monro = None


@dataclass
class ScheduleCheck:
    sum_eta: float
    sum_eta_sq: float
    robbins_monro: bool | None
    note: str


def check_schedule(eta: Callable[[int], float], horizon: int) -> ScheduleCheck:
    """Partial sums of ``eta`` and ``eta**2`` up to ``horizon``.

    Recognized families get their analytic Robbins-Monro classification;
    step-decay and unknown callables are reported as finite-horizon
    (``robbins_monro=None``), for information only.
    """
    values = np.array([eta(t) for t in range(horizon)], dtype=np.float64)
    s1, s2 = float(values.sum()), float((values ** 2).sum())
    rm = getattr(eta, "robbins_monro", None)
    if isinstance(eta, StepDecay):
        note = "finite horizon step decay: neither condition binds"
    elif rm is None:
        note = "unrecognized schedule: partial sums only"
    elif rm:
        note = "sum diverges, sum of squares converges"
    else:
        note = "sum of squares diverges"
    return ScheduleCheck(s1, s2, rm, note)


# ---------------------------------------------------------------------------
# Rate summary on recorded traces


@dataclass
class RateSummary:
    running_min: np.ndarray
    bound_shape: np.ndarray
    ratio: float


def rate_summary(grad_norm_sq, eta, drift, smoothness: float = 1.0, g_bound: float = 1.0,
                 initial_loss: float = 0.0, window: int = 1) -> RateSummary:
    """Running minimum of (smoothed) squared gradient norms vs. the bound shape.

    ``drift`` holds total-variation estimates in [0, 1]; the L1 distance used by
    the bound is twice that. ``bound_shape[t]`` is the telescoped right-hand
    side divided by the cumulated step sizes.
    """
    g = np.asarray(grad_norm_sq, dtype=np.float64)
    e = np.asarray(eta, dtype=np.float64)
    c = np.nan_to_num(np.asarray(drift, dtype=np.float64), nan=0.0)
    if not (len(g) == len(e) == len(c)):
        raise ValueError(f"trace lengths differ: grad {len(g)}, eta {len(e)}, drift {len(c)}")
    if len(g) == 0:
        return RateSummary(np.array([]), np.array([]), float("nan"))
    if window > 1:
        kernel = np.ones(window) / window
        g = np.convolve(g, kernel, mode="valid")
        e, c = e[window - 1:], c[window - 1:]
    running_min = np.minimum.accumulate(g)
    l1 = 2.0 * c
    rhs = initial_loss + g_bound * np.cumsum(e * (np.sqrt(2 * l1) + smoothness * e / 2))
    bound = rhs / np.cumsum(e)
    ratio = float(running_min[-1] / bound[-1]) if bound[-1] > 0 else float("inf")
    return RateSummary(running_min, bound, ratio)


# ---------------------------------------------------------------------------
# Quadratic theory probe


@dataclass
class TheoryProbe:
    """Quadratic loss ``0.5 * ||theta - z||^2`` with a drifting two-Gaussian source.

    ``z`` is drawn from ``w_t N(mu_a, s^2 I) + (1 - w_t) N(mu_b, s^2 I)`` and the
    limit distribution is ``N(mu_a, s^2 I)``. The mixture weight is set so the
    L1 distance to the limit equals ``drift(t)`` exactly. The expected risk has
    gradient ``theta - mu_a``, so the smoothness constant is 1; the second
    moment bound ``G`` is computed exactly from the first two moments of the
    SGD iterate.
    """

    dim: int = 2
    sigma: float = 1.0
    separation: float = 10.0
    theta0: float = 3.0
    eta: Callable[[int], float] = field(default_factory=lambda: InverseTime(0.5, 2.0))
    drift: Callable[[int], float] = field(default_factory=lambda: (lambda t: 0.5 * 2.0 ** -t))
    smoothness: float = 1.0

    def __post_init__(self):
        self.mu_a = np.zeros(self.dim)
        self.mu_b = np.zeros(self.dim)
        self.mu_b[0] = self.separation
        # L1 distance between the two mixture components
        self.component_l1 = 2 * (2 * norm.cdf(self.separation / (2 * self.sigma)) - 1)

    def off_weight(self, t: int) -> float:
        c = self.drift(t)
        if c < 0 or c > self.component_l1 + 1e-12:
            raise ValueError(f"drift {c} at t={t} not realizable (max {self.component_l1})")
        return c / self.component_l1

    def risk(self, theta: np.ndarray) -> np.ndarray:
        d = theta - self.mu_a
        return 0.5 * (d ** 2).sum(axis=-1) + 0.5 * self.dim * self.sigma ** 2

    def risk_grad(self, theta: np.ndarray) -> np.ndarray:
        return theta - self.mu_a

    def source_moments(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        q = self.off_weight(t)
        mean = (1 - q) * self.mu_a + q * self.mu_b
        diff = self.mu_b - self.mu_a
        cov = self.sigma ** 2 * np.eye(self.dim) + q * (1 - q) * np.outer(diff, diff)
        return mean, cov

    def exact_g(self, steps: int) -> float:
        """max over t of E||grad l||^2 under both the current and the limit source."""
        m = np.full(self.dim, self.theta0, dtype=np.float64)
        v = np.zeros((self.dim, self.dim))
        worst = 0.0
        limit_cov = self.sigma ** 2 * np.eye(self.dim)
        for t in range(steps + 1):
            mean, cov = self.source_moments(t)
            cur = np.sum((m - mean) ** 2) + np.trace(v) + np.trace(cov)
            lim = np.sum((m - self.mu_a) ** 2) + np.trace(v) + np.trace(limit_cov)
            worst = max(worst, cur, lim)
            eta = self.eta(t)
            m = (1 - eta) * m + eta * mean
            v = (1 - eta) ** 2 * v + eta ** 2 * cov
        return float(worst)

    def simulate(self, steps: int, n_traj: int, seed: int = 0) -> np.ndarray:
        """Iterates ``theta_t`` for ``t = 0..steps``, shape (steps+1, n_traj, dim)."""
        rng = np.random.default_rng(seed)
        theta = np.full((n_traj, self.dim), self.theta0, dtype=np.float64)
        out = np.empty((steps + 1, n_traj, self.dim))
        out[0] = theta
        for t in range(steps):
            q = self.off_weight(t)
            from_b = rng.random(n_traj) < q
            centers = np.where(from_b[:, None], self.mu_b, self.mu_a)
            z = centers + self.sigma * rng.normal(size=(n_traj, self.dim))
            theta = theta - self.eta(t) * (theta - z)
            out[t + 1] = theta
        return out


@dataclass
class DescentCheck:
    passed: bool
    margins: np.ndarray
    std_errors: np.ndarray
    g_bound: float
    accumulation_lhs: float
    accumulation_rhs: float
    accumulation_passed: bool


def check_descent_inequality(probe: TheoryProbe, steps: int, n_traj: int = 20_000,
                             seed: int = 0, z: float = 3.0) -> DescentCheck:
    """Monte-Carlo check of the one-step descent inequality and its telescoped sum.

    At every ``t < steps`` it tests
    ``E L(t+1) <= E L(t) - eta_t (E||grad L(t)||^2 - G sqrt(2 c_t)) + L G eta_t^2 / 2``
    allowing ``z`` standard errors of the paired per-trajectory difference.
    ``margins[t]`` is right-hand side minus left-hand side (positive = holds).
    """
    g = probe.exact_g(steps)
    lip = probe.smoothness
    thetas = probe.simulate(steps, n_traj, seed)
    risks = probe.risk(thetas)
    grad_sq = (probe.risk_grad(thetas) ** 2).sum(axis=-1)
    margins = np.empty(steps)
    ses = np.empty(steps)
    ok = True
    for t in range(steps):
        eta = probe.eta(t)
        c = probe.drift(t)
        # per-trajectory: L(t+1) - L(t) + eta ||grad L(t)||^2 <= eta G sqrt(2c) + L G eta^2 / 2
        d = risks[t + 1] - risks[t] + eta * grad_sq[t]
        bound = eta * g * math.sqrt(2 * c) + lip * g * eta ** 2 / 2
        se = d.std(ddof=1) / math.sqrt(n_traj)
        margins[t] = bound - d.mean()
        ses[t] = se
        if margins[t] < -z * se:
            ok = False
    etas = np.array([probe.eta(t) for t in range(steps + 1)])
    cs = np.array([probe.drift(t) for t in range(steps + 1)])
    lhs_terms = etas * grad_sq.mean(axis=1)
    prop_lhs = float(lhs_terms.sum())
    prop_rhs = float(risks[0].mean() + g * np.sum(etas * (np.sqrt(2 * cs) + lip * etas / 2)))
    per_traj = (etas[:, None] * grad_sq).sum(axis=0)
    prop_se = per_traj.std(ddof=1) / math.sqrt(n_traj)
    prop_ok = prop_lhs <= prop_rhs + z * prop_se
    return DescentCheck(ok, margins, ses, g, prop_lhs, prop_rhs, bool(prop_ok))
