"""ML / REML fitting of the pattern-mixture linear model.

The fixed effects enter linearly, so the fit profiles them out: for a given
covariance the group effects come from a closed-form GLS solve and only the
ten log-Cholesky covariance parameters are iterated (Newton-Raphson with a
finite-difference Hessian of the analytic gradient and backtracking).
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import linalg

from .model import (
    EFFECT_NAMES,
    N_EFFECTS,
    N_THETA,
    GroupEffects,
    PairRecord,
    chol_factor,
    chol_log_from_cov,
    design_matrix,
)
from .patterns import (
    N_PATTERNS,
    GroupingScheme,
    PatternCounts,
    Sequence,
    observed_positions,
    tabulate,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
_TRIL = np.tril_indices(4)
_DIAG_IN_THETA = np.flatnonzero(_TRIL[0] == _TRIL[1])


class SingularSubcovariance(np.linalg.LinAlgError):
    pass


class RankDeficient(ValueError):
    def __init__(self, group, directions):
        self.group = group
        self.directions = tuple(directions)
        super().__init__(f"group {group}: non-estimable {', '.join(self.directions)}")


class EmptySequence(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------- proportions


@dataclass
class Proportions:
    pi_ps: dict[tuple[int, Sequence], float]
    pi_g: dict[str, float]
    n_s: dict[Sequence, int]

    def for_sequence(self, s: Sequence) -> dict[int, float]:
        s = Sequence(s)
        if self.n_s.get(s, 0) == 0:
            raise EmptySequence(f"no pairs observed in sequence {int(s)}")
        return {p: self.pi_ps[(p, s)] for p in range(N_PATTERNS)}


def estimate_proportions(counts: PatternCounts) -> Proportions:
    """Closed-form multinomial MLEs: n_ps / n_s within sequence, n_g / N overall."""
    if counts.total < 1:
        raise ValueError("cannot estimate proportions from zero pairs")
    pi_ps = {}
    for (p, s), n in counts.by_pattern_sequence.items():
        n_s = counts.by_sequence[s]
        if n_s:
            pi_ps[(p, s)] = n / n_s
    pi_g = {g: n / counts.total for g, n in counts.by_group.items()}
    return Proportions(pi_ps, pi_g, dict(counts.by_sequence))


def multinomial_loglik(counts: PatternCounts, props: Proportions) -> float:
    total = 0.0
    for key, n in counts.by_pattern_sequence.items():
        if n:
            total += n * math.log(props.pi_ps[key])
    return total


# ---------------------------------------------------------------- problem


@dataclass
class Cell:
    """All pairs sharing one observed-position set and one design block."""

    idx: np.ndarray  # observed positions
    X: np.ndarray  # r x q, restricted to active columns
    Y: np.ndarray  # n x r
    key: tuple = ()

    def __post_init__(self):
        self.ix = np.ix_(self.idx, self.idx)
        self.ysum = self.Y.sum(axis=0)

    @property
    def n(self) -> int:
        return self.Y.shape[0]


@dataclass
class ObjectiveValue:
    value: float
    grad: Optional[np.ndarray]
    beta: np.ndarray
    beta_cov: np.ndarray
    sigma: np.ndarray


class LinearProblem:
    """Stacked block-diagonal GLS problem y_i ~ N(X_i beta, E_i Sigma E_i')."""

    def __init__(self, cells: list[Cell], n_params: int | None = None):
        self.cells = [c for c in cells if c.n > 0]
        if not self.cells:
            raise ValueError("no observations")
        self.q = n_params if n_params is not None else self.cells[0].X.shape[1]
        self.n_obs = sum(c.n * len(c.idx) for c in self.cells)
        self.n_pairs = sum(c.n for c in self.cells)

    @classmethod
    def from_blocks(cls, blocks) -> "LinearProblem":
        """Test harness entry: iterable of (positions, X, Y) triples."""
        cells = [
            Cell(np.asarray(idx, int), np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(Y, float)))
            for idx, X, Y in blocks
        ]
        return cls(cells)

    # -- building blocks
    def _factor(self, sigma):
        """Inverse and log-determinant of each cell's sub-covariance (shared per position set)."""
        cache = {}
        out = []
        for c in self.cells:
            key = c.idx.tobytes()
            if key not in cache:
                S = sigma[c.ix]
                try:
                    Lc = np.linalg.cholesky(S)
                except np.linalg.LinAlgError:
                    raise SingularSubcovariance(
                        f"sub-covariance on positions {c.idx.tolist()} is singular"
                    ) from None
                d = np.diag(Lc)
                if d.min() <= 1e-12 * d.max():
                    raise SingularSubcovariance(f"sub-covariance on positions {c.idx.tolist()} is singular")
                Linv = linalg.solve_triangular(Lc, np.eye(len(d)), lower=True, check_finite=False)
                cache[key] = (Linv.T @ Linv, 2.0 * np.log(d).sum())
            out.append(cache[key])
        return out

    def _normal_equations(self, factors):
        XtWX = np.zeros((self.q, self.q))
        XtWy = np.zeros(self.q)
        for c, (A, _) in zip(self.cells, factors):
            AX = A @ c.X
            XtWX += c.n * (c.X.T @ AX)
            XtWy += AX.T @ c.ysum
        return XtWX, XtWy

    def gls(self, sigma, factors=None):
        """GLS coefficients and their covariance (X' Omega^-1 X)^-1."""
        factors = factors or self._factor(sigma)
        XtWX, XtWy = self._normal_equations(factors)
        try:
            cf = linalg.cho_factor(XtWX, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise RankDeficient("?", ["design is rank deficient"]) from None
        beta = linalg.cho_solve(cf, XtWy, check_finite=False)
        cov = linalg.cho_solve(cf, np.eye(self.q), check_finite=False)
        return beta, (cov + cov.T) / 2, 2.0 * np.log(np.diag(cf[0])).sum()

    def ml_loglik(self, beta, sigma) -> float:
        factors = self._factor(np.asarray(sigma, float))
        total = 0.0
        for c, (A, logdet) in zip(self.cells, factors):
            E = c.Y - c.X @ beta
            total -= 0.5 * (c.n * (len(c.idx) * LOG_2PI + logdet) + np.sum((E @ A) * E))
        return total

    def ml_beta_grad(self, beta, sigma) -> np.ndarray:
        factors = self._factor(np.asarray(sigma, float))
        g = np.zeros(self.q)
        for c, (A, _) in zip(self.cells, factors):
            E = c.Y - c.X @ beta
            g += (A @ c.X).T @ E.sum(axis=0)
        return g

    def evaluate(self, theta, method: str = "ml", beta=None, grad: bool = True) -> ObjectiveValue:
        """Objective in theta (profiled over beta unless ``beta`` is given) and its theta-gradient.

        ML: the Gaussian log-likelihood including 2*pi constants.
        REML: the restricted log-likelihood, constants -(n - q)/2 log(2 pi).
        """
        method = method.lower()
        L = chol_factor(theta)
        sigma = L @ L.T
        factors = self._factor(sigma)
        b_hat, M, logdet_xtwx = self.gls(sigma, factors)
        b = b_hat if beta is None else np.asarray(beta, float)
        value = 0.0
        G = np.zeros((4, 4))
        for c, (A, logdet) in zip(self.cells, factors):
            E = c.Y - c.X @ b
            EA = E @ A
            value -= 0.5 * (c.n * (len(c.idx) * LOG_2PI + logdet) + np.sum(EA * E))
            if grad:
                Gc = 0.5 * (EA.T @ EA) - 0.5 * c.n * A
                if method == "reml":
                    AX = A @ c.X
                    Gc += 0.5 * c.n * (AX @ M @ AX.T)
                G[c.ix] += Gc
        if method == "reml":
            if beta is not None:
                raise ValueError("REML objective is defined on the profiled fixed effects")
            value += -0.5 * logdet_xtwx + 0.5 * self.q * LOG_2PI
        elif method != "ml":
            raise ValueError(f"unknown method {method!r}")
        g = None
        if grad:
            dL = 2.0 * (G @ L)
            g = dL[_TRIL]
            g[_DIAG_IN_THETA] *= np.diag(L)
        return ObjectiveValue(value, g, b_hat, M, sigma)

    def reml_loglik(self, theta) -> float:
        return self.evaluate(theta, "reml", grad=False).value

    def moment_start(self) -> np.ndarray:
        """Diagonal available-case variances per position, as log-Cholesky parameters."""
        var = np.empty(4)
        for pos in range(4):
            vals = np.concatenate(
                [c.Y[:, list(c.idx).index(pos)] for c in self.cells if pos in c.idx] or [np.empty(0)]
            )
            var[pos] = vals.var(ddof=1) if vals.size > 1 else np.nan
        fallback = np.nanmean(var) if np.isfinite(var).any() else 1.0
        var = np.where(np.isfinite(var) & (var > 0), var, fallback if fallback > 0 else 1.0)
        return chol_log_from_cov(np.diag(var))


# ---------------------------------------------------------------- building from records


def _active_columns(X_rows: np.ndarray) -> list[int]:
    """Greedy left-to-right column selection keeping the rank; means are preferred."""
    keep: list[int] = []
    rank = 0
    for j in range(X_rows.shape[1]):
        r = np.linalg.matrix_rank(X_rows[:, keep + [j]]) if X_rows.size else 0
        if r > rank:
            keep.append(j)
            rank = r
    return keep


@dataclass
class ProblemLayout:
    problem: LinearProblem
    groups: tuple[str, ...]
    active: np.ndarray  # indices into the full 8*G vector
    non_estimable: list[tuple[str, str]]

    @property
    def full_dim(self) -> int:
        return N_EFFECTS * len(self.groups)

    def expand(self, beta, beta_cov):
        full = np.zeros(self.full_dim)
        full[self.active] = beta
        cov = np.zeros((self.full_dim, self.full_dim))
        cov[np.ix_(self.active, self.active)] = beta_cov
        return full, cov


def build_problem(
    records, scheme: GroupingScheme, groups: tuple[str, ...] | None = None, drop_aliased: bool = True
) -> ProblemLayout:
    """Group records into cells; with ``drop_aliased`` non-estimable columns are removed."""
    if groups is None:
        present = {scheme.group_of_pattern[r.pattern] for r in records}
        groups = tuple(g for g in scheme.labels if g in present)
    gindex = {g: i for i, g in enumerate(groups)}
    buckets: dict[tuple, list[PairRecord]] = {}
    for r in records:
        g = scheme.group_of_pattern[r.pattern]
        if g not in gindex:
            continue
        buckets.setdefault((gindex[g], r.pattern, int(r.sequence)), []).append(r)

    active: list[int] = []
    non_est: list[tuple[str, str]] = []
    for gi, g in enumerate(groups):
        rows = [
            design_matrix(Sequence(s))[observed_positions(p, Sequence(s))]
            for (gj, p, s) in sorted(buckets)
            if gj == gi
        ]
        X_rows = np.vstack(rows) if rows else np.zeros((0, N_EFFECTS))
        keep = _active_columns(X_rows) if drop_aliased else list(range(N_EFFECTS))
        active.extend(gi * N_EFFECTS + k for k in keep)
        non_est.extend((g, EFFECT_NAMES[k]) for k in range(N_EFFECTS) if k not in keep)
    active_arr = np.array(active, dtype=int)

    cells = []
    for key in sorted(buckets):
        gi, p, s = key
        seq = Sequence(s)
        idx = observed_positions(p, seq)
        Xfull = np.zeros((len(idx), N_EFFECTS * len(groups)))
        Xfull[:, gi * N_EFFECTS:(gi + 1) * N_EFFECTS] = design_matrix(seq)[idx]
        X = Xfull[:, active_arr]
        # stable in-cell order makes fits independent of input order
        recs = sorted(buckets[key], key=lambda r: (str(type(r.pair_id)), str(r.pair_id)))
        Y = np.array([[r.y[i] for i in idx] for r in recs], dtype=float)
        cells.append(Cell(idx, X, Y, key=(groups[gi], p, seq)))
    return ProblemLayout(LinearProblem(cells, len(active_arr)), tuple(groups), active_arr, non_est)


# ---------------------------------------------------------------- parameters / results


@dataclass
class ParameterVector:
    betas: dict[str, GroupEffects]
    theta: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        L = chol_factor(self.theta)
        return L @ L.T

    def flat_beta(self, groups) -> np.ndarray:
        return np.concatenate([self.betas[g].as_array() for g in groups])

    @property
    def dimension(self) -> int:
        return N_EFFECTS * len(self.betas) + N_THETA


@dataclass
class FitOptions:
    method: str = "reml"
    max_iter: int = 200
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    obj_tol: float = 1e-10
    init: str = "moment"
    theta0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in ("ml", "reml"):
            raise ValueError(f"method must be ml or reml, got {self.method!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if min(self.grad_tol, self.step_tol, self.obj_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.init not in ("moment", "user"):
            raise ValueError("init must be 'moment' or 'user'")
        if self.init == "user" and self.theta0 is None:
            raise ValueError("init='user' requires theta0")


@dataclass
class ModelFit:
    params: ParameterVector
    groups: tuple[str, ...]
    proportions: Proportions
    counts: PatternCounts
    loglik: float
    method: str
    beta_cov: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    scheme: GroupingScheme
    non_estimable: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    initial_objective: float = float("nan")
    n_obs: int = 0

    @property
    def sigma(self) -> np.ndarray:
        return self.params.sigma

    @property
    def betas(self) -> dict[str, GroupEffects]:
        return self.params.betas

    def group_se(self) -> dict[str, np.ndarray]:
        se = np.sqrt(np.clip(np.diag(self.beta_cov), 0, None))
        return {g: se[i * N_EFFECTS:(i + 1) * N_EFFECTS] for i, g in enumerate(self.groups)}

    @property
    def naive(self) -> bool:
        return len(self.groups) == 1 and self.scheme.name == "naive"


# ---------------------------------------------------------------- optimizer


def _scaled_grad(g, x, f) -> float:
    return float(np.max(np.abs(g) * np.maximum(np.abs(x), 1.0)) / max(abs(f), 1.0))


def _fd_hessian(grad_fn: Callable, x, g0, h_rel=1e-6) -> np.ndarray:
    """Forward differences of the analytic gradient; only steers the Newton step."""
    n = len(x)
    H = np.empty((n, n))
    for k in range(n):
        h = h_rel * max(1.0, abs(x[k]))
        e = np.zeros(n)
        e[k] = h
        H[:, k] = (grad_fn(x + e) - g0) / h
    return (H + H.T) / 2


def maximize(fun: Callable, x0, opts: FitOptions, max_step: float = 5.0):
    """Damped Newton-Raphson ascent.

    ``fun(x) -> (value, grad)``.  Stops once the scaled gradient is below
    ``grad_tol`` and the last accepted step changed the objective by less
    than ``obj_tol`` (relative) or moved less than ``step_tol``.
    Returns (x, value, grad, converged, iterations, trace).
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    trace = []

    def safe(z):
        try:
            return fun(z)
        except (SingularSubcovariance, FloatingPointError, OverflowError, np.linalg.LinAlgError):
            return -np.inf, None

    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        gn = _scaled_grad(g, x, f)
        try:
            H = _fd_hessian(lambda z: fun(z)[1], x, g)
            w, V = np.linalg.eigh(H)
            floor = max(1e-10, 1e-8 * np.max(np.abs(w)))
            w = -np.maximum(np.abs(w), floor)
            d = -(V @ ((V.T @ g) / w))
        except (SingularSubcovariance, np.linalg.LinAlgError):
            d = g / max(np.linalg.norm(g), 1.0)
        big = np.max(np.abs(d))
        if big > max_step:
            d *= max_step / big
        slope = float(g @ d)
        if slope <= 0:
            d, slope = g.copy(), float(g @ g)
        t = 1.0
        accepted = False
        for _ in range(60):
            fn, gnew = safe(x + t * d)
            if np.isfinite(fn) and fn >= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no ascent possible at machine precision
            converged = gn <= opts.grad_tol
            trace.append({"iteration": it, "objective": f, "grad_norm": gn, "step": 0.0})
            break
        step = t * d
        df = fn - f
        x, f, g = x + step, fn, gnew
        gn = _scaled_grad(g, x, f)
        trace.append({"iteration": it, "objective": f, "grad_norm": gn, "step": float(np.max(np.abs(step)))})
        log.debug("iter=%d objective=%.17g grad_norm=%.3e step=%.3e", it, f, gn, np.max(np.abs(step)))
        if gn <= opts.grad_tol and (
            abs(df) <= opts.obj_tol * max(1.0, abs(f)) or np.max(np.abs(step)) <= opts.step_tol
        ):
            converged = True
            break
    return x, f, g, converged, it, trace


# ---------------------------------------------------------------- public API


def ml_objective(params: ParameterVector, records, scheme: GroupingScheme | None = None) -> float:
    """Gaussian log-likelihood of the observed data (with 2*pi constants, no multinomial term)."""
    scheme = scheme or GroupingScheme.default()
    layout = build_problem(records, scheme, tuple(params.betas), drop_aliased=False)
    beta = params.flat_beta(layout.groups)[layout.active]
    return layout.problem.ml_loglik(beta, params.sigma)


def reml_objective(theta, records, scheme: GroupingScheme | None = None) -> float:
    scheme = scheme or GroupingScheme.default()
    layout = build_problem(records, scheme)
    return layout.problem.reml_loglik(np.asarray(theta, float))


def joint_loglik(params: ParameterVector, records, scheme=None, proportions: Proportions | None = None) -> float:
    """Normal part plus the multinomial pattern term."""
    scheme = scheme or GroupingScheme.default()
    counts = tabulate(records, scheme)
    props = proportions or estimate_proportions(counts)
    return ml_objective(params, records, scheme) + multinomial_loglik(counts, props)


def gls_beta(theta, records, scheme: GroupingScheme | None = None):
    """GLS group effects at a fixed covariance; returns (betas, beta_cov, non_estimable)."""
    scheme = scheme or GroupingScheme.default()
    layout = build_problem(records, scheme)
    beta, cov, _ = layout.problem.gls(chol_factor(theta) @ chol_factor(theta).T)
    full, full_cov = layout.expand(beta, cov)
    betas = {
        g: GroupEffects.from_array(full[i * N_EFFECTS:(i + 1) * N_EFFECTS])
        for i, g in enumerate(layout.groups)
    }
    return betas, full_cov, layout.non_estimable


def fit_problem(problem: LinearProblem, opts: FitOptions | None = None):
    """Fit any LinearProblem; returns (theta, beta, beta_cov, value, converged, iterations, grad, trace, f0)."""
    opts = opts or FitOptions()
    theta0 = problem.moment_start() if opts.init == "moment" else np.asarray(opts.theta0, float)

    def fun(th):
        ev = problem.evaluate(th, opts.method)
        return ev.value, ev.grad

    f0 = fun(theta0)[0]
    theta, value, grad, converged, iters, trace = maximize(fun, theta0, opts)
    final = problem.evaluate(theta, opts.method, grad=False)
    return theta, final.beta, final.beta_cov, value, converged, iters, grad, trace, f0


def fit(records, scheme: GroupingScheme | None = None, opts: FitOptions | None = None) -> ModelFit:
    scheme = scheme or GroupingScheme.default()
    opts = opts or FitOptions()
    records = list(records)
    if not records:
        raise ValueError("no records to fit")
    counts = tabulate(records, scheme)
    props = estimate_proportions(counts)
    notes: list[str] = []
    for g, n in counts.by_group.items():
        if n == 0:
            notes.append(f"group {g} has no pairs and is omitted from the fit")
        elif n < scheme.min_pairs_per_group:
            notes.append(
                f"group {g} has only {n} pairs (< {scheme.min_pairs_per_group}); "
                "its effects may not be identifiable, consider pooling groups"
            )
    layout = build_problem(records, scheme)
    if layout.non_estimable:
        by_g: dict[str, list[str]] = {}
        for g, name in layout.non_estimable:
            by_g.setdefault(g, []).append(name)
        for g, names in by_g.items():
            notes.append(
                f"group {g}: rank-deficient design, {', '.join(names)} fixed at zero (non-estimable); "
                "consider merging this group with another"
            )
    theta, beta, cov, value, converged, iters, grad, trace, f0 = fit_problem(layout.problem, opts)
    if not converged:
        notes.append(f"optimizer did not converge in {iters} iterations")
    full, full_cov = layout.expand(beta, cov)
    betas = {
        g: GroupEffects.from_array(full[i * N_EFFECTS:(i + 1) * N_EFFECTS])
        for i, g in enumerate(layout.groups)
    }
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    return ModelFit(
        params=ParameterVector(betas, theta),
        groups=layout.groups,
        proportions=props,
        counts=counts,
        loglik=value,
        method=opts.method,
        beta_cov=full_cov,
        converged=converged,
        iterations=iters,
        grad_norm=_scaled_grad(grad, theta, value),
        scheme=scheme,
        non_estimable=layout.non_estimable,
        warnings=notes,
        trace=trace,
        initial_objective=f0,
        n_obs=layout.problem.n_obs,
    )


def central_gradient(f: Callable, x, h_rel=1e-6) -> np.ndarray:
    x = np.asarray(x, float)
    out = np.empty_like(x)
    for k in range(len(x)):
        h = h_rel * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def score_check(problem: LinearProblem, theta, method: str = "ml", beta=None, h_rel=1e-6) -> dict:
    """Compare analytic gradients with central finite differences.

    For ML with ``beta`` given, the gradient is over (beta, theta); otherwise
    over theta with beta profiled out.  Ill-conditioned covariances are
    flagged rather than raised.
    """
    theta = np.asarray(theta, float)
    L = chol_factor(theta)
    sigma = L @ L.T
    cond = float(np.linalg.cond(sigma))
    report = {"method": method, "condition_number": cond, "ill_conditioned": cond > 1e10}
    try:
        if beta is not None:
            beta = np.asarray(beta, float)
            q = len(beta)
            x = np.concatenate([beta, theta])
            f = lambda z: problem.ml_loglik(z[:q], chol_factor(z[q:]) @ chol_factor(z[q:]).T)
            analytic = np.concatenate(
                [problem.ml_beta_grad(beta, sigma), problem.evaluate(theta, "ml", beta=beta).grad]
            )
        else:
            x = theta
            f = lambda z: problem.evaluate(z, method, grad=False).value
            analytic = problem.evaluate(theta, method).grad
        numeric = central_gradient(f, x, h_rel)
    except (SingularSubcovariance, np.linalg.LinAlgError) as exc:
        report.update(ill_conditioned=True, error=str(exc), max_rel_error=float("nan"))
        return report
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    report.update(
        analytic=analytic,
        numeric=numeric,
        max_rel_error=float(np.max(np.abs(analytic - numeric)) / scale),
        grad_norm=float(np.max(np.abs(analytic))),
    )
    return report
