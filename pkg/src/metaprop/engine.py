"""Three-level random-effects estimation core.

The marginal covariance of the transformed effect sizes is block
diagonal over studies: within study j the covariance of any two trials
is the between-study variance, and each trial adds its own within-study
variance plus known sampling variance on the diagonal,

    V_j = sigma2_xi * ones + diag(sigma2_zeta + v_ij).

Every block is diagonal plus rank one, so inverses and determinants use
Sherman-Morrison per study instead of dense m x m algebra.  Variance
components are maximized on the log scale with a bounded quasi-Newton
optimizer and a small deterministic multistart; fixed effects follow by
generalized least squares at the optimum.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import norm

from .ingest import ValidationError
from .transforms import HALF_PI, ft_inverse, ft_theta, ft_variance

__all__ = [
    "VAR_FLOOR",
    "VarianceComponents",
    "FitResult",
    "StudyEffect",
    "PooledEstimate",
    "marginal_covariance",
    "log_likelihood",
    "gls_fixed_effects",
    "fit_model",
    "pooled_estimate",
    "predict_study_effects",
    "study_weights",
    "effect_arrays",
]

VAR_FLOOR = 1e-12
_LOG_FLOOR = math.log(VAR_FLOOR)
_LOG_CEIL = math.log(1e6)


@dataclass(frozen=True)
class VarianceComponents:
    """Between-study and within-study variance of true effect sizes."""

    sigma2_xi: float
    sigma2_zeta: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma2_xi) and math.isfinite(self.sigma2_zeta)):
            raise ValueError("variance components must be finite")
        if self.sigma2_xi < 0 or self.sigma2_zeta < 0:
            raise ValueError("variance components must be nonnegative")


@dataclass
class FitResult:
    """Fitted fixed effects, variance components, and bookkeeping."""

    beta: np.ndarray
    labels: list
    cov_beta: np.ndarray
    varcomps: VarianceComponents
    loglik: float
    method: str
    converged: bool
    n_evaluations: int
    m: int
    h: int
    f: int
    y: np.ndarray = field(repr=False, default=None)
    X: np.ndarray = field(repr=False, default=None)
    group_sizes: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)


def _as_matrix(X) -> np.ndarray:
    mat = getattr(X, "matrix", X)
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("design must be a 2-d matrix")
    return mat


def _labels_of(X, f) -> list:
    labels = getattr(X, "labels", None)
    return list(labels) if labels is not None else [f"b{i}" for i in range(f)]


def _check_inputs(y, X, group_sizes, v):
    y = np.asarray(y, dtype=np.float64)
    mat = _as_matrix(X)
    group_sizes = np.asarray(group_sizes, dtype=np.int64)
    v = np.asarray(v, dtype=np.float64)
    m = y.size
    if mat.shape[0] != m or v.size != m:
        raise ValueError("y, X, and v must agree on the number of trials")
    if int(group_sizes.sum()) != m:
        raise ValueError("group sizes must sum to the number of trials")
    if np.any(v <= 0):
        raise ValueError("sampling variances must be positive")
    return y, mat, group_sizes, v


def marginal_covariance(group_sizes, varcomps: VarianceComponents, v) -> np.ndarray:
    """Dense block-diagonal marginal covariance (for inspection and tests)."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("sampling variances must be positive")
    sizes = np.asarray(group_sizes, dtype=np.int64)
    if int(sizes.sum()) != v.size:
        raise ValueError("group sizes must sum to the number of trials")
    m = v.size
    V = np.zeros((m, m))
    start = 0
    for size in sizes:
        stop = start + int(size)
        V[start:stop, start:stop] = varcomps.sigma2_xi
        idx = np.arange(start, stop)
        V[idx, idx] += varcomps.sigma2_zeta + v[start:stop]
        start = stop
    return V


def _block_quantities(y, mat, group_sizes, v, sigma2_xi, sigma2_zeta):
    """Sherman-Morrison accumulators shared by likelihood and GLS.

    Returns XtViX, XtViy, ytViy, and log|V| computed block by block.
    """
    d = 1.0 / (v + sigma2_zeta)
    offsets = np.zeros(len(group_sizes), dtype=np.int64)
    np.cumsum(group_sizes[:-1], out=offsets[1:])
    s = np.add.reduceat(d, offsets)                    # 1' D^-1 1 per study
    c = sigma2_xi / (1.0 + sigma2_xi * s)              # rank-one correction

    dy = d * y
    dX = mat * d[:, None]
    t = np.add.reduceat(dy, offsets)                   # 1' D^-1 y per study
    T = np.add.reduceat(dX, offsets, axis=0)           # 1' D^-1 X per study

    XtViX = mat.T @ dX - T.T @ (c[:, None] * T)
    XtViy = mat.T @ dy - T.T @ (c * t)
    ytViy = float(np.dot(y, dy) - np.dot(c, t * t))
    logdetV = float(np.sum(np.log(v + sigma2_zeta)) + np.sum(np.log1p(sigma2_xi * s)))
    return XtViX, XtViy, ytViy, logdetV


def log_likelihood(y, X, group_sizes, varcomps: VarianceComponents, v, method: str = "reml") -> float:
    """Marginal (ML) or restricted (REML) Gaussian log-likelihood.

    ML: -0.5 [m log 2pi + log|V| + r' V^-1 r] at the GLS solution;
    REML additionally subtracts 0.5 log|X' V^-1 X| and replaces m by m-f.
    """
    if method not in ("reml", "ml"):
        raise ValueError(f"method must be 'reml' or 'ml', got {method!r}")
    y, mat, group_sizes, v = _check_inputs(y, X, group_sizes, v)
    m, f = mat.shape
    XtViX, XtViy, ytViy, logdetV = _block_quantities(
        y, mat, group_sizes, v, varcomps.sigma2_xi, varcomps.sigma2_zeta)
    sign, logdetA = np.linalg.slogdet(XtViX)
    if sign <= 0:
        raise np.linalg.LinAlgError("design matrix is rank deficient under V^-1")
    beta = np.linalg.solve(XtViX, XtViy)
    rss = ytViy - float(beta @ XtViy)
    if method == "ml":
        return -0.5 * (m * math.log(2.0 * math.pi) + logdetV + rss)
    return -0.5 * ((m - f) * math.log(2.0 * math.pi) + logdetV + logdetA + rss)


def gls_fixed_effects(y, X, group_sizes, varcomps: VarianceComponents, v):
    """GLS fixed effects and their covariance at fixed variance components."""
    y, mat, group_sizes, v = _check_inputs(y, X, group_sizes, v)
    XtViX, XtViy, _, _ = _block_quantities(
        y, mat, group_sizes, v, varcomps.sigma2_xi, varcomps.sigma2_zeta)
    cov = np.linalg.inv(XtViX)
    beta = cov @ XtViy
    cov = 0.5 * (cov + cov.T)
    return beta, cov


def _moment_start(y, mat, group_sizes, v) -> float:
    """Total-heterogeneity scale for the multistart.

    Uses the method-of-moments estimate from the weighted residual sum
    of squares, with the raw residual variance as a fallback so the
    scale never collapses to zero when the data visibly disperse.
    """
    w = 1.0 / v
    A = mat.T @ (mat * w[:, None])
    b = mat.T @ (w * y)
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return 1e-3
    r = y - mat @ beta
    q = float(np.sum(w * r * r))
    m, f = mat.shape
    trace_corr = float(np.trace(np.linalg.solve(A, mat.T @ (mat * (w * w)[:, None]))))
    denom = float(np.sum(w)) - trace_corr
    moments = (q - (m - f)) / denom if denom > 0 else 0.0
    residual_scale = float(np.mean(r * r))
    return max(moments, residual_scale, 1e-4)


def fit_model(y, X, group_sizes, v, method: str = "reml", options: dict | None = None) -> FitResult:
    """Maximize the log-likelihood over the two variance components.

    Components are optimized as log-variances with a floor, via L-BFGS-B
    with finite-difference gradients, restarted from a small deterministic
    set of points built around a method-of-moments heterogeneity estimate.
    Non-convergence returns the best point found with converged=False.
    """
    opts = {"max_evaluations": 2000, "ftol": 1e-10, "gtol": 1e-8}
    opts.update(options or {})
    y, mat, group_sizes, v = _check_inputs(y, X, group_sizes, v)
    m, f = mat.shape
    h = len(group_sizes)
    if m <= f:
        raise ValidationError(f"need more trials than coefficients (m={m}, f={f})")

    single_study = h < 2
    if single_study:
        warnings.warn("only one study: sigma2_xi is not identifiable and is fixed at 0",
                      stacklevel=2)

    s_hat = _moment_start(y, mat, group_sizes, v)
    starts = [
        (VAR_FLOOR, s_hat),
        (s_hat, VAR_FLOOR),
        (0.5 * s_hat, 0.5 * s_hat),
        (4.0 * s_hat, 4.0 * s_hat),
    ]

    def unpack(u):
        if single_study:
            return VAR_FLOOR, math.exp(min(u[0], _LOG_CEIL))
        return math.exp(min(u[0], _LOG_CEIL)), math.exp(min(u[1], _LOG_CEIL))

    evaluations = 0

    def objective(u):
        nonlocal evaluations
        evaluations += 1
        sigma2_xi, sigma2_zeta = unpack(u)
        vc = VarianceComponents(sigma2_xi, sigma2_zeta)
        return -log_likelihood(y, mat, group_sizes, vc, v, method=method)

    bounds = [(_LOG_FLOOR, _LOG_CEIL)] * (1 if single_study else 2)
    best = None
    best_ok = False
    for xi0, zeta0 in starts:
        u0 = [math.log(max(zeta0, VAR_FLOOR))] if single_study else \
             [math.log(max(xi0, VAR_FLOOR)), math.log(max(zeta0, VAR_FLOOR))]
        res = optimize.minimize(
            objective, np.asarray(u0), method="L-BFGS-B", bounds=bounds,
            options={"ftol": opts["ftol"], "gtol": opts["gtol"],
                     "maxfun": opts["max_evaluations"]})
        if best is None or res.fun < best.fun:
            best = res
            best_ok = bool(res.success)

    # The log parameterization flattens the surface near zero, which can
    # stall finite-difference quasi-Newton steps; a short derivative-free
    # polish from the best point recovers those cases deterministically.
    polish = optimize.minimize(
        objective, np.clip(best.x, _LOG_FLOOR, _LOG_CEIL), method="Nelder-Mead",
        options={"xatol": 1e-7, "fatol": 1e-10,
                 "maxfev": min(300, opts["max_evaluations"])})
    if polish.fun < best.fun:
        best = polish
        best_ok = bool(polish.success) or best_ok

    sigma2_xi, sigma2_zeta = unpack(best.x)
    varcomps = VarianceComponents(sigma2_xi, sigma2_zeta)
    beta, cov = gls_fixed_effects(y, mat, group_sizes, varcomps, v)
    return FitResult(
        beta=beta, labels=_labels_of(X, f), cov_beta=cov, varcomps=varcomps,
        loglik=-float(best.fun), method=method, converged=best_ok,
        n_evaluations=evaluations, m=m, h=h, f=f,
        y=y, X=mat, group_sizes=group_sizes, v=v)


@dataclass(frozen=True)
class PooledEstimate:
    """Population effect on the transformed and proportion scales."""

    mu: float
    se: float
    ci_low: float
    ci_high: float
    prop: float
    prop_low: float
    prop_high: float


def pooled_estimate(fit: FitResult, level: float = 0.95,
                    quantile: str = "normal") -> PooledEstimate:
    """Population mean with a symmetric CI, on both scales.

    For moderated models the estimate is the model prediction at the
    column means of the design (the average observed trial); for the
    intercept-only model this is exactly the intercept.  The proportion
    scale uses the back-transform with effective sample size 1/se^2.
    The default CI uses normal quantiles; quantile="t" switches to a
    Student-t with m - f degrees of freedom.
    """
    c = fit.X.mean(axis=0)
    mu = float(c @ fit.beta)
    se = math.sqrt(max(float(c @ fit.cov_beta @ c), 0.0))
    if quantile == "normal":
        z = float(norm.ppf(0.5 + level / 2.0))
    elif quantile == "t":
        from scipy.stats import t as t_dist

        z = float(t_dist.ppf(0.5 + level / 2.0, df=fit.m - fit.f))
    else:
        raise ValueError(f"unknown quantile kind {quantile!r}")
    lo, hi = mu - z * se, mu + z * se
    n_equiv = math.inf if se == 0.0 else 1.0 / (se * se)
    clamp = lambda t: min(max(t, 0.0), HALF_PI)
    return PooledEstimate(
        mu=mu, se=se, ci_low=lo, ci_high=hi,
        prop=ft_inverse(clamp(mu), n_equiv),
        prop_low=ft_inverse(clamp(lo), n_equiv),
        prop_high=ft_inverse(clamp(hi), n_equiv))


@dataclass(frozen=True)
class StudyEffect:
    """Predicted study-level effect on the transformed scale."""

    study_id: str
    kappa_hat: float
    se: float
    trials: int


def predict_study_effects(fit: FitResult, dataset, method: str = "blup") -> list:
    """Per-study effect predictions for the forest display.

    blup: conditional mean of the study effect given the data at the
    plugged-in variance components, shrunk toward the population mean;
    the se is the conditional standard deviation.  pool: classic
    within-study inverse-variance average, no shrinkage.
    """
    ids = dataset.study_ids()
    sizes = dataset.group_sizes()
    if len(ids) != fit.h or int(sizes.sum()) != fit.m:
        raise ValidationError("dataset does not match the fitted model layout")
    if method not in ("blup", "pool"):
        raise ValueError(f"unknown prediction method {method!r}")

    out = []
    start = 0
    xi = fit.varcomps.sigma2_xi
    zeta = fit.varcomps.sigma2_zeta
    fitted = fit.X @ fit.beta
    for sid, size in zip(ids, sizes):
        stop = start + int(size)
        y_j = fit.y[start:stop]
        v_j = fit.v[start:stop]
        if method == "pool":
            w = 1.0 / v_j
            kappa = float(np.sum(w * y_j) / np.sum(w))
            se = math.sqrt(1.0 / float(np.sum(w)))
        else:
            mean_fit = float(np.mean(fitted[start:stop]))
            d = 1.0 / (v_j + zeta)
            s = float(np.sum(d))
            resid = y_j - fitted[start:stop]
            xi_hat = xi * float(np.sum(d * resid)) / (1.0 + xi * s)
            var = xi / (1.0 + xi * s)
            kappa = mean_fit + xi_hat
            se = math.sqrt(max(var, 0.0))
        out.append(StudyEffect(study_id=sid, kappa_hat=kappa, se=se, trials=int(size)))
        start = stop
    return out


def study_weights(fit: FitResult) -> np.ndarray:
    """Per-study share of the total GLS weight, normalized to sum to 1."""
    d = 1.0 / (fit.v + fit.varcomps.sigma2_zeta)
    offsets = np.zeros(len(fit.group_sizes), dtype=np.int64)
    np.cumsum(fit.group_sizes[:-1], out=offsets[1:])
    s = np.add.reduceat(d, offsets)
    w = s / (1.0 + fit.varcomps.sigma2_xi * s)
    return w / w.sum()


def effect_arrays(dataset):
    """Transformed effect sizes and sampling variances for a dataset."""
    k = dataset.k_array()
    n = dataset.n_array()
    return ft_theta(k, n), ft_variance(n)
