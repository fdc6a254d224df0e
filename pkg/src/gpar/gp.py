"""Exact single-output GP regression with a Cholesky backbone.

Targets are centred by their training mean before fitting (the prior is
zero-mean) and the mean is restored on prediction; the log marginal
likelihood is that of the centred targets. Hyperparameters live in log
coordinates throughout optimisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import DimensionMismatch, NumericalError
from .kernels import Kernel

log = logging.getLogger(__name__)

LOG2PI = float(np.log(2.0 * np.pi))

# log-space box for the optimiser; wide enough for any sane data scale
# while keeping exp() far from overflow
LOG_BOUNDS = (-20.0, 20.0)

# jitter escalation: multiples of mean(diag K), tried in order after
# the bare matrix fails to factorise
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

_BAD_VALUE = 1e25


@dataclass
class GpProblem:
    """A regression task: kernel, observation-noise variance, data."""

    kernel: Kernel
    noise_variance: float
    x: np.ndarray  # (n, d) training inputs, possibly augmented
    y: np.ndarray  # (n,) training targets

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionMismatch(self.x.shape[0], self.y.shape[0],
                                    what="target length")
        if self.x.size and not np.all(np.isfinite(self.x)):
            raise NumericalError("training inputs contain non-finite values")
        if self.y.size and not np.all(np.isfinite(self.y)):
            raise NumericalError("training targets contain non-finite values")
        if not self.noise_variance > 0:
            raise NumericalError(
                f"noise variance must be positive, got {self.noise_variance}")

    @property
    def n(self):
        return self.y.shape[0]


@dataclass
class FittedGp:
    """A factorised GP: Cholesky of K + noise*I + jitter*I and its solve."""

    problem: GpProblem
    chol: np.ndarray      # (n, n) lower Cholesky factor
    alpha: np.ndarray     # (K + noise*I + jitter*I)^-1 (y - y_mean)
    jitter: float
    y_mean: float
    _kinv: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.problem.n

    def kinv(self):
        """Dense inverse of the factorised matrix (cached)."""
        if self._kinv is None:
            self._kinv = cho_solve((self.chol, True), np.eye(self.n))
        return self._kinv


@dataclass
class PosteriorResult:
    mean: np.ndarray
    latent_var: np.ndarray
    noisy_var: np.ndarray
    n_clamped: int = 0


def fit(problem: GpProblem, y_mean: float | None = None) -> FittedGp:
    """Factorise the training covariance, escalating jitter as needed.

    Targets are centred by their mean, or by ``y_mean`` when given
    (used to evaluate a trained model on other data with its frozen
    centring constant). An empty problem yields a degenerate fit
    representing the prior. Raises :class:`NumericalError` if the
    matrix cannot be factorised (or fails the reconstruction check) at
    the largest jitter tried.
    """
    n = problem.n
    if n == 0:
        return FittedGp(problem, np.zeros((0, 0)), np.zeros(0), 0.0, 0.0)

    if y_mean is None:
        y_mean = float(np.mean(problem.y))
    yc = problem.y - y_mean
    k = problem.kernel.gram(problem.x, problem.x)
    k = k + problem.noise_variance * np.eye(n)
    diag_scale = float(np.mean(np.diag(k)))
    if not diag_scale > 0:
        diag_scale = 1.0

    y_scale = float(np.max(np.abs(yc))) if n else 0.0
    last_err = None
    for level in (0.0,) + JITTER_LADDER:
        jitter = level * diag_scale
        try:
            chol = cholesky(k + jitter * np.eye(n), lower=True,
                            check_finite=False)
        except np.linalg.LinAlgError as err:
            last_err = err
            continue
        alpha = cho_solve((chol, True), yc, check_finite=False)
        residual = float(np.max(np.abs(
            (k + jitter * np.eye(n)) @ alpha - yc))) if n else 0.0
        if residual <= 1e-6 * max(y_scale, 1e-300):
            if jitter > 0:
                log.debug("factorisation needed jitter %.3e", jitter)
            return FittedGp(problem, chol, alpha, jitter, y_mean)
        last_err = NumericalError(
            f"reconstruction residual {residual:.3e} too large")
    raise NumericalError(
        f"covariance factorisation failed up to jitter "
        f"{JITTER_LADDER[-1] * diag_scale:.3e}: {last_err}")


def log_marginal_likelihood(fitted: FittedGp) -> float:
    """log N(y_centred; 0, K + noise*I + jitter*I)."""
    if fitted.n == 0:
        return 0.0
    yc = fitted.problem.y - fitted.y_mean
    quad = float(yc @ fitted.alpha)
    logdet_half = float(np.sum(np.log(np.diag(fitted.chol))))
    return -0.5 * quad - logdet_half - 0.5 * fitted.n * LOG2PI


def lml_gradient(fitted: FittedGp) -> dict[str, float]:
    """Gradient of the log marginal likelihood in log coordinates.

    Covers every kernel parameter plus ``noise_variance``, via
    ``0.5 * tr((alpha alpha^T - K^-1) dK/dtheta)``.
    """
    problem = fitted.problem
    names = list(problem.kernel.params())
    if fitted.n == 0:
        out = {name: 0.0 for name in names}
        out["noise_variance"] = 0.0
        return out
    _, kgrads = problem.kernel.gram_with_grads(problem.x, problem.x)
    w = np.outer(fitted.alpha, fitted.alpha) - fitted.kinv()
    out = {name: 0.5 * float(np.sum(w * kgrads[name])) for name in names}
    out["noise_variance"] = 0.5 * problem.noise_variance * float(
        fitted.alpha @ fitted.alpha - np.trace(fitted.kinv()))
    return out


def posterior(fitted: FittedGp, xs) -> PosteriorResult:
    """Posterior mean and pointwise variances at the given inputs.

    ``latent_var`` is the variance of the noise-free function;
    ``noisy_var`` adds the observation noise. Negative round-off
    variances are clamped to zero and counted.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    problem = fitted.problem
    prior_var = problem.kernel.diag(xs)
    if fitted.n == 0:
        latent = prior_var.copy()
        return PosteriorResult(np.zeros(xs.shape[0]), latent,
                               latent + problem.noise_variance)
    ks = problem.kernel.gram(problem.x, xs)
    v = solve_triangular(fitted.chol, ks, lower=True, check_finite=False)
    mean = ks.T @ fitted.alpha + fitted.y_mean
    latent = prior_var - np.sum(v * v, axis=0)
    n_clamped = int(np.sum(latent < 0))
    if n_clamped:
        worst = float(latent.min())
        log.debug("clamped %d negative posterior variances (min %.3e)",
                  n_clamped, worst)
        latent = np.clip(latent, 0.0, None)
    return PosteriorResult(mean, latent, latent + problem.noise_variance,
                           n_clamped)


def posterior_cov(fitted: FittedGp, xs):
    """Posterior mean and full latent covariance over the given inputs."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    problem = fitted.problem
    prior = problem.kernel.gram(xs, xs)
    if fitted.n == 0:
        return np.zeros(xs.shape[0]), prior
    ks = problem.kernel.gram(problem.x, xs)
    v = solve_triangular(fitted.chol, ks, lower=True, check_finite=False)
    mean = ks.T @ fitted.alpha + fitted.y_mean
    return mean, prior - v.T @ v


# ---------------------------------------------------------------------------
# Hyperparameter optimisation


@dataclass
class RestartRecord:
    index: int
    start_lml: float
    final_lml: float
    status: str


@dataclass
class OptimizeResult:
    problem: GpProblem
    lml: float
    restarts: list[RestartRecord]


def _pack(problem):
    names = list(problem.kernel.params())
    values = list(problem.kernel.params().values()) + [problem.noise_variance]
    return names + ["noise_variance"], np.log(np.asarray(values))


def _unpack(problem, names, logtheta):
    values = np.exp(logtheta)
    kernel = problem.kernel.with_params(dict(zip(names[:-1], values[:-1])))
    return replace(problem, kernel=kernel, noise_variance=float(values[-1]))


def _objective(problem, names):
    def f(logtheta):
        try:
            cand = _unpack(problem, names, logtheta)
            fitted = fit(cand)
            lml = log_marginal_likelihood(fitted)
            grads = lml_gradient(fitted)
        except NumericalError:
            return _BAD_VALUE, np.zeros(len(names))
        if not np.isfinite(lml):
            return _BAD_VALUE, np.zeros(len(names))
        g = np.array([grads[n] for n in names])
        return -lml, -g

    return f


def _random_start(rng, names, problem):
    """Log-uniform draws scaled to the data, one value per parameter."""
    spans = (np.max(problem.x, axis=0) - np.min(problem.x, axis=0)
             if problem.n else np.array([1.0]))
    span = float(np.max(spans)) if spans.size else 1.0
    if span <= 0:
        span = 1.0
    yvar = float(np.var(problem.y)) if problem.n else 1.0
    if yvar <= 0:
        yvar = 1.0

    def draw(lo, hi):
        return rng.uniform(np.log(lo), np.log(hi))

    out = np.empty(len(names))
    for i, name in enumerate(names):
        if name == "noise_variance":
            out[i] = draw(1e-4 * yvar, 0.5 * yvar)
        elif name.endswith("alpha"):
            out[i] = draw(0.1, 10.0)
        elif "lengthscale" in name:
            out[i] = draw(0.05 * span, 2.0 * span)
        else:  # variances of all flavours
            out[i] = draw(0.1 * yvar, 2.0 * yvar)
    return np.clip(out, LOG_BOUNDS[0], LOG_BOUNDS[1])


def _first_order_ascent(f, x0, f0, g0, budget):
    """Backtracking gradient descent on the negative LML.

    Used when the quasi-Newton line search gives up without progress.
    """
    x, fx, gx = x0, f0, g0
    step = 1.0
    for _ in range(budget):
        cand = np.clip(x - step * gx, LOG_BOUNDS[0], LOG_BOUNDS[1])
        fc, gc = f(cand)
        if fc < fx - 1e-12:
            x, fx, gx = cand, fc, gc
            step *= 1.5
        else:
            step *= 0.25
            if step < 1e-12:
                break
    return x, fx


def optimize(problem: GpProblem, restarts: int = 5, budget: int = 200,
             seed: int = 0) -> OptimizeResult:
    """Maximise the log marginal likelihood over log-hyperparameters.

    Restart 0 starts from the problem's current values; the rest draw
    random starting points scaled to the data. The best final value
    across restarts wins (ties go to the lower restart index), and each
    restart can never end below its own starting value. Deterministic
    given ``seed``.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    names, log0 = _pack(problem)
    f = _objective(problem, names)
    if budget == 0:
        f0, _ = f(log0)
        return OptimizeResult(problem, -f0, [
            RestartRecord(0, -f0, -f0, "budget-0")])

    rng = np.random.default_rng(seed)
    bounds = [LOG_BOUNDS] * len(names)
    records = []
    candidates = []  # (final_lml, restart_index, logtheta)
    for r in range(restarts):
        x0 = log0 if r == 0 else _random_start(rng, names, problem)
        x0 = np.clip(x0, LOG_BOUNDS[0], LOG_BOUNDS[1])
        f0, g0 = f(x0)
        if f0 >= _BAD_VALUE:
            records.append(RestartRecord(r, -f0, -f0, "start-failed"))
            continue
        res = minimize(f, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": budget})
        status = "ok" if res.success else f"lbfgs: {res.message}"
        xb, fb = res.x, res.fun
        if fb >= f0 - 1e-12 and not res.success:
            xb, fb = _first_order_ascent(f, x0, f0, g0, budget)
            status += " +first-order"
        if fb > f0:  # never leave a restart worse than it started
            xb, fb = x0, f0
        records.append(RestartRecord(r, -f0, -fb, status))
        candidates.append((-fb, r, xb))

    if not candidates:
        raise NumericalError(
            "every optimisation restart failed numerically; "
            f"diagnostics: {records}")
    best_lml, _, best_x = max(candidates, key=lambda c: (c[0], -c[1]))
    return OptimizeResult(_unpack(problem, names, best_x), best_lml, records)
