"""Independent brute-force oracles for the test suite.

Nothing here shares the Cholesky plumbing it is meant to check: joint
densities go through ``slogdet``/``solve``, conditioning through dense
partitioned formulas, and chained predictive moments through 1-D
Gauss-Hermite quadrature. The grid-function operators at the bottom
verify the fixed-point identities of the chained composition operator
numerically on discretised functions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import MultiOutputDataset, is_closed_downwards
from .errors import DataError, NumericalError, SpecError
from .gp import LOG2PI
from .model import GparModel, layer_training_rows

# ---------------------------------------------------------------------------
# Dense Gaussian conditioning


def _check_joint(mean, cov):
    mean = np.asarray(mean, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise DataError(f"covariance shape {cov.shape} does not match mean "
                        f"length {mean.size}")
    scale = max(float(np.max(np.abs(cov))), 1e-300)
    if np.max(np.abs(cov - cov.T)) > 1e-10 * scale:
        raise DataError("covariance is not symmetric")
    return mean, cov


def dense_condition(mean, cov, obs_idx, obs_values, query_idx):
    """Gaussian conditioning by explicit partitioned solves.

    Returns the conditional mean and covariance of the query block
    given the observed block. With no observations this is the prior
    over the query block.
    """
    mean, cov = _check_joint(mean, cov)
    obs_idx = list(obs_idx)
    query_idx = list(query_idx)
    if set(obs_idx) & set(query_idx):
        raise DataError("observed and query indices overlap")
    all_idx = obs_idx + query_idx
    if any(i < 0 or i >= mean.size for i in all_idx):
        raise DataError("index out of range")
    if len(set(all_idx)) != len(all_idx):
        raise DataError("duplicate indices")
    obs_values = np.asarray(obs_values, dtype=float).ravel()
    if obs_values.size != len(obs_idx):
        raise DataError("observed values do not match observed indices")

    q_mean = mean[query_idx]
    q_cov = cov[np.ix_(query_idx, query_idx)]
    if not obs_idx:
        return q_mean, q_cov
    s_oo = cov[np.ix_(obs_idx, obs_idx)]
    s_qo = cov[np.ix_(query_idx, obs_idx)]
    solved = np.linalg.solve(s_oo, np.column_stack(
        [obs_values - mean[obs_idx], s_qo.T.copy()]))
    gain = solved[:, 0]
    s_oo_inv_s_oq = solved[:, 1:]
    return q_mean + s_qo @ gain, q_cov - s_qo @ s_oo_inv_s_oq


def dense_condition_alt(mean, cov, obs_idx, obs_values, query_idx):
    """Same conditional, different route: invert the full precision.

    Uses the identity cov(q|o) = inv(Lambda_qq) and
    mean(q|o) = mean_q - inv(Lambda_qq) Lambda_qo (y_o - mean_o), where
    Lambda is the joint precision matrix. Exercises a different solve
    ordering than :func:`dense_condition` for cross-checking.
    """
    mean, cov = _check_joint(mean, cov)
    obs_idx, query_idx = list(obs_idx), list(query_idx)
    obs_values = np.asarray(obs_values, dtype=float).ravel()
    if not obs_idx:
        return mean[query_idx], cov[np.ix_(query_idx, query_idx)]
    if not query_idx:
        return np.zeros(0), np.zeros((0, 0))
    keep = obs_idx + query_idx
    precision = np.linalg.inv(cov[np.ix_(keep, keep)])
    nq = len(query_idx)
    lam_qq = precision[-nq:, -nq:]
    lam_qo = precision[-nq:, :-nq]
    cov_q = np.linalg.inv(lam_qq)
    mean_q = mean[query_idx] - cov_q @ lam_qo @ (obs_values - mean[obs_idx])
    return mean_q, cov_q


def mvn_logpdf(y, mean, cov) -> float:
    """Log density of a multivariate normal via slogdet and solve."""
    y = np.asarray(y, dtype=float).ravel()
    mean, cov = _check_joint(mean, cov)
    if y.size == 0:
        return 0.0
    diff = y - mean
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalError("covariance is not positive definite")
    return float(-0.5 * diff @ np.linalg.solve(cov, diff)
                 - 0.5 * logdet - 0.5 * y.size * LOG2PI)


# ---------------------------------------------------------------------------
# Factorised joint density of a trained chain


def factorized_joint_logdensity(model: GparModel,
                                ds: MultiOutputDataset) -> float:
    """Joint log density of all observed cells under the trained chain.

    Each layer contributes the Gaussian density of its observed targets
    given the realised upstream outputs at the same locations, centred
    by the layer's frozen training constant. Requires closed-downwards
    data and a plain (non-denoising) model.
    """
    if model.denoising:
        raise SpecError("joint-density oracle supports plain models only")
    ok, violation = is_closed_downwards(ds, model.ordering)
    if not ok:
        raise DataError(f"dataset is not closed downwards: {violation}")
    total = 0.0
    for position, layer in enumerate(model.layers):
        rows = layer_training_rows(ds, model.ordering, position)
        if rows.size == 0:
            continue
        prev_cols = list(model.ordering.perm[:position])
        aug = np.hstack([ds.x[rows], ds.y[np.ix_(rows, prev_cols)]])
        targets = ds.y[rows, layer.output]
        k = layer.kernel.gram(aug, aug)
        cov = k + layer.noise_variance * np.eye(rows.size)
        centred = targets - layer.fitted.y_mean
        total += mvn_logpdf(centred, np.zeros(rows.size), cov)
    return float(total)


# ---------------------------------------------------------------------------
# Chained predictive moments by quadrature


def quadrature_predictive(model: GparModel, x_star, n_nodes: int = 64):
    """Mean and variance of the second output at one test input.

    Marginalises the unobserved first output with Gauss-Hermite
    quadrature against its noisy predictive, mixing the second layer's
    conditional Gaussians: a 1-D numerical integration that is
    independent of the Monte Carlo propagation path. Two-output plain
    models only.
    """
    if model.n_outputs != 2:
        raise SpecError("quadrature oracle handles exactly two outputs")
    if model.denoising:
        raise SpecError("quadrature oracle supports plain models only")
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    if x_star.shape != (1, model.n_inputs):
        raise DataError(f"x_star must be a single input of width "
                        f"{model.n_inputs}")

    first = model.layer_posterior(0, x_star)
    mu1 = float(first.mean[0])
    s1 = float(np.sqrt(first.noisy_var[0]))

    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    weights = weights / np.sqrt(np.pi)
    values = mu1 + np.sqrt(2.0) * s1 * nodes
    aug = np.hstack([np.repeat(x_star, n_nodes, axis=0), values[:, None]])
    second = model.layer_posterior(1, aug)
    mean = float(weights @ second.mean)
    second_moment = float(weights @ (second.noisy_var + second.mean ** 2))
    return mean, second_moment - mean ** 2


# ---------------------------------------------------------------------------
# Conditional-independence check at the density level


@dataclass
class IndependenceCheck:
    mean_diff: float
    var_diff: float
    mean: float
    var: float


def _posterior_by_density_sweep(model, ds, row, position, grid):
    """Posterior of one unobserved cell via a joint-density sweep.

    Treats the cell as a hypothetical observation, evaluates the full
    factorised joint density for every grid value, and normalises on
    the grid. Slow and completely generic: every layer's density term
    is recomputed for every value.
    """
    col = model.ordering.perm[position]
    logd = np.empty(grid.size)
    y = ds.y.copy()
    mask = ds.mask.copy()
    mask[row, col] = True
    for j, value in enumerate(grid):
        y[row, col] = value
        logd[j] = factorized_joint_logdensity(
            model, replace(ds, y=y.copy(), mask=mask.copy()))
    w = np.exp(logd - np.max(logd))
    z = np.trapezoid(w, grid)
    mean = np.trapezoid(w * grid, grid) / z
    second = np.trapezoid(w * grid ** 2, grid) / z
    return float(mean), float(second - mean ** 2)


def verify_theorem1(model: GparModel, ds: MultiOutputDataset,
                    query_row: int, target_position: int,
                    toggle_row: int, toggle_position: int,
                    toggle_value: float | None = None,
                    grid_size: int = 241, span: float = 8.0):
    """Check that a later-output observation cannot move an earlier posterior.

    Computes the posterior of the output at ``target_position`` at
    ``query_row`` (whose earlier outputs must be observed, the target
    itself not) through the full joint density, with and without the
    observation of the later output at ``toggle_row``. For
    closed-downwards data the two posteriors agree identically; the
    returned check carries the max discrepancies in mean and variance.

    If the toggle cell is currently unobserved, ``toggle_value``
    supplies the hypothetical observation. Both dataset variants must
    be closed downwards.
    """
    if not 0 <= target_position < toggle_position < model.n_outputs:
        raise DataError(
            f"need target position < toggle position, got "
            f"{target_position} and {toggle_position}")
    target_col = model.ordering.perm[target_position]
    toggle_col = model.ordering.perm[toggle_position]
    prev_cols = list(model.ordering.perm[:target_position])
    if not all(ds.mask[query_row, c] for c in prev_cols):
        raise DataError(f"query row {query_row} must observe all outputs "
                        f"before position {target_position}")
    if ds.mask[query_row, target_col]:
        raise DataError(f"query row {query_row} already observes the target")

    with_y = ds.y.copy()
    with_mask = ds.mask.copy()
    if ds.mask[toggle_row, toggle_col]:
        without = replace(ds, y=ds.y.copy(), mask=ds.mask.copy())
        without.mask[toggle_row, toggle_col] = False
        without.y[toggle_row, toggle_col] = np.nan
        with_ds = ds
    else:
        if toggle_value is None:
            raise DataError("toggle cell is unobserved; provide a value for "
                            "the hypothetical observation")
        with_y[toggle_row, toggle_col] = float(toggle_value)
        with_mask[toggle_row, toggle_col] = True
        with_ds = replace(ds, y=with_y, mask=with_mask)
        without = ds
    for variant in (with_ds, without):
        ok, violation = is_closed_downwards(variant, model.ordering)
        if not ok:
            raise DataError(f"toggled dataset is not closed downwards: "
                            f"{violation}")

    aug = np.hstack([ds.x[query_row][None, :],
                     ds.y[query_row, prev_cols][None, :]])
    ref = model.layer_posterior(target_position, aug)
    centre = float(ref.mean[0])
    width = span * float(np.sqrt(ref.noisy_var[0]))
    grid = np.linspace(centre - width, centre + width, grid_size)

    m1, v1 = _posterior_by_density_sweep(model, with_ds, query_row,
                                         target_position, grid)
    m0, v0 = _posterior_by_density_sweep(model, without, query_row,
                                         target_position, grid)
    return IndependenceCheck(abs(m1 - m0), abs(v1 - v0), m1, v1)


def random_chain_case(seed: int, n_outputs: int | None = None,
                      n_rows: int | None = None):
    """A random closed-downwards dataset with a fitted (untrained) chain.

    Observation counts decrease strictly along the ordering, so every
    middle output has rows where its prefix is observed but it is not
    (query rows) and the last output has removable observations (toggle
    rows). Hyperparameters are random; the conditional-independence
    property does not depend on them. Returns a dict with the model,
    dataset, and a valid (query_row, target_position, toggle_row,
    toggle_position) tuple.
    """
    from .data import OutputOrdering
    from .gp import GpProblem, fit, log_marginal_likelihood
    from .kernels import build_from_spec, gpar_nl_spec
    from .model import GparModel, TrainedLayer, layer_training_rows

    rng = np.random.default_rng(seed)
    m = n_outputs or int(rng.integers(2, 4))
    n = n_rows or int(rng.integers(8, 15))
    # strictly decreasing observation counts in [2, n-1], so every
    # output also has at least one row with only its prefix observed
    counts = sorted(rng.choice(np.arange(2, n), size=m, replace=False),
                    reverse=True)
    x = np.sort(rng.uniform(-2.0, 2.0, size=n))[:, None]
    y = rng.standard_normal((n, m))
    mask = np.zeros((n, m), dtype=bool)
    for j, c in enumerate(counts):
        mask[:c, j] = True
    ds = MultiOutputDataset.from_arrays(x, y, mask)

    ordering = OutputOrdering.identity(m)
    layers = []
    for position in range(m):
        spec = gpar_nl_spec(1, position, base="eq",
                            variance=float(rng.uniform(0.5, 2.0)),
                            lengthscale=float(rng.uniform(0.5, 2.0)))
        kernel = build_from_spec(spec, input_dim=1 + position)
        rows = layer_training_rows(ds, ordering, position)
        aug = np.hstack([ds.x[rows], ds.y[np.ix_(rows, list(range(position)))]])
        problem = GpProblem(kernel, float(rng.uniform(0.05, 0.5)), aug,
                            ds.y[rows, position])
        fitted = fit(problem)
        layers.append(TrainedLayer(position, position, kernel.to_spec(),
                                   problem.noise_variance, fitted,
                                   log_marginal_likelihood(fitted)))
    model = GparModel(ordering, layers, ds.output_names, ds.input_names,
                      denoising=False, training_fingerprint=ds.fingerprint())

    target = int(rng.integers(0, m - 1))
    toggle_position = m - 1  # removable without breaking closedness
    query_row = int(counts[target])          # prefix observed, target not
    toggle_row = int(counts[toggle_position] - 1)
    return {"model": model, "ds": ds, "query_row": query_row,
            "target_position": target, "toggle_row": toggle_row,
            "toggle_position": toggle_position}


def theorem1_trials(n_trials: int, seed: int = 0, grid_size: int = 161):
    """Randomised conditional-independence checks; returns the check list."""
    out = []
    for t in range(n_trials):
        case = random_chain_case(seed * 100003 + t)
        out.append(verify_theorem1(
            case["model"], case["ds"], case["query_row"],
            case["target_position"], case["toggle_row"],
            case["toggle_position"], grid_size=grid_size))
    return out


# ---------------------------------------------------------------------------
# Grid-function operators: composition, fixed points, linear series


@dataclass
class GridFunction:
    """A vector-valued function discretised on a 1-D grid."""

    grid: np.ndarray    # (g,) strictly increasing
    values: np.ndarray  # (g, m)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float).ravel()
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.grid.size < 1:
            raise DataError("grid needs at least one point")
        if np.any(np.diff(self.grid) <= 0):
            raise DataError("grid must be strictly increasing")
        if self.values.shape[0] != self.grid.size:
            raise DataError(f"values have {self.values.shape[0]} rows, grid "
                            f"has {self.grid.size} points")


class OperatorA:
    """A component-triangular operator on grid functions.

    Component i of the output may read only components 0..i-1 of the
    input function (component 0 is identically zero), matching the
    dependence structure of the chained model. ``components[i]`` maps
    the full (g, m) value matrix to the (g,) output of component i; the
    triangularity is the constructor's caller's responsibility except
    for the built-in constructors, which guarantee it.

    Linear operators additionally carry per-pair (g, g) coefficient
    blocks and support exact matrix composition.
    """

    def __init__(self, m, g, components=None, blocks=None):
        if m < 1 or g < 1:
            raise DataError("need m >= 1 components and g >= 1 grid points")
        self.m = m
        self.g = g
        self.blocks = None
        if blocks is not None:
            self.blocks = {}
            for (i, j), mat in blocks.items():
                if not 0 <= j < i < m:
                    raise DataError(f"block ({i}, {j}) breaks strict lower "
                                    f"triangularity")
                mat = np.asarray(mat, dtype=float)
                if mat.shape != (g, g):
                    raise DataError(f"block ({i}, {j}) must be ({g}, {g})")
                self.blocks[(i, j)] = mat
            self.components = None
        elif components is not None:
            components = list(components)
            if len(components) != m:
                raise DataError(f"need {m} component functions")
            self.components = components
        else:
            raise DataError("give either components or blocks")

    @property
    def linear(self):
        return self.blocks is not None

    def apply_values(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.g, self.m):
            raise DataError(f"values must be ({self.g}, {self.m})")
        out = np.zeros_like(values)
        if self.linear:
            for (i, j), mat in self.blocks.items():
                out[:, i] += mat @ values[:, j]
        else:
            for i in range(self.m):
                out[:, i] = self.components[i](values)
        return out

    def apply(self, f: GridFunction) -> GridFunction:
        return GridFunction(f.grid, self.apply_values(f.values))

    def as_matrix(self) -> np.ndarray:
        """Stacked (g*m, g*m) matrix of a linear operator (block lower)."""
        if not self.linear:
            raise SpecError("as_matrix needs a linear operator")
        big = np.zeros((self.g * self.m, self.g * self.m))
        for (i, j), mat in self.blocks.items():
            big[i * self.g:(i + 1) * self.g, j * self.g:(j + 1) * self.g] = mat
        return big

    @classmethod
    def random_nonlinear(cls, m, g, seed=0, break_triangularity=False):
        """Bounded random nonlinear components (tanh of a random mix)."""
        rng = np.random.default_rng(seed)

        def make(i):
            w = rng.standard_normal((g, g * i)) / np.sqrt(max(g * i, 1))
            b = rng.standard_normal(g)

            def comp(values, w=w, b=b, i=i):
                return np.tanh(w @ values[:, :i].reshape(-1, order="F") + b)

            return comp

        components = [lambda values: np.zeros(values.shape[0])]
        components += [make(i) for i in range(1, m)]
        if break_triangularity and m >= 2:
            w0 = rng.standard_normal((g, g)) / np.sqrt(g)

            def comp0(values, w0=w0):
                return np.tanh(w0 @ values[:, 1])

            components[0] = comp0
        return cls(m, g, components=components)

    @classmethod
    def random_linear(cls, m, g, seed=0):
        rng = np.random.default_rng(seed)
        blocks = {(i, j): rng.standard_normal((g, g)) / np.sqrt(g)
                  for i in range(1, m) for j in range(i)}
        return cls(m, g, blocks=blocks)

    @classmethod
    def from_convolution(cls, grid, kernel_fns):
        """Linear operator from convolution kernels on a grid.

        ``kernel_fns[(i, j)]`` maps a lag to a weight; discretised with
        trapezoidal quadrature weights, so block (i, j) has entries
        ``w_b * k(x_a - x_b)``.
        """
        grid = np.asarray(grid, dtype=float).ravel()
        g = grid.size
        if g < 2:
            raise DataError("convolution discretisation needs >= 2 points")
        w = np.empty(g)
        w[0] = (grid[1] - grid[0]) / 2.0
        w[-1] = (grid[-1] - grid[-2]) / 2.0
        w[1:-1] = (grid[2:] - grid[:-2]) / 2.0
        m = 1 + max(i for i, _ in kernel_fns)
        lags = grid[:, None] - grid[None, :]
        blocks = {}
        for (i, j), fn in kernel_fns.items():
            blocks[(i, j)] = fn(lags) * w[None, :]
        return cls(m, g, blocks=blocks)


def t_apply(a: OperatorA, u: GridFunction, f: GridFunction) -> GridFunction:
    """One step of the affine map: ``u + a(f)``."""
    if u.values.shape != f.values.shape:
        raise DataError("u and f must share grid and width")
    return GridFunction(u.grid, u.values + a.apply_values(f.values))


def t_power(a: OperatorA, u: GridFunction, n: int) -> GridFunction:
    """``n`` consecutive applications of the map, starting from ``u``."""
    f = u
    for _ in range(n):
        f = t_apply(a, u, f)
    return f


def operator_power_apply(a: OperatorA, u: GridFunction, n: int) -> GridFunction:
    """``a`` composed with itself ``n`` times, applied to ``u``."""
    f = u
    for _ in range(n):
        f = a.apply(f)
    return f


def verify_fixed_point(a: OperatorA, u: GridFunction) -> float:
    """Residual of the fixed-point identity for the (m-1)-fold iterate.

    For a triangular operator the iterate solves ``g = u + a(g)``
    exactly, so the residual is round-off; a non-triangular operator
    generically leaves a macroscopic residual.
    """
    g = t_power(a, u, a.m - 1)
    lhs = g.values
    rhs = u.values + a.apply_values(g.values)
    return float(np.max(np.abs(lhs - rhs)))


def verify_linear_series(a: OperatorA, u: GridFunction) -> float:
    """Residual between the iterate and the truncated operator series.

    For a linear triangular operator the (m-1)-fold iterate equals
    ``(sum_{p=0}^{m-1} a^p)(u)``; the series is evaluated by explicit
    matrix powers of the stacked operator.
    """
    if not a.linear:
        raise SpecError("linear-series check needs a linear operator")
    iterate = t_power(a, u, a.m - 1).values
    big = a.as_matrix()
    vec = u.values.reshape(-1, order="F")
    acc = vec.copy()
    power = vec.copy()
    for _ in range(a.m - 1):
        power = big @ power
        acc += power
    series = acc.reshape(u.values.shape, order="F")
    return float(np.max(np.abs(iterate - series)))
