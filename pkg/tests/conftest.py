"""Shared builders for the test suite."""

import numpy as np
import pytest

from gpar.data import MultiOutputDataset, OutputOrdering
from gpar.gp import GpProblem, fit, log_marginal_likelihood
from gpar.kernels import (EQ, RQ, Constant, DimSelect, Linear, Product,
                          Scaled, Sum, build_from_spec, gpar_nl_spec)
from gpar.model import GparModel, TrainedLayer, layer_training_rows


def random_kernel(rng, d, allow_composite=True):
    """A random kernel over d-dimensional inputs, leaves or composites."""
    def leaf():
        kind = rng.choice(["eq", "rq", "linear", "constant"])
        v = float(rng.uniform(0.3, 2.0))
        l = float(rng.uniform(0.4, 2.5))
        if kind == "eq":
            return EQ(variance=v, lengthscale=l)
        if kind == "rq":
            return RQ(variance=v, lengthscale=l,
                      alpha=float(rng.uniform(0.3, 4.0)))
        if kind == "linear":
            return Linear(variance=v)
        return Constant(variance=v)

    if not allow_composite or rng.uniform() < 0.4:
        return leaf()
    combin = rng.choice(["sum", "product", "scaled", "dimselect"])
    if combin == "sum":
        return Sum([leaf(), leaf()])
    if combin == "product":
        return Product([leaf(), leaf()])
    if combin == "scaled":
        return Scaled(float(rng.uniform(0.3, 2.0)), leaf())
    k = max(1, d // 2)
    dims = sorted(rng.choice(d, size=k, replace=False).tolist())
    return DimSelect(dims, leaf())


def chain_dataset(seed, n=18, noise=(0.05, 0.08)):
    """Two outputs where the second depends nonlinearly on the first."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 3.0, n))[:, None]
    y1 = np.sin(1.5 * x[:, 0]) + np.sqrt(noise[0]) * rng.standard_normal(n)
    y2 = (np.cos(2.0 * y1) + 0.2 * x[:, 0]
          + np.sqrt(noise[1]) * rng.standard_normal(n))
    return MultiOutputDataset.from_arrays(x, np.column_stack([y1, y2]))


def handmade_chain(seed=0, n=18, noise=(0.05, 0.08), specs=None, ds=None):
    """A fitted two-layer chain with fixed (untrained) hyperparameters.

    Keeps oracle tests independent of the optimiser: the conditional
    structure holds for any hyperparameter values.
    """
    ds = ds if ds is not None else chain_dataset(seed, n=n, noise=noise)
    ordering = OutputOrdering.identity(ds.n_outputs)
    layers = []
    for pos in range(ds.n_outputs):
        spec = (specs[pos] if specs is not None else
                gpar_nl_spec(1, pos, base="eq", variance=1.0, lengthscale=0.8))
        kernel = build_from_spec(spec, input_dim=ds.n_inputs + pos)
        rows = layer_training_rows(ds, ordering, pos)
        aug = np.hstack([ds.x[rows],
                         ds.y[np.ix_(rows, list(ordering.perm[:pos]))]])
        sigma2 = noise[pos] if pos < len(noise) else 0.1
        problem = GpProblem(kernel, sigma2, aug, ds.y[rows, ordering.perm[pos]])
        fitted = fit(problem)
        layers.append(TrainedLayer(pos, ordering.perm[pos], kernel.to_spec(),
                                   sigma2, fitted,
                                   log_marginal_likelihood(fitted)))
    model = GparModel(ordering, layers, ds.output_names, ds.input_names,
                      denoising=False, training_fingerprint=ds.fingerprint())
    return model, ds


def canonical_file(name, directory, seed=0):
    """A synthetic, fully observed file in a benchmark's canonical layout.

    Outputs are smoothed correlated noise: structurally valid for split
    and pipeline tests, unrelated to the real measurements.
    """
    from gpar.data import BENCHMARKS, save_csv

    layout = BENCHMARKS[name]
    rng = np.random.default_rng(seed)
    n = layout.n_rows
    d = len(layout.input_cols)
    if name == "jura":
        x = rng.uniform(0, 5, size=(n, d))
    else:
        x = np.arange(1, n + 1, dtype=float)[:, None]
    base = rng.standard_normal(n)
    ys = []
    for _ in layout.output_cols:
        smooth = np.convolve(base + 0.3 * rng.standard_normal(n),
                             np.ones(9) / 9, mode="same")
        ys.append(2.0 + smooth + 0.05 * rng.standard_normal(n))
    ds = MultiOutputDataset.from_arrays(x, np.column_stack(ys),
                                        output_names=layout.output_cols,
                                        input_names=layout.input_cols)
    path = directory / layout.filename
    save_csv(ds, path)
    return path, ds


@pytest.fixture
def rng():
    return np.random.default_rng(0)
