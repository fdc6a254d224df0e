"""The chained multi-output model.

The joint over M outputs factorises into M single-output GP problems:
layer i regresses output ``ordering[i]`` on the augmented input
``(x, y_1, ..., y_{i-1})``, where the y's are the earlier-ordered
outputs at the same location. With closed-downwards data the layers
train independently (their marginal likelihoods decouple) and the total
log evidence is the sum over layers.

Prediction runs the chain in order. Where an earlier output is unknown
at a test point, its value is filled in either with the upstream
posterior mean (plug-in) or by ancestral Monte Carlo sampling; where it
is known, the known value feeds the downstream kernels directly.

The denoising variant feeds downstream kernels the posterior means of
the upstream *latent* functions instead of the raw noisy observations,
both at training and at prediction time. Its layers train sequentially
with earlier layers frozen.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import __version__
from .data import (MultiOutputDataset, OutputOrdering, is_closed_downwards,
                   restrict_to_closed_downwards)
from .errors import (ClosedDownwardsViolation, DataError, ModelFormatError,
                     ModelVersionError, NumericalError, SpecError)
from .gp import (FittedGp, GpProblem, PosteriorResult, fit,
                 log_marginal_likelihood, optimize, posterior, posterior_cov)
from .kernels import Kernel, Sum, build_from_spec

MODEL_FORMAT = "gpar-model"
MODEL_VERSION = 1

PLUGIN = "plug-in"
MONTE_CARLO = "monte-carlo"


@dataclass
class TrainOptions:
    restarts: int = 5
    budget: int = 200
    seed: int = 0
    repair: bool = False
    noise_init: float | None = None  # default: 0.1 * var(targets)


@dataclass
class TrainedLayer:
    """One conditional GP of the chain."""

    position: int          # 0-based index in the ordering
    output: int            # dataset column this layer predicts
    kernel_spec: dict      # spec with learned hyperparameters
    noise_variance: float
    fitted: FittedGp
    lml: float
    denoised: bool = False

    @property
    def kernel(self) -> Kernel:
        return self.fitted.problem.kernel


@dataclass
class GparModel:
    ordering: OutputOrdering
    layers: list[TrainedLayer]
    output_names: tuple[str, ...]
    input_names: tuple[str, ...]
    denoising: bool
    training_fingerprint: str
    metadata: dict = field(default_factory=dict)

    @property
    def n_outputs(self):
        return len(self.layers)

    @property
    def n_inputs(self):
        return len(self.input_names)

    def layer_posterior(self, position: int, aug) -> PosteriorResult:
        """Posterior of layer ``position`` at explicit augmented inputs."""
        layer = self.layers[position]
        return posterior(layer.fitted, aug)

    def total_lml(self) -> float:
        return float(sum(layer.lml for layer in self.layers))


@dataclass
class PredictiveDistribution:
    """Per-output predictive summaries over T test points.

    Arrays are (T, M) in dataset column order. ``noisy_var`` includes
    the per-layer observation noise; in plug-in mode it is exactly
    ``latent_var + noise_variance`` and does not account for upstream
    uncertainty, which Monte Carlo mode propagates instead. ``samples``
    is (S, T, M) of noisy output draws when sampling was requested.
    """

    mean: np.ndarray
    latent_var: np.ndarray
    noisy_var: np.ndarray
    mode: str
    output_names: tuple[str, ...]
    samples: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Training


def layer_training_rows(ds: MultiOutputDataset, ordering: OutputOrdering,
                        position: int) -> np.ndarray:
    """Rows where outputs at ordering positions 0..position are observed."""
    cols = list(ordering.perm[:position + 1])
    return np.flatnonzero(np.all(ds.mask[:, cols], axis=1))


def _layer_seed(seed: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def _default_noise(targets):
    var = float(np.var(targets)) if targets.size else 1.0
    return 0.1 * var if var > 0 else 0.1


def _prepare(ds, ordering, specs, options):
    if ordering is None:
        ordering = OutputOrdering.identity(ds.n_outputs)
    if len(ordering) != ds.n_outputs:
        raise DataError(f"ordering covers {len(ordering)} outputs, dataset "
                        f"has {ds.n_outputs}")
    if len(specs) != ds.n_outputs:
        raise SpecError(f"need {ds.n_outputs} kernel specs, got {len(specs)}")
    dropped = 0
    ok, violation = is_closed_downwards(ds, ordering)
    if not ok:
        if not options.repair:
            raise ClosedDownwardsViolation(violation.row, violation.output,
                                           violation.output_name)
        ds, dropped = restrict_to_closed_downwards(ds, ordering)
    return ds, ordering, dropped


def _train_layer(ds, ordering, position, spec, options, aug):
    col = ordering.perm[position]
    rows = layer_training_rows(ds, ordering, position)
    targets = ds.y[rows, col]
    kernel = build_from_spec(spec, input_dim=ds.n_inputs + position)
    noise = options.noise_init or _default_noise(targets)
    problem = GpProblem(kernel, noise, aug[rows], targets)
    try:
        result = optimize(problem, restarts=options.restarts,
                          budget=options.budget,
                          seed=_layer_seed(options.seed, position))
    except NumericalError as err:
        raise NumericalError(
            f"layer {position} (output '{ds.output_names[col]}') failed to "
            f"train: {err}") from err
    fitted = fit(result.problem)
    return TrainedLayer(position, col, result.problem.kernel.to_spec(),
                        result.problem.noise_variance, fitted, result.lml)


def _raw_feeds(ds, ordering):
    """Augmented-input feed matrix: earlier outputs as observed."""
    return ds.y[:, list(ordering.perm)]


def train(ds: MultiOutputDataset, ordering: OutputOrdering | None = None,
          specs: list[dict] | None = None,
          options: TrainOptions | None = None) -> GparModel:
    """Train the chain; layers are independent given closed-downwards data.

    ``specs[i]`` is the kernel spec for the layer at ordering position
    i, over the augmented input of width ``n_inputs + i``.
    """
    options = options or TrainOptions()
    ds, ordering, dropped = _prepare(ds, ordering, specs, options)
    feeds = _raw_feeds(ds, ordering)
    layers = []
    for position in range(ds.n_outputs):
        aug = np.hstack([ds.x, feeds[:, :position]])
        layers.append(_train_layer(ds, ordering, position, specs[position],
                                   options, aug))
    return GparModel(
        ordering, layers, ds.output_names, ds.input_names, denoising=False,
        training_fingerprint=ds.fingerprint(),
        metadata=_metadata(options, dropped))


def train_denoising(ds: MultiOutputDataset,
                    ordering: OutputOrdering | None = None,
                    specs: list[dict] | None = None,
                    options: TrainOptions | None = None) -> GparModel:
    """Train the denoising variant: downstream kernels see posterior means.

    Layers train strictly in order; after layer i is trained (frozen),
    its posterior latent mean at the training locations becomes the
    feed for later layers.
    """
    options = options or TrainOptions()
    ds, ordering, dropped = _prepare(ds, ordering, specs, options)
    feeds = np.full((ds.n, ds.n_outputs), np.nan)
    layers = []
    for position in range(ds.n_outputs):
        rows = layer_training_rows(ds, ordering, position)
        aug_all = np.hstack([ds.x, feeds[:, :position]])
        layer = _train_layer(ds, ordering, position, specs[position], options,
                             aug_all)
        layer.denoised = True
        layers.append(layer)
        # feed for downstream layers: E[latent | data] at the rows where
        # this layer's prefix is observed (a superset of later rows)
        feeds[rows, position] = posterior(layer.fitted, aug_all[rows]).mean
    return GparModel(
        ordering, layers, ds.output_names, ds.input_names, denoising=True,
        training_fingerprint=ds.fingerprint(),
        metadata=_metadata(options, dropped))


def _metadata(options, dropped):
    return {
        "seed": options.seed,
        "restarts": options.restarts,
        "budget": options.budget,
        "dropped_cells": dropped,
        "package_version": __version__,
    }


# ---------------------------------------------------------------------------
# Evidence


def _compatible(model, ds):
    if ds.n_outputs != model.n_outputs or ds.n_inputs != model.n_inputs:
        raise DataError(
            f"dataset shape ({ds.n_inputs} inputs, {ds.n_outputs} outputs) "
            f"does not match the model ({model.n_inputs}, {model.n_outputs})")
    if ds.output_names != model.output_names:
        raise DataError(f"dataset outputs {list(ds.output_names)} do not "
                        f"match the model's {list(model.output_names)}")


def training_feeds(model: GparModel, ds: MultiOutputDataset) -> np.ndarray:
    """(n, M) feed matrix in ordering positions for a compatible dataset.

    Raw observed values for a plain model; recomputed posterior latent
    means (frozen chain) for a denoising model. Entries are only valid
    at rows where the corresponding prefix is observed.
    """
    if not model.denoising:
        return _raw_feeds(ds, model.ordering)
    feeds = np.full((ds.n, model.n_outputs), np.nan)
    for position in range(model.n_outputs):
        rows = layer_training_rows(ds, model.ordering, position)
        aug = np.hstack([ds.x[rows], feeds[rows, :position]])
        feeds[rows, position] = posterior(model.layers[position].fitted,
                                          aug).mean
    return feeds


def total_log_evidence(model: GparModel, ds: MultiOutputDataset) -> float:
    """Sum over layers of the layer marginal likelihood on this dataset.

    Each term is recomputed from the layer's learned kernel, noise, and
    frozen centring constant on the rows the layer would train on, so
    perturbing one layer's hyperparameters changes exactly one term.
    """
    _compatible(model, ds)
    ok, violation = is_closed_downwards(ds, model.ordering)
    if not ok:
        raise ClosedDownwardsViolation(violation.row, violation.output,
                                       violation.output_name)
    feeds = training_feeds(model, ds)
    total = 0.0
    for position, layer in enumerate(model.layers):
        rows = layer_training_rows(ds, model.ordering, position)
        aug = np.hstack([ds.x[rows], feeds[rows, :position]])
        problem = GpProblem(layer.kernel, layer.noise_variance, aug,
                            ds.y[rows, layer.output])
        total += log_marginal_likelihood(fit(problem,
                                             y_mean=layer.fitted.y_mean))
    return float(total)


# ---------------------------------------------------------------------------
# Prediction


def _normalise_known(model, xs, known_outputs):
    t = xs.shape[0]
    m = model.n_outputs
    if known_outputs is None:
        return np.zeros((t, m)), np.zeros((t, m), dtype=bool)
    if isinstance(known_outputs, MultiOutputDataset):
        values, mask = known_outputs.y, known_outputs.mask
    elif isinstance(known_outputs, tuple):
        values, mask = known_outputs
    else:
        values = np.asarray(known_outputs, dtype=float)
        mask = np.isfinite(values)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if values.shape != (t, m) or mask.shape != (t, m):
        raise DataError(f"known outputs must be ({t}, {m}); got "
                        f"{values.shape} and {mask.shape}")
    values = np.where(mask, values, 0.0)
    return values, mask


def _check_test_inputs(model, xs):
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != model.n_inputs:
        raise DataError(f"test inputs have {xs.shape[1]} columns, model "
                        f"expects {model.n_inputs}")
    if not np.all(np.isfinite(xs)):
        raise DataError("test inputs contain non-finite values")
    return xs


def predict_plugin(model: GparModel, xs,
                   known_outputs=None) -> PredictiveDistribution:
    """Chain prediction feeding upstream posterior means downstream.

    ``known_outputs`` optionally supplies observed output values at the
    test points (values+mask, a dataset, or an array with NaN for
    unknown); known values replace the plugged-in means as downstream
    kernel inputs for a plain model. A denoising model always feeds
    posterior means, which is its training-time transform.

    Reported variances are the per-layer conditional variances given
    the plugged-in feeds; they do not include upstream uncertainty.
    """
    xs = _check_test_inputs(model, xs)
    known_vals, known_mask = _normalise_known(model, xs, known_outputs)
    t, m = xs.shape[0], model.n_outputs
    mean = np.zeros((t, m))
    latent_var = np.zeros((t, m))
    noisy_var = np.zeros((t, m))
    feeds = np.zeros((t, m))
    for position, layer in enumerate(model.layers):
        aug = np.hstack([xs, feeds[:, :position]])
        post = posterior(layer.fitted, aug)
        col = layer.output
        mean[:, col] = post.mean
        latent_var[:, col] = post.latent_var
        noisy_var[:, col] = post.noisy_var
        feed = post.mean.copy()
        if not model.denoising:
            feed[known_mask[:, col]] = known_vals[known_mask[:, col], col]
        feeds[:, position] = feed
    return PredictiveDistribution(mean, latent_var, noisy_var, PLUGIN,
                                  model.output_names)


def _joint_latent_samples(fitted, aug, z):
    """One correlated latent draw per row of ``z`` at the given inputs.

    Factorises the posterior covariance by eigendecomposition with
    negative (round-off) eigenvalues clipped to zero, so a posterior
    pinned by noiseless observations reproduces its mean exactly.
    """
    mean, cov = posterior_cov(fitted, aug)
    try:
        eigvals, eigvecs = np.linalg.eigh((cov + cov.T) / 2.0)
    except np.linalg.LinAlgError as err:
        raise NumericalError(
            f"posterior covariance eigendecomposition failed: {err}") from err
    factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    return mean[None, :] + z @ factor.T


def predict_mc(model: GparModel, xs, n_samples: int, seed: int = 0,
               known_outputs=None) -> PredictiveDistribution:
    """Ancestral sampling through the chain; moments from the samples.

    Each sample draws the first layer's outputs jointly over the test
    points (latent draw plus observation noise) and feeds them forward;
    downstream layers then draw conditional on that sample's feeds.
    Deterministic given ``seed``. Known output values, where given,
    replace the sampled feeds (plain models).
    """
    if n_samples < 1:
        raise SpecError(f"n_samples must be >= 1, got {n_samples}")
    xs = _check_test_inputs(model, xs)
    known_vals, known_mask = _normalise_known(model, xs, known_outputs)
    t, m = xs.shape[0], model.n_outputs
    s = int(n_samples)
    rng = np.random.default_rng(seed)

    latent_samples = np.zeros((s, t, m))   # ordered by layer position
    y_samples = np.zeros((s, t, m))
    feeds = np.zeros((s, t, m))
    for position, layer in enumerate(model.layers):
        z = rng.standard_normal((s, t))
        noise = rng.standard_normal((s, t))
        sigma = np.sqrt(layer.noise_variance)
        if t == 1:
            # marginal sampling; all samples batch into one evaluation
            aug = np.concatenate([np.repeat(xs, s, axis=0),
                                  feeds[:, 0, :position]], axis=1)
            post = posterior(layer.fitted, aug)
            latent = (post.mean + np.sqrt(post.latent_var) * z[:, 0])[:, None]
        elif position == 0:
            latent = _joint_latent_samples(layer.fitted, xs, z)
        else:
            latent = np.empty((s, t))
            for i in range(s):
                aug = np.hstack([xs, feeds[i, :, :position]])
                latent[i] = _joint_latent_samples(layer.fitted, aug,
                                                  z[i][None, :])[0]
        y = latent + sigma * noise
        latent_samples[:, :, position] = latent
        y_samples[:, :, position] = y
        col = layer.output
        feed = latent if model.denoising else y
        if not model.denoising and known_mask[:, col].any():
            feed = feed.copy()
            feed[:, known_mask[:, col]] = known_vals[known_mask[:, col], col]
        feeds[:, :, position] = feed

    mean = np.zeros((t, m))
    latent_var = np.zeros((t, m))
    noisy_var = np.zeros((t, m))
    samples = np.zeros((s, t, m))
    for position, layer in enumerate(model.layers):
        col = layer.output
        mean[:, col] = y_samples[:, :, position].mean(axis=0)
        latent_var[:, col] = latent_samples[:, :, position].var(axis=0)
        noisy_var[:, col] = y_samples[:, :, position].var(axis=0)
        samples[:, :, col] = y_samples[:, :, position]
    return PredictiveDistribution(mean, latent_var, noisy_var, MONTE_CARLO,
                                  model.output_names, samples=samples)


# ---------------------------------------------------------------------------
# Additive decomposition


@dataclass
class ComponentPosterior:
    index: int
    label: str
    mean: np.ndarray
    latent_var: np.ndarray


def decompose_posterior(model: GparModel, position: int, xs,
                        known_outputs=None, component: int | None = None):
    """Posterior of each additive kernel component of one layer.

    The layer's kernel must be a top-level Sum. Components share the
    layer's training conditioning; their means add up to the full layer
    posterior mean (the centring constant is carried by component 0).
    Feeds for the augmented test inputs come from the plug-in chain
    (with known values where provided).
    """
    layer = model.layers[position]
    kernel = layer.kernel
    if not isinstance(kernel, Sum):
        raise SpecError(
            f"layer {position} kernel is {type(kernel).__name__}, not a Sum; "
            f"additive decomposition unavailable")
    xs = _check_test_inputs(model, xs)
    known_vals, known_mask = _normalise_known(model, xs, known_outputs)

    feeds = np.zeros((xs.shape[0], position))
    for p in range(position):
        upstream = model.layers[p]
        aug_p = np.hstack([xs, feeds[:, :p]])
        feed = posterior(upstream.fitted, aug_p).mean
        if not model.denoising:
            sel = known_mask[:, upstream.output]
            feed[sel] = known_vals[sel, upstream.output]
        feeds[:, p] = feed
    aug = np.hstack([xs, feeds])

    fitted = layer.fitted
    children = kernel.children
    wanted = range(len(children)) if component is None else [component]
    out = []
    for idx in wanted:
        try:
            child = children[idx]
        except IndexError:
            raise SpecError(f"layer {position} has {len(children)} "
                            f"components; no component {idx}") from None
        ks = child.gram(fitted.problem.x, aug) if fitted.n else None
        if fitted.n:
            mean = ks.T @ fitted.alpha
            v = solve_triangular(fitted.chol, ks, lower=True,
                                 check_finite=False)
            var = np.clip(child.diag(aug) - np.sum(v * v, axis=0), 0.0, None)
        else:
            mean = np.zeros(xs.shape[0])
            var = child.diag(aug)
        if idx == 0:
            mean = mean + fitted.y_mean
        out.append(ComponentPosterior(idx, f"component-{idx}", mean, var))
    return out


# ---------------------------------------------------------------------------
# Persistence


def _encode_array(a):
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(obj):
    try:
        raw = base64.b64decode(obj["data"].encode("ascii"), validate=True)
        a = np.frombuffer(raw, dtype="<f8").reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"corrupt array payload: {err}") from None
    return a.astype(float)


def save(model: GparModel, path) -> None:
    """Persist a trained model as a versioned JSON container.

    Training inputs and targets are embedded (base64 float64), so a
    loaded model refactorises to bit-identical predictions.
    """
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "package_version": __version__,
        "ordering": list(model.ordering.perm),
        "output_names": list(model.output_names),
        "input_names": list(model.input_names),
        "denoising": model.denoising,
        "training_fingerprint": model.training_fingerprint,
        "metadata": model.metadata,
        "layers": [
            {
                "position": layer.position,
                "output": layer.output,
                "kernel": layer.kernel_spec,
                "noise_variance": layer.noise_variance,
                "lml": layer.lml,
                "jitter": layer.fitted.jitter,
                "denoised": layer.denoised,
                "x": _encode_array(layer.fitted.problem.x),
                "targets": _encode_array(layer.fitted.problem.y),
            }
            for layer in model.layers
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load(path) -> GparModel:
    """Load a model saved by :func:`save`; refits the cached factorisations."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ModelFormatError(f"{path}: corrupt model file: {err}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} file")
    version = doc.get("version")
    if version != MODEL_VERSION:
        raise ModelVersionError(version, MODEL_VERSION)
    try:
        n_inputs = len(doc["input_names"])
        layers = []
        for entry in sorted(doc["layers"], key=lambda e: e["position"]):
            kernel = build_from_spec(
                entry["kernel"], input_dim=n_inputs + entry["position"])
            problem = GpProblem(kernel, float(entry["noise_variance"]),
                                _decode_array(entry["x"]),
                                _decode_array(entry["targets"]))
            layers.append(TrainedLayer(
                int(entry["position"]), int(entry["output"]), entry["kernel"],
                float(entry["noise_variance"]), fit(problem),
                float(entry["lml"]), bool(entry.get("denoised", False))))
        model = GparModel(
            OutputOrdering(tuple(doc["ordering"])), layers,
            tuple(doc["output_names"]), tuple(doc["input_names"]),
            bool(doc["denoising"]), doc["training_fingerprint"],
            doc.get("metadata", {}))
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"{path}: corrupt model file: {err}") from None
    if len({layer.output for layer in model.layers}) != model.n_outputs:
        raise ModelFormatError(f"{path}: layers do not cover all outputs")
    return model
