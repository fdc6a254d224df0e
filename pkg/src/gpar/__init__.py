"""Multi-output GP regression by autoregressive chaining.

The joint distribution over M outputs is factorised, via the product
rule, into M single-output GP regression problems: each output is
modelled conditional on the inputs and the values of the earlier
outputs at the same locations. Training decouples per output; prediction
runs the chain sequentially, propagating either posterior means or
Monte Carlo samples.
"""

__version__ = "0.1.0"

from . import errors
from .data import (MultiOutputDataset, OutputOrdering, benchmark_ordering,
                   benchmark_split, is_closed_downwards, load_csv,
                   restrict_to_closed_downwards, save_csv)
from .gp import (FittedGp, GpProblem, fit, lml_gradient,
                 log_marginal_likelihood, optimize, posterior)
from .kernels import (EQ, RQ, Constant, DimSelect, Kernel, Linear, Product,
                      Scaled, Sum, build_from_spec, layer_specs_for_variant)
from .model import (GparModel, PredictiveDistribution, TrainOptions,
                    TrainedLayer, decompose_posterior, load, predict_mc,
                    predict_plugin, save, total_log_evidence, train,
                    train_denoising)
from .synth import SynthConfig, gen_functional, gen_noise_scheme, mae, mll, smse

__all__ = [
    "__version__",
    "errors",
    "MultiOutputDataset", "OutputOrdering", "load_csv", "save_csv",
    "is_closed_downwards", "restrict_to_closed_downwards",
    "benchmark_split", "benchmark_ordering",
    "Kernel", "EQ", "RQ", "Linear", "Constant", "Sum", "Product", "Scaled",
    "DimSelect", "build_from_spec", "layer_specs_for_variant",
    "GpProblem", "FittedGp", "fit", "log_marginal_likelihood",
    "lml_gradient", "posterior", "optimize",
    "GparModel", "TrainedLayer", "TrainOptions", "PredictiveDistribution",
    "train", "train_denoising", "total_log_evidence", "predict_plugin",
    "predict_mc", "decompose_posterior", "save", "load",
    "SynthConfig", "gen_functional", "gen_noise_scheme",
    "smse", "mae", "mll",
]
