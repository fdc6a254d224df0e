"""Compositional covariance functions over augmented inputs.

A kernel here acts on rows of an ``(n, d)`` array. For a chained
multi-output model the input of layer ``i`` is the augmented vector
``(x, y_1, ..., y_{i-1})``: the original inputs followed by the values of
the preceding outputs at the same location. ``DimSelect`` restricts a
kernel to a subset of those coordinates, which is how the layer kernels
below separate the ``x`` part from the ``y`` part.

All hyperparameters are strictly positive and are optimised in log
coordinates; gradient methods therefore return derivatives with respect
to ``log(parameter)``. Kernels are immutable: ``with_params`` returns a
new tree.

Specs
-----
Every kernel serialises to a JSON-compatible dict::

    {"kind": "Sum", "children": [
        {"kind": "EQ", "params": {"variance": 1.0, "lengthscale": 0.5}},
        {"kind": "DimSelect", "dims": [1, 2], "children": [
            {"kind": "RQ",
             "params": {"variance": 1.0, "lengthscale": [1.0, 2.0],
                        "alpha": 1.0}}]}]}

``kind`` is one of EQ, RQ, Linear, Constant, Sum, Product, Scaled,
DimSelect. ``lengthscale`` may be a number (shared across dimensions,
the default) or a list (one per dimension). Sum and Product take two or
more children; Scaled and DimSelect take exactly one.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, KernelSpecError

LEAF_KINDS = ("EQ", "RQ", "Linear", "Constant")
COMPOSITE_KINDS = ("Sum", "Product", "Scaled", "DimSelect")


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionMismatch("1 or 2 axes", x.ndim, what="input array")
    return x


def _positive(name, value):
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise KernelSpecError(f"hyperparameter '{name}' must be a positive "
                              f"finite number, got {value!r}")
    return value


class Kernel(ABC):
    """A positive semi-definite covariance function on R^d.

    ``input_dim`` is the declared dimensionality; ``None`` means the
    kernel accepts any width consistent with its structure.
    """

    input_dim: int | None = None

    @abstractmethod
    def gram(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Covariance matrix between the rows of ``a`` and ``b``."""

    @abstractmethod
    def gram_with_grads(self, a, b):
        """Gram matrix plus ``{name: dK/dlog(param)}`` for every param."""

    @abstractmethod
    def diag(self, a: np.ndarray) -> np.ndarray:
        """``k(a_i, a_i)`` for each row, without the full matrix."""

    @abstractmethod
    def params(self) -> dict[str, float]:
        """Flattened parameter map; names are paths into the tree."""

    @abstractmethod
    def with_params(self, updates: dict[str, float]) -> "Kernel":
        """New kernel with the named parameters replaced."""

    @abstractmethod
    def to_spec(self) -> dict:
        """Serialisable spec; ``build_from_spec`` inverts this."""

    def __call__(self, a, b) -> float:
        """Evaluate the kernel for a single pair of points."""
        a, b = self._check_pair(a, b)
        return float(self.gram(a, b)[0, 0])

    def grad_hyper(self, a, b) -> dict[str, float]:
        """Per-parameter derivative of ``__call__`` in log coordinates."""
        a, b = self._check_pair(a, b)
        _, grads = self.gram_with_grads(a, b)
        return {name: float(g[0, 0]) for name, g in grads.items()}

    def _check_pair(self, a, b):
        a, b = _as_2d(a), _as_2d(b)
        if a.shape[1] != b.shape[1]:
            raise DimensionMismatch(a.shape[1], b.shape[1])
        self.check_width(a.shape[1])
        return a, b

    def check_width(self, d: int) -> None:
        if self.input_dim is not None and d != self.input_dim:
            raise DimensionMismatch(self.input_dim, d)

    def __repr__(self):
        inner = ", ".join(f"{k}={v:.4g}" for k, v in self.params().items())
        return f"{type(self).__name__}({inner})"


def _sqdist(a, b):
    # round-off can push tiny distances below zero; clamp before use
    return np.clip(cdist(a, b, metric="sqeuclidean"), 0.0, None)


class _Leaf(Kernel):
    def with_params(self, updates):
        current = self.params()
        unknown = set(updates) - set(current)
        if unknown:
            raise KernelSpecError(f"unknown parameter(s) {sorted(unknown)}")
        current.update(updates)
        return self._rebuild(current)


class EQ(_Leaf):
    """Exponentiated quadratic: ``v * exp(-0.5 * sum_d (a_d-b_d)^2 / l_d^2)``."""

    def __init__(self, variance=1.0, lengthscale=1.0, input_dim=None):
        self.variance = _positive("variance", variance)
        if np.ndim(lengthscale) == 0:
            self.lengthscale = _positive("lengthscale", lengthscale)
        else:
            self.lengthscale = np.array(
                [_positive("lengthscale", l) for l in lengthscale], dtype=float)
            if input_dim is not None and input_dim != self.lengthscale.size:
                raise KernelSpecError(
                    f"lengthscale has {self.lengthscale.size} entries but "
                    f"input_dim is {input_dim}")
            input_dim = self.lengthscale.size
        self.input_dim = input_dim

    @property
    def _ard(self):
        return np.ndim(self.lengthscale) > 0

    def _scaled_sqdist(self, a, b):
        if self._ard:
            return _sqdist(a / self.lengthscale, b / self.lengthscale)
        return _sqdist(a, b) / self.lengthscale**2

    def gram(self, a, b):
        a, b = self._check_pair(a, b)
        return self.variance * np.exp(-0.5 * self._scaled_sqdist(a, b))

    def gram_with_grads(self, a, b):
        a, b = self._check_pair(a, b)
        r2 = self._scaled_sqdist(a, b)
        k = self.variance * np.exp(-0.5 * r2)
        grads = {"variance": k}
        if self._ard:
            for d in range(a.shape[1]):
                dd = (a[:, d, None] - b[None, :, d]) ** 2 / self.lengthscale[d] ** 2
                grads[f"lengthscale.{d}"] = k * dd
        else:
            grads["lengthscale"] = k * r2
        return k, grads

    def diag(self, a):
        a = _as_2d(a)
        self.check_width(a.shape[1])
        return np.full(a.shape[0], self.variance)

    def params(self):
        out = {"variance": self.variance}
        if self._ard:
            for d, l in enumerate(self.lengthscale):
                out[f"lengthscale.{d}"] = float(l)
        else:
            out["lengthscale"] = self.lengthscale
        return out

    def _rebuild(self, p):
        if self._ard:
            ls = [p[f"lengthscale.{d}"] for d in range(self.lengthscale.size)]
        else:
            ls = p["lengthscale"]
        return type(self)(variance=p["variance"], lengthscale=ls,
                          input_dim=self.input_dim)

    def to_spec(self):
        ls = self.lengthscale
        return {"kind": "EQ", "params": {
            "variance": self.variance,
            "lengthscale": [float(l) for l in ls] if self._ard else ls}}


class RQ(EQ):
    """Rational quadratic: ``v * (1 + r2 / (2*alpha))^(-alpha)``.

    ``r2`` is the lengthscale-weighted squared distance. The shape
    parameter ``alpha`` interpolates between heavy mixtures of
    lengthscales (small ``alpha``) and the EQ limit (large ``alpha``).
    """

    def __init__(self, variance=1.0, lengthscale=1.0, alpha=1.0, input_dim=None):
        super().__init__(variance=variance, lengthscale=lengthscale,
                         input_dim=input_dim)
        self.alpha = _positive("alpha", alpha)

    def gram(self, a, b):
        a, b = self._check_pair(a, b)
        base = 1.0 + self._scaled_sqdist(a, b) / (2.0 * self.alpha)
        return self.variance * base ** (-self.alpha)

    def gram_with_grads(self, a, b):
        a, b = self._check_pair(a, b)
        r2 = self._scaled_sqdist(a, b)
        base = 1.0 + r2 / (2.0 * self.alpha)
        k = self.variance * base ** (-self.alpha)
        inner = self.variance * base ** (-self.alpha - 1.0)
        grads = {"variance": k}
        if self._ard:
            for d in range(a.shape[1]):
                dd = (a[:, d, None] - b[None, :, d]) ** 2 / self.lengthscale[d] ** 2
                grads[f"lengthscale.{d}"] = inner * dd
        else:
            grads["lengthscale"] = inner * r2
        grads["alpha"] = k * (-self.alpha * np.log(base)) + inner * r2 / 2.0
        return k, grads

    def params(self):
        out = super().params()
        out["alpha"] = self.alpha
        return out

    def _rebuild(self, p):
        if self._ard:
            ls = [p[f"lengthscale.{d}"] for d in range(self.lengthscale.size)]
        else:
            ls = p["lengthscale"]
        return RQ(variance=p["variance"], lengthscale=ls, alpha=p["alpha"],
                  input_dim=self.input_dim)

    def to_spec(self):
        spec = super().to_spec()
        spec["kind"] = "RQ"
        spec["params"]["alpha"] = self.alpha
        return spec


class Linear(_Leaf):
    """Dot-product kernel ``v * <a, b>``; zero-mean linear functions."""

    def __init__(self, variance=1.0, input_dim=None):
        self.variance = _positive("variance", variance)
        self.input_dim = input_dim

    def gram(self, a, b):
        a, b = self._check_pair(a, b)
        return self.variance * (a @ b.T)

    def gram_with_grads(self, a, b):
        k = self.gram(a, b)
        return k, {"variance": k}

    def diag(self, a):
        a = _as_2d(a)
        self.check_width(a.shape[1])
        return self.variance * np.sum(a * a, axis=1)

    def params(self):
        return {"variance": self.variance}

    def _rebuild(self, p):
        return Linear(variance=p["variance"], input_dim=self.input_dim)

    def to_spec(self):
        return {"kind": "Linear", "params": {"variance": self.variance}}


class Constant(_Leaf):
    """Constant covariance ``v``; a random but input-independent offset."""

    def __init__(self, variance=1.0, input_dim=None):
        self.variance = _positive("variance", variance)
        self.input_dim = input_dim

    def gram(self, a, b):
        a, b = self._check_pair(a, b)
        return np.full((a.shape[0], b.shape[0]), self.variance)

    def gram_with_grads(self, a, b):
        k = self.gram(a, b)
        return k, {"variance": k}

    def diag(self, a):
        a = _as_2d(a)
        self.check_width(a.shape[1])
        return np.full(a.shape[0], self.variance)

    def params(self):
        return {"variance": self.variance}

    def _rebuild(self, p):
        return Constant(variance=p["variance"], input_dim=self.input_dim)

    def to_spec(self):
        return {"kind": "Constant", "params": {"variance": self.variance}}


class _Combinator(Kernel):
    """Shared parameter plumbing for nodes with children.

    Child parameters are exposed with the child's index as a path
    prefix, so ``"1.lengthscale"`` is the lengthscale of child 1.
    """

    def __init__(self, children, input_dim=None):
        self.children = tuple(children)
        dims = {c.input_dim for c in self.children if c.input_dim is not None}
        if len(dims) > 1:
            raise KernelSpecError(f"children declare conflicting input "
                                  f"dimensions {sorted(dims)}")
        if input_dim is None and dims:
            input_dim = dims.pop()
        self.input_dim = input_dim

    def params(self):
        out = {}
        for i, child in enumerate(self.children):
            for name, value in child.params().items():
                out[f"{i}.{name}"] = value
        return out

    def with_params(self, updates):
        split: list[dict] = [{} for _ in self.children]
        for name, value in updates.items():
            idx, _, rest = name.partition(".")
            try:
                split[int(idx)][rest] = value
            except (ValueError, IndexError):
                raise KernelSpecError(f"unknown parameter '{name}'") from None
        new_children = [c.with_params(u) if u else c
                        for c, u in zip(self.children, split)]
        return self._rebuild(new_children)

    def _prefixed(self, grads_per_child):
        out = {}
        for i, grads in enumerate(grads_per_child):
            for name, g in grads.items():
                out[f"{i}.{name}"] = g
        return out


class Sum(_Combinator):
    """Pointwise sum of component kernels; independent additive effects."""

    def __init__(self, children, input_dim=None):
        if len(children) < 2:
            raise KernelSpecError("Sum needs at least 2 children")
        super().__init__(children, input_dim)

    def gram(self, a, b):
        return sum(c.gram(a, b) for c in self.children)

    def gram_with_grads(self, a, b):
        parts = [c.gram_with_grads(a, b) for c in self.children]
        total = sum(k for k, _ in parts)
        return total, self._prefixed([g for _, g in parts])

    def diag(self, a):
        return sum(c.diag(a) for c in self.children)

    def _rebuild(self, children):
        return Sum(children, input_dim=self.input_dim)

    def to_spec(self):
        return {"kind": "Sum", "children": [c.to_spec() for c in self.children]}


class Product(_Combinator):
    """Pointwise product of component kernels."""

    def __init__(self, children, input_dim=None):
        if len(children) < 2:
            raise KernelSpecError("Product needs at least 2 children")
        super().__init__(children, input_dim)

    def gram(self, a, b):
        out = self.children[0].gram(a, b)
        for c in self.children[1:]:
            out = out * c.gram(a, b)
        return out

    def gram_with_grads(self, a, b):
        parts = [c.gram_with_grads(a, b) for c in self.children]
        mats = [k for k, _ in parts]
        # leave-one-out products, so zeros in one factor stay harmless
        n = len(mats)
        prefix = [None] * (n + 1)
        suffix = [None] * (n + 1)
        prefix[0] = 1.0
        suffix[n] = 1.0
        for i in range(n):
            prefix[i + 1] = prefix[i] * mats[i]
            suffix[n - 1 - i] = suffix[n - i] * mats[n - 1 - i]
        grads_per_child = []
        for i, (_, grads) in enumerate(parts):
            other = prefix[i] * suffix[i + 1]
            grads_per_child.append({name: g * other for name, g in grads.items()})
        return prefix[n], self._prefixed(grads_per_child)

    def diag(self, a):
        out = self.children[0].diag(a)
        for c in self.children[1:]:
            out = out * c.diag(a)
        return out

    def _rebuild(self, children):
        return Product(children, input_dim=self.input_dim)

    def to_spec(self):
        return {"kind": "Product",
                "children": [c.to_spec() for c in self.children]}


class Scaled(_Combinator):
    """``v`` times a single child kernel."""

    def __init__(self, variance, child, input_dim=None):
        self.variance = _positive("variance", variance)
        super().__init__([child], input_dim)

    @property
    def child(self):
        return self.children[0]

    def gram(self, a, b):
        return self.variance * self.child.gram(a, b)

    def gram_with_grads(self, a, b):
        kc, grads = self.child.gram_with_grads(a, b)
        k = self.variance * kc
        out = {"variance": k}
        out.update({f"0.{name}": self.variance * g for name, g in grads.items()})
        return k, out

    def diag(self, a):
        return self.variance * self.child.diag(a)

    def params(self):
        out = {"variance": self.variance}
        out.update(super().params())
        return out

    def with_params(self, updates):
        updates = dict(updates)
        variance = updates.pop("variance", self.variance)
        child = super().with_params(updates).child if updates else self.child
        return Scaled(variance, child, input_dim=self.input_dim)

    def _rebuild(self, children):
        return Scaled(self.variance, children[0], input_dim=self.input_dim)

    def to_spec(self):
        return {"kind": "Scaled", "params": {"variance": self.variance},
                "children": [self.child.to_spec()]}


class DimSelect(_Combinator):
    """Apply the child kernel to a subset of input coordinates."""

    def __init__(self, dims, child, input_dim=None):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) == 0:
            raise KernelSpecError("DimSelect needs at least one dimension")
        if len(set(self.dims)) != len(self.dims):
            raise KernelSpecError(f"duplicate dims {list(self.dims)}")
        if any(d < 0 for d in self.dims):
            raise KernelSpecError(f"negative dims {list(self.dims)}")
        if input_dim is not None and max(self.dims) >= input_dim:
            raise KernelSpecError(
                f"dim {max(self.dims)} out of range for input_dim {input_dim}")
        if child.input_dim is not None and child.input_dim != len(self.dims):
            raise KernelSpecError(
                f"child expects {child.input_dim} dims, selector picks "
                f"{len(self.dims)}")
        # bypass _Combinator dim reconciliation: the child sees len(dims)
        self.children = (child,)
        self.input_dim = input_dim

    @property
    def child(self):
        return self.children[0]

    def _select(self, a):
        a = _as_2d(a)
        self.check_width(a.shape[1])
        if max(self.dims) >= a.shape[1]:
            raise DimensionMismatch(max(self.dims) + 1, a.shape[1])
        return a[:, self.dims]

    def gram(self, a, b):
        return self.child.gram(self._select(a), self._select(b))

    def gram_with_grads(self, a, b):
        k, grads = self.child.gram_with_grads(self._select(a), self._select(b))
        return k, self._prefixed([grads])

    def diag(self, a):
        return self.child.diag(self._select(a))

    def _rebuild(self, children):
        return DimSelect(self.dims, children[0], input_dim=self.input_dim)

    def to_spec(self):
        return {"kind": "DimSelect", "dims": list(self.dims),
                "children": [self.child.to_spec()]}


def build_from_spec(spec: dict, input_dim: int | None = None) -> Kernel:
    """Construct an evaluable kernel from its spec dict.

    ``input_dim``, when given, is the width of the (augmented) input the
    kernel will see; DimSelect indices and ARD lengthscale lengths are
    validated against it. Raises :class:`KernelSpecError` with a path
    into the tree on any malformed node.
    """
    return _build(spec, input_dim, path="")


def _build(spec, input_dim, path):
    where = path or "root"
    if not isinstance(spec, dict):
        raise KernelSpecError("spec node must be a mapping", where)
    kind = spec.get("kind")
    if kind not in LEAF_KINDS + COMPOSITE_KINDS:
        raise KernelSpecError(f"unknown kernel kind {kind!r}", where)
    params = spec.get("params", {})
    children_spec = spec.get("children", [])
    if kind in LEAF_KINDS and children_spec:
        raise KernelSpecError(f"{kind} does not take children", where)

    def child(i, dim):
        prefix = f"{path}." if path else ""
        return _build(children_spec[i], dim, f"{prefix}children[{i}]")

    try:
        if kind == "EQ":
            return EQ(input_dim=input_dim, **params)
        if kind == "RQ":
            return RQ(input_dim=input_dim, **params)
        if kind == "Linear":
            return Linear(input_dim=input_dim, **params)
        if kind == "Constant":
            return Constant(input_dim=input_dim, **params)
        if kind in ("Sum", "Product"):
            if len(children_spec) < 2:
                raise KernelSpecError(f"{kind} needs >= 2 children", where)
            kids = [child(i, input_dim) for i in range(len(children_spec))]
            cls = Sum if kind == "Sum" else Product
            return cls(kids, input_dim=input_dim)
        if kind == "Scaled":
            if len(children_spec) != 1:
                raise KernelSpecError("Scaled needs exactly 1 child", where)
            return Scaled(params.get("variance", 1.0), child(0, input_dim),
                          input_dim=input_dim)
        # DimSelect
        if len(children_spec) != 1:
            raise KernelSpecError("DimSelect needs exactly 1 child", where)
        dims = spec.get("dims")
        if not dims:
            raise KernelSpecError("DimSelect needs a non-empty 'dims' list",
                                  where)
        return DimSelect(dims, child(0, len(dims)), input_dim=input_dim)
    except KernelSpecError as err:
        if err.path:
            raise
        raise KernelSpecError(str(err), where) from None
    except TypeError as err:
        raise KernelSpecError(f"bad parameters for {kind}: {err}", where) from None


# ---------------------------------------------------------------------------
# Layer kernels for the chained multi-output model.
#
# The augmented input of layer i is (x_1..x_D, y_1..y_{i-1}); x occupies
# dims 0..D-1 and the preceding outputs occupy dims D..D+i-2.


def _leaf_spec(kind, variance, lengthscale, alpha):
    kind = kind.lower()
    if kind == "eq":
        return {"kind": "EQ", "params": {"variance": variance,
                                         "lengthscale": lengthscale}}
    if kind == "rq":
        return {"kind": "RQ", "params": {"variance": variance,
                                         "lengthscale": lengthscale,
                                         "alpha": alpha}}
    raise KernelSpecError(f"unsupported base kernel {kind!r}")


def _on_dims(dims, leaf):
    return {"kind": "DimSelect", "dims": list(dims), "children": [leaf]}


def gpar_l_spec(n_inputs, n_prev, base="eq", variance=1.0, lengthscale=1.0,
                alpha=1.0):
    """Layer spec with linear, input-varying dependence on earlier outputs.

    ``k(x, x') + sum_j k_j(x, x') * y_j * y_j'``: each earlier output
    enters through a dot-product factor whose coefficient varies over x.
    """
    x_dims = list(range(n_inputs))
    terms = [_on_dims(x_dims, _leaf_spec(base, variance, lengthscale, alpha))]
    for j in range(n_prev):
        coeff = _on_dims(x_dims, _leaf_spec(base, variance, lengthscale, alpha))
        lin = _on_dims([n_inputs + j],
                       {"kind": "Linear", "params": {"variance": 1.0}})
        terms.append({"kind": "Product", "children": [coeff, lin]})
    if len(terms) == 1:
        return terms[0]
    return {"kind": "Sum", "children": terms}


def gpar_nl_spec(n_inputs, n_prev, base="eq", variance=1.0, lengthscale=1.0,
                 alpha=1.0):
    """Layer spec with nonlinear, input-constant output dependence.

    ``k_x(x, x') + k_y(y, y')``: an additive kernel on the earlier
    outputs captures arbitrary smooth relationships with them.
    """
    x_dims = list(range(n_inputs))
    x_term = _on_dims(x_dims, _leaf_spec(base, variance, lengthscale, alpha))
    if n_prev == 0:
        return x_term
    y_dims = list(range(n_inputs, n_inputs + n_prev))
    y_term = _on_dims(y_dims, _leaf_spec(base, variance, lengthscale, alpha))
    return {"kind": "Sum", "children": [x_term, y_term]}


def gpar_l_nl_spec(n_inputs, n_prev, base="eq", variance=1.0, lengthscale=1.0,
                   alpha=1.0):
    """Layer spec combining the linear and nonlinear dependence forms."""
    l_spec = gpar_l_spec(n_inputs, n_prev, base, variance, lengthscale, alpha)
    if n_prev == 0:
        return l_spec
    y_dims = list(range(n_inputs, n_inputs + n_prev))
    y_term = _on_dims(y_dims, _leaf_spec(base, variance, lengthscale, alpha))
    children = list(l_spec["children"]) if l_spec.get("kind") == "Sum" else [l_spec]
    return {"kind": "Sum", "children": children + [y_term]}


def joint_rq_spec(n_inputs, n_prev, variance=1.0, lengthscale=1.0, alpha=1.0):
    """``k_1(x, x') + k_2((x, y), (x', y'))``: a sum of two RQ kernels,
    the second over the full augmented input."""
    x_dims = list(range(n_inputs))
    x_term = _on_dims(x_dims, _leaf_spec("rq", variance, lengthscale, alpha))
    if n_prev == 0:
        return x_term
    joint = _leaf_spec("rq", variance, lengthscale, alpha)
    return {"kind": "Sum", "children": [x_term, joint]}


LAYER_SPEC_BUILDERS = {
    "igp": lambda n_in, n_prev, **kw: gpar_nl_spec(n_in, 0, **kw),
    "gpar-l": gpar_l_spec,
    "gpar-nl": gpar_nl_spec,
    "gpar-l-nl": gpar_l_nl_spec,
    "joint-rq": joint_rq_spec,
}


def layer_specs_for_variant(variant, n_inputs, n_outputs, **kwargs):
    """Kernel specs for all layers of a named model variant.

    ``igp`` ignores earlier outputs entirely; the others couple layer i
    to outputs 1..i-1 in the way their name describes.
    """
    try:
        builder = LAYER_SPEC_BUILDERS[variant]
    except KeyError:
        raise KernelSpecError(
            f"unknown variant {variant!r}; expected one of "
            f"{sorted(LAYER_SPEC_BUILDERS)}") from None
    return [builder(n_inputs, i, **kwargs) for i in range(n_outputs)]
