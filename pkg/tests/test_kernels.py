"""Kernel algebra: formulas, composition, gradients, specs."""

import numpy as np
import pytest

from gpar.errors import DimensionMismatch, KernelSpecError
from gpar.kernels import (EQ, RQ, Constant, DimSelect, Linear, Product,
                          Scaled, Sum, build_from_spec, gpar_l_spec,
                          gpar_nl_spec, gpar_l_nl_spec,
                          layer_specs_for_variant)

from conftest import random_kernel


class TestLeafFormulas:
    def test_eq_unit_distance(self):
        k = EQ(variance=1.0, lengthscale=1.0)
        assert k([0.0], [1.0]) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_rq_unit_distance(self):
        k = RQ(variance=1.0, lengthscale=1.0, alpha=1.0)
        assert k([0.0], [1.0]) == pytest.approx(1.0 / 1.5, abs=1e-12)

    def test_linear_is_dot_product(self):
        k = Linear(variance=2.0)
        assert k([1.0, 2.0], [3.0, -1.0]) == pytest.approx(2.0 * 1.0)

    def test_constant(self):
        k = Constant(variance=0.7)
        assert k([5.0], [-3.0]) == 0.7

    def test_eq_ard_lengthscales(self):
        k = EQ(variance=1.0, lengthscale=[1.0, 2.0])
        expected = np.exp(-0.5 * (1.0 + 0.25))
        assert k([0.0, 0.0], [1.0, 1.0]) == pytest.approx(expected, abs=1e-12)


class TestLinearCouplingForm:
    def test_constant_coefficient_reduces_to_offset(self):
        # second-layer kernel with a constant coefficient on the single
        # preceding output: k2(x,x') + 1 * y1 * y1'
        base = EQ(variance=1.3, lengthscale=0.9)
        composite = Sum([
            DimSelect([0], EQ(variance=1.3, lengthscale=0.9)),
            Product([DimSelect([0], Constant(variance=1.0)),
                     DimSelect([1], Linear(variance=1.0))]),
        ])
        a = [0.4, 2.0]   # (x, y1)
        b = [1.1, 3.0]
        assert composite(a, b) == pytest.approx(base([a[0]], [b[0]]) + 6.0,
                                                abs=1e-12)

    def test_zero_upstream_collapses_to_x_kernel(self):
        spec = gpar_l_spec(1, 3, base="eq", variance=1.2, lengthscale=0.7)
        k = build_from_spec(spec, input_dim=4)
        base = EQ(variance=1.2, lengthscale=0.7)
        rng = np.random.default_rng(1)
        for _ in range(10):
            xa, xb = rng.normal(size=2)
            a = [xa, 0.0, 0.0, 0.0]
            b = [xb, 0.0, 0.0, 0.0]
            assert k(a, b) == pytest.approx(base([xa], [xb]), abs=1e-14)


class TestNonlinearCouplingForm:
    def test_additive_separation(self):
        spec = gpar_nl_spec(2, 2, base="eq")
        k = build_from_spec(spec, input_dim=4)
        rng = np.random.default_rng(2)
        y1, y2 = rng.normal(size=(2, 2))
        xa, xb, xc, xd = rng.normal(size=(4, 2))
        # the y-contribution is the same whatever the x-parts are
        diff1 = (k(np.r_[xa, y1], np.r_[xb, y2])
                 - k(np.r_[xa, 2 * y1], np.r_[xb, 2 * y2]))
        diff2 = (k(np.r_[xc, y1], np.r_[xd, y2])
                 - k(np.r_[xc, 2 * y1], np.r_[xd, 2 * y2]))
        assert diff1 == pytest.approx(diff2, abs=1e-12)
        # and symmetrically for the x-contribution
        diff1 = (k(np.r_[xa, y1], np.r_[xb, y2])
                 - k(np.r_[xc, y1], np.r_[xd, y2]))
        diff2 = (k(np.r_[xa, 2 * y1], np.r_[xb, 2 * y2])
                 - k(np.r_[xc, 2 * y1], np.r_[xd, 2 * y2]))
        assert diff1 == pytest.approx(diff2, abs=1e-12)

    def test_spec_evaluates_as_sum_of_parts(self):
        spec = gpar_nl_spec(1, 2, base="eq", variance=1.1, lengthscale=0.6)
        k = build_from_spec(spec, input_dim=3)
        kx = EQ(variance=1.1, lengthscale=0.6)
        ky = EQ(variance=1.1, lengthscale=0.6)
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 3))
        expected = kx([a[0]], [b[0]]) + ky(a[1:], b[1:])
        assert k(a, b) == pytest.approx(expected, abs=1e-13)


class TestGram:
    def test_single_point_is_prior_variance(self):
        k = RQ(variance=1.7, lengthscale=1.0, alpha=2.0)
        g = k.gram(np.array([[0.3]]), np.array([[0.3]]))
        assert g.shape == (1, 1)
        assert g[0, 0] == pytest.approx(1.7, abs=1e-14)

    def test_symmetry_random_points(self, rng):
        for trial in range(5):
            k = random_kernel(rng, 3)
            a = rng.normal(size=(20, 3))
            g = k.gram(a, a)
            assert np.max(np.abs(g - g.T)) <= 1e-12

    def test_psd_eq_random_points(self, rng):
        k = EQ(variance=1.0, lengthscale=0.8)
        a = rng.normal(size=(20, 2))
        eigs = np.linalg.eigvalsh(k.gram(a, a))
        assert eigs.min() >= -1e-10

    def test_psd_property_random_kernels(self, rng):
        for trial in range(20):
            d = int(rng.integers(1, 4))
            k = random_kernel(rng, d)
            n = int(rng.integers(2, 31))
            a = rng.normal(size=(n, d))
            g = k.gram(a, a)
            eigs = np.linalg.eigvalsh((g + g.T) / 2)
            assert eigs.min() >= -1e-8 * max(np.trace(g), 1e-10)

    def test_dimension_mismatch_is_reported(self):
        k = EQ(input_dim=3)
        with pytest.raises(DimensionMismatch, match="expected 3, got 2"):
            k.gram(np.zeros((4, 2)), np.zeros((4, 2)))


class TestGradients:
    def test_eq_variance_gradient_equals_eval(self, rng):
        k = EQ(variance=1.4, lengthscale=0.9)
        for _ in range(5):
            a, b = rng.normal(size=(2, 2))
            grads = k.grad_hyper(a, b)
            assert grads["variance"] == pytest.approx(k(a, b), abs=1e-14)

    def test_sum_gradient_concatenates_children(self, rng):
        k1 = EQ(variance=1.2, lengthscale=0.8)
        k2 = RQ(variance=0.7, lengthscale=1.1, alpha=1.5)
        k = Sum([k1, k2])
        a, b = rng.normal(size=(2, 2))
        grads = k.grad_hyper(a, b)
        g1 = k1.grad_hyper(a, b)
        g2 = k2.grad_hyper(a, b)
        assert set(grads) == {f"0.{n}" for n in g1} | {f"1.{n}" for n in g2}
        for name, value in g1.items():
            assert grads[f"0.{name}"] == pytest.approx(value, abs=1e-14)
        for name, value in g2.items():
            assert grads[f"1.{name}"] == pytest.approx(value, abs=1e-14)

    def test_matches_finite_differences(self, rng):
        """100 random (kernel, input) draws, rel err <= 1e-5.

        The absolute floor covers FD round-off on near-zero gradients
        (central differences carry eps/h noise regardless of scale).
        """
        h = 1e-5
        for trial in range(100):
            d = int(rng.integers(1, 4))
            k = random_kernel(rng, d)
            a, b = rng.normal(size=(2, d))
            grads = k.grad_hyper(a, b)
            for name in k.params():
                up = k.with_params({name: k.params()[name] * np.exp(h)})
                down = k.with_params({name: k.params()[name] * np.exp(-h)})
                fd = (up(a, b) - down(a, b)) / (2 * h)
                tol = 1e-5 * max(abs(fd), abs(grads[name])) + 1e-10
                assert abs(fd - grads[name]) <= tol, \
                    f"{type(k).__name__} {name}"


class TestSpecs:
    def test_round_trip(self, rng):
        for trial in range(20):
            d = int(rng.integers(1, 4))
            k = random_kernel(rng, d)
            spec = k.to_spec()
            rebuilt = build_from_spec(spec, input_dim=d)
            assert rebuilt.to_spec() == spec
            a, b = rng.normal(size=(2, d))
            assert rebuilt(a, b) == pytest.approx(k(a, b), abs=1e-14)

    def test_zero_variance_rejected(self):
        with pytest.raises(KernelSpecError, match="positive"):
            build_from_spec({"kind": "EQ",
                             "params": {"variance": 0.0, "lengthscale": 1.0}})

    def test_unknown_kind_rejected(self):
        with pytest.raises(KernelSpecError, match="unknown kernel kind"):
            build_from_spec({"kind": "Matern", "params": {}})

    def test_error_paths_point_into_tree(self):
        spec = {"kind": "Sum", "children": [
            {"kind": "EQ", "params": {"variance": 1.0, "lengthscale": 1.0}},
            {"kind": "RQ", "params": {"variance": 1.0, "lengthscale": -1.0,
                                      "alpha": 1.0}},
        ]}
        with pytest.raises(KernelSpecError, match=r"children\[1\]"):
            build_from_spec(spec)

    def test_dims_out_of_range(self):
        spec = {"kind": "DimSelect", "dims": [3],
                "children": [{"kind": "EQ",
                              "params": {"variance": 1.0, "lengthscale": 1.0}}]}
        with pytest.raises(KernelSpecError, match="out of range"):
            build_from_spec(spec, input_dim=2)

    def test_nested_composite_matches_hand_arithmetic(self, rng):
        spec = {"kind": "Sum", "children": [
            {"kind": "Scaled", "params": {"variance": 0.5},
             "children": [{"kind": "EQ",
                           "params": {"variance": 1.2, "lengthscale": 0.7}}]},
            {"kind": "Product", "children": [
                {"kind": "RQ", "params": {"variance": 0.8, "lengthscale": 1.3,
                                          "alpha": 2.0}},
                {"kind": "Linear", "params": {"variance": 0.6}},
            ]},
        ]}
        k = build_from_spec(spec, input_dim=2)
        eq = EQ(variance=1.2, lengthscale=0.7)
        rq = RQ(variance=0.8, lengthscale=1.3, alpha=2.0)
        lin = Linear(variance=0.6)
        for _ in range(10):
            a, b = rng.normal(size=(2, 2))
            expected = 0.5 * eq(a, b) + rq(a, b) * lin(a, b)
            assert k(a, b) == pytest.approx(expected, abs=1e-13)

    def test_variant_builders_cover_all_layers(self):
        specs = layer_specs_for_variant("gpar-l-nl", 2, 4)
        assert len(specs) == 4
        for i, spec in enumerate(specs):
            k = build_from_spec(spec, input_dim=2 + i)
            a = np.zeros(2 + i)
            assert np.isfinite(k(a, a))

    def test_hybrid_contains_linear_and_nonlinear_terms(self):
        spec = gpar_l_nl_spec(1, 2)
        k = build_from_spec(spec, input_dim=3)
        kinds = [c.to_spec()["kind"] for c in k.children]
        assert kinds.count("Product") == 2     # one linear term per upstream
        assert kinds.count("DimSelect") == 2   # x term plus the joint y term


class TestImmutability:
    def test_with_params_returns_new_tree(self):
        k = Sum([EQ(variance=1.0, lengthscale=1.0), Linear(variance=1.0)])
        k2 = k.with_params({"0.variance": 2.0})
        assert k.params()["0.variance"] == 1.0
        assert k2.params()["0.variance"] == 2.0
