import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustpi.basis import Approximant, BasisSet, make_polynomial_basis
from robustpi.errors import DimensionMismatch

from oracles import enumerate_multi_indices, fd_gradient, total_degree_count


def test_vanishing_degree2_enumeration():
    basis = make_polynomial_basis(2, 2)
    assert basis.indices == ((1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
    assert len(basis) == 5


def test_degree5_count_matches_enumeration_oracle():
    basis = make_polynomial_basis(2, 5)
    assert len(basis) == total_degree_count(2, 5, include_constant=False) == 20
    assert set(basis.indices) == enumerate_multi_indices(2, 5)


def test_constant_basis():
    basis = make_polynomial_basis(1, 1, vanish_at_origin=False, include_constant=True)
    assert basis.indices == ((0,), (1,))
    assert len(basis) == 2


def test_flags_are_mutually_exclusive():
    with pytest.raises(ValueError):
        make_polynomial_basis(2, 2, vanish_at_origin=True, include_constant=True)
    with pytest.raises(ValueError):
        make_polynomial_basis(0, 2)


@given(dim=st.integers(1, 3), degree=st.integers(1, 5))
@settings(max_examples=25, deadline=None)
def test_counts_and_origin_property(dim, degree):
    basis = make_polynomial_basis(dim, degree)
    assert len(basis) == total_degree_count(dim, degree, include_constant=False)
    assert np.all(basis.design_matrix(np.zeros((1, dim))) == 0.0)


def test_ordering_is_graded():
    basis = make_polynomial_basis(3, 4)
    degrees = [sum(a) for a in basis.indices]
    assert degrees == sorted(degrees)


def test_serialization_round_trip():
    basis = make_polynomial_basis(2, 3)
    approx = Approximant(basis, np.linspace(-1, 1, len(basis)))
    clone = Approximant.from_dict(approx.to_dict())
    assert clone.basis.indices == basis.indices
    x = np.array([0.3, -0.7])
    assert clone.evaluate(x) == approx.evaluate(x)


def test_zero_weights_evaluate_to_zero():
    basis = make_polynomial_basis(2, 3)
    approx = Approximant(basis)
    pts = np.random.default_rng(0).normal(size=(10, 2))
    assert np.all(approx.evaluate_many(pts) == 0.0)
    assert np.all(approx.gradient_many(pts) == 0.0)


def test_single_monomial_value_and_gradient():
    basis = BasisSet(dim=2, indices=((2, 0),))
    approx = Approximant(basis, np.array([1.0]))
    assert approx.evaluate([3.0, 5.0]) == pytest.approx(9.0)
    assert approx.gradient([3.0, 5.0]) == pytest.approx([6.0, 0.0])


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(42)
    basis = make_polynomial_basis(2, 5)
    approx = Approximant(basis, rng.normal(size=len(basis)))
    worst = 0.0
    for x in rng.uniform(-1.5, 1.5, size=(100, 2)):
        analytic = approx.gradient(x)
        numeric = fd_gradient(approx.evaluate, x)
        worst = max(
            worst,
            np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12),
        )
    assert worst <= 1e-6


def test_gram_matrix_certifies_independence():
    rng = np.random.default_rng(1)
    for dim, deg in [(1, 2), (2, 5), (3, 3)]:
        basis = make_polynomial_basis(dim, deg)
        cloud = rng.uniform(-1, 1, size=(40 * len(basis), dim))
        assert basis.gram_min_eigenvalue(cloud) > 0.0


def test_dimension_mismatch():
    basis = make_polynomial_basis(2, 2)
    with pytest.raises(DimensionMismatch):
        basis.design_matrix(np.zeros((4, 3)))
    with pytest.raises(DimensionMismatch):
        Approximant(basis, np.zeros(3))


def test_vanishing_basis_rejects_constant_index():
    with pytest.raises(ValueError):
        BasisSet(dim=1, indices=((0,), (1,)), vanish_at_origin=True)
