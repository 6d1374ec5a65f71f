"""Monomial basis sets and weighted-sum approximants with exact gradients.

All learners share these: value functions, policies and identified
dynamics are plain weighted sums of multivariate monomials.  Monomials
(rather than an orthogonal family) keep the vanish-at-origin constraint
trivial; conditioning is the SVD solvers' problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import DimensionMismatch


def graded_lex_indices(dim: int, max_degree: int, include_constant: bool) -> tuple:
    """Multi-indices of total degree <= max_degree in graded-lex order.

    Within a degree block, indices are sorted lexicographically
    descending, e.g. dim=2, degree 2: (2,0), (1,1), (0,2).  The ordering
    is fixed so weight vectors are comparable across runs.
    """
    out = []
    lo = 0 if include_constant else 1
    for deg in range(lo, max_degree + 1):
        block = set()
        for combo in combinations_with_replacement(range(dim), deg):
            alpha = [0] * dim
            for v in combo:
                alpha[v] += 1
            block.add(tuple(alpha))
        out.extend(sorted(block, reverse=True))
    return tuple(out)


@dataclass(frozen=True)
class BasisSet:
    """An ordered family of monomials x^alpha on R^dim."""

    dim: int
    indices: tuple
    vanish_at_origin: bool = True

    def __post_init__(self):
        if self.vanish_at_origin and any(sum(a) == 0 for a in self.indices):
            raise ValueError("constant term present in a vanish-at-origin basis")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def powers(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int)

    def design_matrix(self, points: np.ndarray) -> np.ndarray:
        """Evaluate all basis functions at `points` (P, dim) -> (P, N)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise DimensionMismatch(
                f"points have dim {pts.shape[1]}, basis has dim {self.dim}"
            )
        # (P, N, dim) powers -> product over dim
        return np.prod(pts[:, None, :] ** self.powers[None, :, :], axis=2)

    def gradient_tensor(self, points: np.ndarray) -> np.ndarray:
        """Gradients of all basis functions: (P, N, dim)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise DimensionMismatch(
                f"points have dim {pts.shape[1]}, basis has dim {self.dim}"
            )
        P = pts.shape[0]
        N = len(self.indices)
        powers = self.powers
        grad = np.empty((P, N, self.dim))
        for d in range(self.dim):
            dropped = powers.copy()
            dropped[:, d] = np.maximum(dropped[:, d] - 1, 0)
            mono = np.prod(pts[:, None, :] ** dropped[None, :, :], axis=2)
            grad[:, :, d] = powers[None, :, d] * mono
        return grad

    def gram_min_eigenvalue(self, points: np.ndarray) -> float:
        """Smallest eigenvalue of the Gram matrix on a sample cloud.

        Positive value certifies linear independence on that cloud.
        """
        phi = self.design_matrix(points)
        gram = phi.T @ phi / phi.shape[0]
        return float(np.linalg.eigvalsh(gram)[0])

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "indices": [list(a) for a in self.indices],
            "vanish_at_origin": self.vanish_at_origin,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BasisSet":
        return cls(
            dim=int(data["dim"]),
            indices=tuple(tuple(int(v) for v in a) for a in data["indices"]),
            vanish_at_origin=bool(data["vanish_at_origin"]),
        )


def make_polynomial_basis(
    dim: int,
    max_degree: int,
    vanish_at_origin: bool = True,
    include_constant: bool = False,
) -> BasisSet:
    """Total-degree monomial basis in graded-lex order.

    `vanish_at_origin` excludes the constant term (every member is zero
    at x = 0); `include_constant` prepends the 1-monomial instead.  The
    two flags are mutually exclusive.
    """
    if dim < 1 or max_degree < 1:
        raise ValueError("dim and max_degree must be >= 1")
    if vanish_at_origin and include_constant:
        raise ValueError("a basis cannot both vanish at origin and contain 1")
    idx = graded_lex_indices(dim, max_degree, include_constant)
    return BasisSet(dim=dim, indices=idx, vanish_at_origin=vanish_at_origin)


@dataclass
class Approximant:
    """Weighted sum of basis functions, with analytic gradient."""

    basis: BasisSet
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros(len(self.basis))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.basis),):
            raise DimensionMismatch(
                f"{self.weights.shape[0]} weights for a {len(self.basis)}-member basis"
            )

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        return self.basis.design_matrix(points) @ self.weights

    def gradient_many(self, points: np.ndarray) -> np.ndarray:
        return np.einsum("pnd,n->pd", self.basis.gradient_tensor(points), self.weights)

    def evaluate(self, x) -> float:
        return float(self.evaluate_many(np.atleast_2d(x))[0])

    def gradient(self, x) -> np.ndarray:
        return self.gradient_many(np.atleast_2d(x))[0]

    def __call__(self, x) -> float:
        return self.evaluate(x)

    def to_dict(self) -> dict:
        return {"basis": self.basis.to_dict(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Approximant":
        return cls(BasisSet.from_dict(data["basis"]), np.asarray(data["weights"]))
