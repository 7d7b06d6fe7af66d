"""1D Lagrange shape values and derivatives at Gauss points.

Shape functions use equidistant nodes on the reference interval [0, 1];
quadrature is Gauss-Legendre with q points, exact for polynomials of
degree 2q - 1.  Tensor products of these tables drive the sum-factorized
cell integrals on hexahedra.
"""

from dataclasses import dataclass

import numpy as np


def gauss_points(n_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n_q)
    return (x + 1.0) / 2.0, w / 2.0


def lagrange_values(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """values[m, a] = ell_a(x_m) for the Lagrange basis on `nodes`."""
    n = nodes.size
    out = np.ones((x.size, n))
    for a in range(n):
        for b in range(n):
            if b != a:
                out[:, a] *= (x - nodes[b]) / (nodes[a] - nodes[b])
    return out


def lagrange_derivatives(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """derivs[m, a] = ell_a'(x_m) for the Lagrange basis on `nodes`."""
    n = nodes.size
    out = np.zeros((x.size, n))
    for a in range(n):
        for k in range(n):
            if k == a:
                continue
            term = np.full(x.size, 1.0 / (nodes[a] - nodes[k]))
            for b in range(n):
                if b != a and b != k:
                    term *= (x - nodes[b]) / (nodes[a] - nodes[b])
            out[:, a] += term
    return out


@dataclass(frozen=True)
class ShapeInfo:
    degree: int
    n_q: int
    points: np.ndarray  # (q,) Gauss points on [0, 1]
    weights: np.ndarray  # (q,)
    values: np.ndarray  # (q, p+1) shape values at the points
    derivatives: np.ndarray  # (q, p+1) reference-coordinate derivatives


def shape_info(degree: int, n_q: int | None = None) -> ShapeInfo:
    if n_q is None:
        n_q = degree + 1
    nodes = np.linspace(0.0, 1.0, degree + 1)
    x, w = gauss_points(n_q)
    return ShapeInfo(
        degree,
        n_q,
        x,
        w,
        lagrange_values(nodes, x),
        lagrange_derivatives(nodes, x),
    )
