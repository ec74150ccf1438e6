"""Yosida regularization of the sign graph and total-variation energies.

Pointwise maps act on arrays whose last axis has length 2 (a gradient
vector per cell).  The field-level functionals use the gradient lattice from
:mod:`stvflow.grid`, so jumps to the zero extension at the rim of the disc
count towards the total variation.
"""

from __future__ import annotations

import numpy as np

from .grid import ScalarField, VectorField2, divergence, gradient

__all__ = [
    "check_lambda",
    "psi_lambda",
    "psi_tilde",
    "moreau_j",
    "mobility",
    "tv_phi",
    "phi_lambda",
    "psi_tilde_field",
    "div_psi_tilde",
    "dissipation",
]


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (0, 1], got {lam!r}")
    return lam


def _norm(u: np.ndarray) -> np.ndarray:
    return np.linalg.norm(u, axis=-1, keepdims=True)


def psi_lambda(u, lam: float) -> np.ndarray:
    """Yosida approximation of ``sgn``: ``u / lam`` inside the ball, ``u / |u|`` outside."""
    lam = check_lambda(lam)
    u = np.asarray(u, dtype=float)
    return u / np.maximum(_norm(u), lam)


def psi_tilde(u, lam: float) -> np.ndarray:
    """``psi_lambda(u) + lam * u``, strongly monotone with modulus ``lam``."""
    u = np.asarray(u, dtype=float)
    return psi_lambda(u, lam) + lam * u


def moreau_j(u, lam: float) -> np.ndarray:
    """Moreau envelope of the Euclidean norm (Huber function).

    Closed form of ``inf_v |u - v|^2 / (2 lam) + |v|``.
    """
    lam = check_lambda(lam)
    r = np.linalg.norm(np.asarray(u, dtype=float), axis=-1)
    return np.where(r <= lam, r**2 / (2.0 * lam), r - 0.5 * lam)


def mobility(magnitude: np.ndarray, lam: float) -> np.ndarray:
    """Scalar diffusivity with ``psi_tilde(g) = mobility(|g|) * g``."""
    return 1.0 / np.maximum(magnitude, lam) + lam


def _stack(g: VectorField2) -> np.ndarray:
    return np.stack([g.x, g.y], axis=-1)


def tv_phi(u: ScalarField) -> float:
    """Isotropic discrete total variation ``h^2 sum |grad u|``."""
    g = gradient(u)
    return float(u.grid.h**2 * np.sum(g.magnitude()))


def phi_lambda(u: ScalarField, lam: float) -> float:
    """``h^2 sum j_lambda(grad u)``."""
    g = gradient(u)
    return float(u.grid.h**2 * np.sum(moreau_j(_stack(g), lam)))


def psi_tilde_field(g: VectorField2, lam: float) -> VectorField2:
    m = mobility(g.magnitude(), check_lambda(lam))
    return VectorField2(g.grid, m * g.x, m * g.y)


def div_psi_tilde(u: ScalarField, lam: float) -> ScalarField:
    """``div psi_tilde(grad u)``, the regularized TV drift."""
    return divergence(psi_tilde_field(gradient(u), lam))


def dissipation(u: ScalarField, lam: float) -> float:
    """``<psi_tilde(grad u), grad u>``; equals ``-<div_psi_tilde(u), u>``."""
    g = gradient(u)
    r = g.magnitude()
    return float(u.grid.h**2 * np.sum(mobility(r, check_lambda(lam)) * r**2))
