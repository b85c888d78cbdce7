"""Small helpers for 2D second- and fourth-order tensors.

Fourth-order tensors are kept in full ``(..., 2, 2, 2, 2)`` form so that index
formulas translate directly into ``einsum`` calls. Voigt form is only used for
I/O and for the isotropic constructor.
"""

from __future__ import annotations

import numpy as np

VOIGT = ((0, 0), (1, 1), (0, 1))


def lame_plane_strain(E, nu):
    E = np.asarray(E, dtype=float)
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


def isotropic_voigt(E, nu) -> np.ndarray:
    lam, mu = lame_plane_strain(E, nu)
    lam = np.asarray(lam)
    out = np.zeros(lam.shape + (3, 3))
    out[..., 0, 0] = out[..., 1, 1] = lam + 2.0 * mu
    out[..., 0, 1] = out[..., 1, 0] = lam
    out[..., 2, 2] = mu
    return out


def voigt_to_full(V: np.ndarray) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    out = np.zeros(V.shape[:-2] + (2, 2, 2, 2))
    pairs = {(0, 0): 0, (1, 1): 1, (0, 1): 2, (1, 0): 2}
    for (i, j), a in pairs.items():
        for (k, l), b in pairs.items():
            out[..., i, j, k, l] = V[..., a, b]
    return out


def full_to_voigt(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    out = np.zeros(C.shape[:-4] + (3, 3))
    for a, (i, j) in enumerate(VOIGT):
        for b, (k, l) in enumerate(VOIGT):
            out[..., a, b] = C[..., i, j, k, l]
    return out


def isotropic_full(E, nu) -> np.ndarray:
    return voigt_to_full(isotropic_voigt(E, nu))


def symmetry_defect(C: np.ndarray) -> float:
    """Largest relative violation of minor and major symmetry."""
    scale = max(float(np.max(np.abs(C))), 1e-300)
    d1 = np.max(np.abs(C - np.swapaxes(C, -1, -2)))
    d2 = np.max(np.abs(C - np.swapaxes(C, -3, -4)))
    d3 = np.max(np.abs(C - np.moveaxis(C, (-4, -3), (-2, -1))))
    return float(max(d1, d2, d3) / scale)
