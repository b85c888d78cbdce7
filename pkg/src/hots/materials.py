"""Temperature-dependent isotropic constituent models.

Every property except Poisson's ratio is a polynomial in temperature. Evaluation
is vectorized: pass an array of temperatures and every returned field gains the
same leading shape.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensors import isotropic_voigt, voigt_to_full

log = logging.getLogger(__name__)

PROPERTIES = ("rho", "c", "k", "E", "beta")
VARTHETA_MODES = ("reference", "gamma", "zero")


class EllipticityError(ValueError):
    """A property that must stay positive is not positive at some temperature."""


class RangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Polynomial:
    """Ascending coefficients: ``coeffs[0] + coeffs[1]*t + ...``."""

    coeffs: tuple[float, ...]

    def __call__(self, t):
        return np.polynomial.polynomial.polyval(np.asarray(t, dtype=float), self.coeffs)

    def deriv(self, order: int = 1) -> "Polynomial":
        d = np.polynomial.polynomial.polyder(np.asarray(self.coeffs, dtype=float), order)
        return Polynomial(tuple(float(x) for x in np.atleast_1d(d)))


@dataclass(frozen=True)
class PointCoefficients:
    rho: np.ndarray
    c: np.ndarray
    k: np.ndarray
    beta: np.ndarray
    vartheta: np.ndarray
    C_voigt: np.ndarray

    @property
    def C(self) -> np.ndarray:
        return voigt_to_full(self.C_voigt)


@dataclass(frozen=True)
class MaterialModel:
    name: str
    rho: Polynomial
    c: Polynomial
    k: Polynomial
    E: Polynomial
    nu: float
    beta: Polynomial
    vartheta_mode: str = "reference"
    reference_temperature: float = 0.0
    gamma: float = 0.0
    theta_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.vartheta_mode not in VARTHETA_MODES:
            raise ValueError(f"unknown vartheta mode {self.vartheta_mode!r}")
        if not 0.0 < self.nu < 0.5:
            raise EllipticityError(f"{self.name}: Poisson ratio {self.nu} outside (0, 0.5)")

    def with_options(self, **kw) -> "MaterialModel":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(kw)
        return MaterialModel(**data)

    def _vartheta_scale(self) -> float:
        if self.vartheta_mode == "reference":
            return self.reference_temperature
        if self.vartheta_mode == "gamma":
            return self.gamma
        return 0.0

    def _clamp(self, theta):
        t = np.asarray(theta, dtype=float)
        if self.theta_range is None:
            return t
        lo, hi = self.theta_range
        if np.any((t < lo) | (t > hi)):
            warnings.warn(f"{self.name}: temperature outside [{lo}, {hi}], clamped", RangeWarning, stacklevel=3)
            t = np.clip(t, lo, hi)
        return t

    def evaluate(self, theta) -> PointCoefficients:
        t = self._clamp(theta)
        vals = {p: np.asarray(getattr(self, p)(t), dtype=float) for p in PROPERTIES}
        for p, v in vals.items():
            if np.any(v <= 0):
                raise EllipticityError(f"{self.name}: property {p} is non-positive at some temperature")
        eye = np.eye(2)
        return PointCoefficients(
            rho=vals["rho"],
            c=vals["c"],
            k=vals["k"][..., None, None] * eye,
            beta=vals["beta"][..., None, None] * eye,
            vartheta=self._vartheta_scale() * vals["beta"][..., None, None] * eye,
            C_voigt=isotropic_voigt(vals["E"], self.nu),
        )

    def dtheta(self, theta, prop: str, order: int = 1):
        """Exact derivative of a scalar property polynomial."""
        if prop == "nu":
            return np.zeros_like(np.asarray(theta, dtype=float))
        if prop == "vartheta":
            return self._vartheta_scale() * self.beta.deriv(order)(theta)
        if prop not in PROPERTIES:
            raise KeyError(f"unknown property {prop!r}")
        return getattr(self, prop).deriv(order)(theta)

    def dtheta_coefficients(self, theta) -> PointCoefficients:
        """Temperature derivatives of all tensors; Poisson's ratio is constant so dC = C(E')."""
        t = self._clamp(theta)
        eye = np.eye(2)
        dk = self.k.deriv()(t)
        db = self.beta.deriv()(t)
        return PointCoefficients(
            rho=np.asarray(self.rho.deriv()(t)),
            c=np.asarray(self.c.deriv()(t)),
            k=np.asarray(dk)[..., None, None] * eye,
            beta=np.asarray(db)[..., None, None] * eye,
            vartheta=self._vartheta_scale() * np.asarray(db)[..., None, None] * eye,
            C_voigt=isotropic_voigt(self.E.deriv()(t), self.nu),
        )

    def check_range(self, lo: float, hi: float, samples: int = 201) -> None:
        """Raise if any positive property fails anywhere on ``[lo, hi]``."""
        t = np.linspace(lo, hi, samples)
        for p in PROPERTIES:
            v = getattr(self, p)(t)
            if np.any(v <= 0):
                raise EllipticityError(f"{self.name}: property {p} is non-positive on [{lo}, {hi}]")


def _poly(*c) -> Polynomial:
    return Polynomial(tuple(float(x) for x in c))


TABLE1: dict[str, MaterialModel] = {
    "material1": MaterialModel(
        "material1",
        rho=_poly(4410.0),
        c=_poly(808.3, 0.081, 8e-5),
        k=_poly(1000.0, 0.1, 1e-5),
        E=_poly(3e7, -300.0, -0.03),
        nu=0.30,
        beta=_poly(19.0, -1.9e-3, -1.9e-7),
    ),
    "material2": MaterialModel(
        "material2",
        rho=_poly(5600.0),
        c=_poly(615.6, 0.062, 6e-5),
        k=_poly(1.0, 1e-4, 1e-8),
        E=_poly(6e6, -60.0, -0.006),
        nu=0.20,
        beta=_poly(17.0, -1.7e-3, -1.7e-7),
    ),
    "material3": MaterialModel(
        "material3",
        rho=_poly(5800.0),
        c=_poly(590.9, 0.059, 6e-5),
        k=_poly(200.0, 0.02, 2e-6),
        E=_poly(2.5e7, -250.0, -0.025),
        nu=0.25,
        beta=_poly(18.0, -1.8e-3, -1.8e-7),
    ),
}


def material_from_mapping(name: str, data: Mapping) -> MaterialModel:
    """Build a model from a config entry such as ``{k: [1000, 0.1, 1e-5], nu: 0.3, ...}``."""
    missing = [p for p in PROPERTIES + ("nu",) if p not in data]
    if missing:
        raise KeyError(f"material {name!r} is missing {missing}")
    polys = {p: _poly(*np.atleast_1d(data[p])) for p in PROPERTIES}
    return MaterialModel(name, nu=float(data["nu"]), **polys)


def configure(
    materials: Mapping[str, MaterialModel],
    vartheta_mode: str = "reference",
    reference_temperature: float = 0.0,
    gamma: float = 0.0,
    theta_range: tuple[float, float] | None = None,
) -> dict[str, MaterialModel]:
    """Apply run-wide coupling and validity settings to a material library."""
    out = {}
    for name, m in materials.items():
        mm = m.with_options(
            vartheta_mode=vartheta_mode,
            reference_temperature=reference_temperature,
            gamma=gamma,
            theta_range=theta_range,
        )
        if theta_range is not None:
            mm.check_range(*theta_range)
        out[name] = mm
    return out
