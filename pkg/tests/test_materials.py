import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hots.materials import (
    TABLE1,
    EllipticityError,
    MaterialModel,
    Polynomial,
    RangeWarning,
    configure,
    material_from_mapping,
)
from hots.tensors import full_to_voigt, symmetry_defect

THETA_REF = 373.15


def test_material1_conductivity():
    k = TABLE1["material1"].evaluate(THETA_REF).k
    assert k[0, 0] == pytest.approx(1000 + 0.1 * THETA_REF + 1e-5 * THETA_REF**2, rel=1e-14)
    assert k[0, 0] == pytest.approx(1038.7074, abs=1e-4)
    assert k[0, 1] == 0.0


def test_material2_heat_capacity():
    assert TABLE1["material2"].evaluate(THETA_REF).c == pytest.approx(647.09, abs=5e-3)


def test_material1_conductivity_derivative():
    assert TABLE1["material1"].dtheta(THETA_REF, "k") == pytest.approx(0.107463, rel=1e-12)


def test_constant_nu_and_second_derivative():
    m = TABLE1["material3"]
    assert m.dtheta(500.0, "nu") == 0.0
    assert m.dtheta(123.0, "E", order=2) == pytest.approx(2 * -0.025)
    assert m.dtheta(999.0, "c", order=2) == pytest.approx(2 * 6e-5)


def test_isotropic_plane_strain_tensor():
    m = MaterialModel("unit", Polynomial((1.0,)), Polynomial((1.0,)), Polynomial((1.0,)), Polynomial((1.0,)), 0.25, Polynomial((1.0,)))
    pc = m.evaluate(0.0)
    assert np.allclose(pc.C_voigt, [[1.2, 0.4, 0], [0.4, 1.2, 0], [0, 0, 0.4]])
    assert np.allclose(full_to_voigt(pc.C), pc.C_voigt)


def test_vartheta_modes():
    m = TABLE1["material1"]
    b = m.evaluate(THETA_REF).beta
    assert np.allclose(m.with_options(reference_temperature=THETA_REF).evaluate(THETA_REF).vartheta, THETA_REF * b)
    assert np.allclose(m.with_options(vartheta_mode="gamma", gamma=2.0).evaluate(THETA_REF).vartheta, 2 * b)
    assert np.all(m.with_options(vartheta_mode="zero").evaluate(THETA_REF).vartheta == 0)
    with pytest.raises(ValueError):
        m.with_options(vartheta_mode="bogus")


def test_ellipticity_error_names_property():
    bad = TABLE1["material2"].with_options(k=Polynomial((1.0, -1.0)))
    with pytest.raises(EllipticityError, match="property k"):
        bad.evaluate(5.0)
    with pytest.raises(EllipticityError):
        TABLE1["material1"].with_options(nu=0.5)


def test_clamp_warns():
    m = TABLE1["material1"].with_options(theta_range=(300.0, 600.0))
    with pytest.warns(RangeWarning):
        pc = m.evaluate(1000.0)
    assert pc.k[0, 0] == pytest.approx(TABLE1["material1"].evaluate(600.0).k[0, 0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        m.evaluate(450.0)


def test_configure_checks_range():
    lib = configure(TABLE1, reference_temperature=THETA_REF, theta_range=(THETA_REF, THETA_REF + 200))
    assert lib["material3"].reference_temperature == THETA_REF
    with pytest.raises(EllipticityError):
        configure({"weak": TABLE1["material2"].with_options(k=Polynomial((1.0, -0.01)))}, theta_range=(0.0, 500.0))


def test_material_from_mapping():
    m = material_from_mapping("m", {"rho": 1, "c": [1, 2], "k": [3], "E": [4, 0, 1], "nu": 0.3, "beta": 2})
    assert m.E(2.0) == pytest.approx(8.0)
    with pytest.raises(KeyError):
        material_from_mapping("m", {"rho": 1})


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(sorted(TABLE1)), st.floats(0.0, 2000.0))
def test_symmetries_exact(name, theta):
    pc = TABLE1[name].with_options(reference_temperature=THETA_REF).evaluate(theta)
    for t in (pc.k, pc.beta, pc.vartheta):
        assert np.array_equal(t, t.T)
    assert symmetry_defect(pc.C) == 0.0
    assert np.array_equal(pc.C_voigt, pc.C_voigt.T)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(sorted(TABLE1)), st.floats(100.0, 1500.0))
def test_derivative_matches_finite_difference(name, theta):
    m = TABLE1[name]
    h = 1e-3
    d = m.dtheta_coefficients(theta)
    fd = (m.evaluate(theta + h).C_voigt - m.evaluate(theta - h).C_voigt) / (2 * h)
    assert np.allclose(d.C_voigt, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())
    for p in ("k", "c", "beta"):
        fdp = (getattr(m, p)(theta + h) - getattr(m, p)(theta - h)) / (2 * h)
        assert m.dtheta(theta, p) == pytest.approx(fdp, rel=1e-6, abs=1e-12)


def test_vectorized_evaluate():
    t = np.linspace(300, 500, 7)
    pc = TABLE1["material1"].evaluate(t)
    assert pc.k.shape == (7, 2, 2) and pc.C_voigt.shape == (7, 3, 3) and pc.C.shape == (7, 2, 2, 2, 2)
