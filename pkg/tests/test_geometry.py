"""
Tests for the domain parameters and the Carleman weight.
"""

import math

import numpy as np
import pytest

from apps.core.exceptions import NumericalError
from apps.core.geometry import (
    CHI_CUTOFF,
    CHI_IDENTITY,
    CarlemanParams,
    ProblemGeometry,
    carleman_weight,
    cone_containment_margin,
    cutoff_chi,
    level_domain_membership,
    psi_weight,
    validate_geometry,
)

pytestmark = pytest.mark.unit


def test_published_parameters_pass_every_check(geometry, carleman):
    """Test that the published constants satisfy every admissibility condition."""
    assert geometry.T0 == 8.0
    assert geometry.A == pytest.approx(4.0 / 3.0)
    report = validate_geometry(geometry, carleman)
    assert report.passed, report.summary()
    assert {check.name for check in report.checks} >= {
        "time_window_order",
        "cone_containment",
        "sigma_lower_bound",
        "level_h_range",
        "eta_identity",
    }


def test_derived_eta_matches_published_value(geometry):
    """Test that eta derived from sigma, h and A equals 1107/1280."""
    params = CarlemanParams.from_geometry(geometry, sigma=2.5, h=0.1)
    assert params.eta == pytest.approx(1107.0 / 1280.0, rel=1e-14)
    assert params.eta * (2.0 * geometry.A) ** 2 == pytest.approx(params.sigma ** 2 - params.h, rel=1e-14)
    assert params.p == (-3.0, 0.0, 0.0)


def test_short_time_window_fails():
    """Test that T_minus below R(sqrt5+1) is reported."""
    g = ProblemGeometry(R=0.5, T=12.0, T_minus=1.0)
    report = validate_geometry(g, CarlemanParams.from_geometry(g))
    assert not report.passed
    assert "time_window_order" in {check.name for check in report.failures}


def test_small_sigma_fails(geometry):
    """Test that sigma below 2R/(sqrt2-1) is reported, with every other failure collected."""
    report = validate_geometry(geometry, CarlemanParams.from_geometry(geometry, sigma=1.0, h=0.1))
    names = {check.name for check in report.failures}
    assert "sigma_lower_bound" in names
    assert "FAIL" in report.summary()


def test_non_finite_parameters_are_reported(geometry):
    params = CarlemanParams(sigma=float("nan"), h=0.1, eta=0.5, p=(-3.0, 0.0, 0.0))
    report = validate_geometry(geometry, params)
    assert [check.name for check in report.failures] == ["finite_parameters"]


def test_default_sources_lie_strictly_inside():
    g = ProblemGeometry(R=0.5, source_count=100)
    s = np.asarray(g.source_positions)
    assert s.size == 100
    assert np.all(np.abs(s) < 0.5)
    np.testing.assert_allclose(np.diff(s), 1.0 / 101.0)
    assert g.spline_step == pytest.approx(0.005)


def test_psi_weight_values(geometry, carleman):
    """Test the weight exponent at hand-evaluated points."""
    assert psi_weight(np.array(carleman.p), geometry.T0, geometry, carleman) == pytest.approx(0.0)
    assert psi_weight(np.zeros(3), 8.0, geometry, carleman) == pytest.approx(9.0)
    x = np.array([0.5, 0.0, 0.0])
    for t in (geometry.T0 - 2 * geometry.A, geometry.T0 + 2 * geometry.A):
        assert psi_weight(x, t, geometry, carleman) == pytest.approx(6.1, rel=1e-12)


def test_psi_is_maximal_at_t0(geometry, carleman):
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.3, 0.3, size=(50, 3))
    times = np.linspace(geometry.T_minus, geometry.T, 41)
    peak = psi_weight(x, geometry.T0, geometry, carleman)
    for t in times:
        assert np.all(peak >= psi_weight(x, t, geometry, carleman) - 1e-12)


def test_carleman_weight(geometry, carleman):
    assert carleman_weight(np.zeros(3), 8.0, geometry, carleman.with_lambda(0.0)) == pytest.approx(1.0)
    # Pick t so that psi = 1 at the origin: 9 - eta (t - 8)^2 = 1.
    t = 8.0 + math.sqrt(8.0 / carleman.eta)
    assert carleman_weight(np.zeros(3), t, geometry, carleman) == pytest.approx(math.exp(3.0), rel=1e-10)


def test_carleman_weight_overflow(geometry, carleman):
    with pytest.raises(NumericalError):
        carleman_weight(np.zeros(3), 8.0, geometry, carleman.with_lambda(100.0))


def test_level_membership_is_strict_and_nested(geometry, carleman):
    assert level_domain_membership(np.zeros(3), 8.0, geometry, carleman, 4)

    # psi(0, T0) = 9 = 2h exactly, so k = 2 is excluded.
    wide = CarlemanParams(sigma=carleman.sigma, h=4.5, eta=carleman.eta, p=carleman.p)
    assert not level_domain_membership(np.zeros(3), 8.0, geometry, wide, 2)
    assert level_domain_membership(np.zeros(3), 8.0, geometry, wide, 1)

    axis = np.linspace(-0.5, 0.5, 11)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    for t in np.linspace(0.0, 16.0, 33):
        levels = [level_domain_membership(points, t, geometry, carleman, k) for k in (1, 2, 3, 4)]
        for inner, outer in zip(levels[1:], levels[:-1]):
            assert np.all(~inner | outer)


def test_level_membership_rejects_bad_index(geometry, carleman):
    with pytest.raises(ValueError):
        level_domain_membership(np.zeros(3), 8.0, geometry, carleman, 5)


def test_cutoff_modes(geometry, carleman):
    """Test identity and cut-off modes of chi."""
    assert cutoff_chi(np.zeros(3), 8.0, geometry, carleman, CHI_IDENTITY) == 1.0
    assert cutoff_chi(np.zeros(3), 8.0, geometry, carleman, CHI_CUTOFF) == pytest.approx(1.0)

    # psi(0, t) = 0.1 < 2h
    t = 8.0 + math.sqrt((9.0 - 0.1) / carleman.eta)
    assert cutoff_chi(np.zeros(3), t, geometry, carleman, CHI_CUTOFF) == 0.0


def test_cutoff_range_and_support(geometry, carleman):
    rng = np.random.default_rng(2)
    points = rng.uniform(-0.6, 0.6, size=(400, 3))
    for t in np.linspace(0.0, 16.0, 17):
        chi = cutoff_chi(points, t, geometry, carleman, CHI_CUTOFF)
        assert np.all((chi >= 0.0) & (chi <= 1.0))
        outside = ~level_domain_membership(points, t, geometry, carleman, 1)
        assert np.all(chi[outside] == 0.0)


def test_cone_containment_on_data_cylinder(geometry):
    axis = np.linspace(-0.5, 0.5, 21)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    points = points[np.linalg.norm(points, axis=1) <= 0.5]
    assert cone_containment_margin(geometry, points, np.linspace(4.0, 12.0, 9)) > 0.0


def test_round_trip_dicts(geometry, carleman):
    assert ProblemGeometry.from_dict(geometry.to_dict()) == geometry
    assert CarlemanParams.from_dict(carleman.to_dict()) == carleman
