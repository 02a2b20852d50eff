"""
Tests for boundary nodes, trace containers and the noise model.
"""

import numpy as np
import pytest

from apps.core.exceptions import DataError
from apps.core.geometry import ProblemGeometry
from apps.data.containers import MAGIC, read_container, write_container
from apps.data.forward import SpaceTimeGrid, TargetModel
from apps.data.traces import (
    STAGE_NOISY,
    CauchyTraces,
    add_noise,
    analytic_traces,
    export_all_sources,
    fibonacci_sphere,
    load_traces,
    save_traces,
    simulate_traces,
)


@pytest.fixture
def small_geometry():
    return ProblemGeometry(R=0.5, T=12.0, T_minus=4.0, source_count=12)


@pytest.fixture
def traces(small_geometry):
    nodes = fibonacci_sphere(20, 0.5)
    return analytic_traces(small_geometry, nodes, np.linspace(4.0, 12.0, 9))


@pytest.mark.unit
def test_fibonacci_nodes_on_sphere():
    nodes = fibonacci_sphere(256, 0.5)
    assert nodes.shape == (256, 3)
    np.testing.assert_allclose(np.linalg.norm(nodes, axis=1), 0.5)
    assert abs(nodes.mean(axis=0)).max() < 0.01


@pytest.mark.unit
def test_analytic_traces_shapes_and_values(small_geometry, traces):
    assert traces.g0.shape == traces.g1.shape == (12, 20, 9)
    x0 = small_geometry.source_point(small_geometry.source_positions[0])
    r = np.linalg.norm(traces.nodes[0] - x0)
    assert traces.g0[0, 0, 0] == pytest.approx(1.0 / (4.0 * np.pi * r))
    traces.check_positive()


@pytest.mark.unit
def test_shape_mismatch_is_rejected(traces):
    with pytest.raises(DataError):
        CauchyTraces(traces.nodes, traces.normals, traces.times, traces.sources, traces.g0, traces.g1[:, :, :-1])


@pytest.mark.unit
def test_check_positive_names_index(traces):
    g0 = traces.g0.copy()
    g0[1, 2, 3] = 0.0
    bad = CauchyTraces(traces.nodes, traces.normals, traces.times, traces.sources, g0, traces.g1)
    with pytest.raises(DataError, match=r"\(1, 2, 3\)"):
        bad.check_positive()


@pytest.mark.unit
class TestNoise:
    def test_zero_level_is_identity(self, traces):
        noisy = add_noise(traces, 0.0, seed=1)
        np.testing.assert_array_equal(noisy.g0, traces.g0)
        np.testing.assert_array_equal(noisy.g1, traces.g1)
        assert noisy.stage == STAGE_NOISY
        assert noisy.noise["delta"] == 0.0

    def test_bounded_relative_change(self, traces):
        noisy = add_noise(traces, 0.03, seed=7)
        assert np.all(np.abs(noisy.g0 - traces.g0) <= 0.03 * np.abs(traces.g0) + 1e-15)
        assert np.all(np.abs(noisy.g1 - traces.g1) <= 0.03 * np.abs(traces.g1) + 1e-15)
        assert not np.array_equal(noisy.g0, traces.g0)

    def test_same_seed_same_output(self, traces):
        first = add_noise(traces, 0.03, seed=np.random.SeedSequence([5, 0]))
        second = add_noise(traces, 0.03, seed=np.random.SeedSequence([5, 0]))
        np.testing.assert_array_equal(first.g0, second.g0)
        np.testing.assert_array_equal(first.g1, second.g1)
        assert first.noise["seed"] == {"entropy": [5, 0], "spawn_key": []}

    def test_noise_shared_across_sources(self, traces):
        noisy = add_noise(traces, 0.03, seed=3)
        ratio = noisy.g0 / traces.g0
        np.testing.assert_allclose(ratio[0], ratio[-1])

    def test_independent_sources(self, traces):
        noisy = add_noise(traces, 0.03, seed=3, independent_sources=True)
        ratio = noisy.g0 / traces.g0
        assert not np.allclose(ratio[0], ratio[-1])

    def test_dirichlet_and_neumann_draws_differ(self, traces):
        noisy = add_noise(traces, 0.03, seed=3)
        assert not np.allclose(noisy.g0 / traces.g0, noisy.g1 / traces.g1)

    def test_negative_level(self, traces):
        with pytest.raises(DataError):
            add_noise(traces, -0.1, seed=0)

    def test_level_too_large(self, traces):
        with pytest.raises(DataError):
            add_noise(traces, 5.0, seed=0)


@pytest.mark.unit
def test_container_round_trip(tmp_path, small_geometry, traces):
    noisy = add_noise(traces, 0.03, seed=11)
    path = save_traces(noisy, tmp_path / "traces.cvxf", small_geometry)
    assert path.read_bytes()[:4] == MAGIC
    loaded = load_traces(path)
    np.testing.assert_array_equal(loaded.g0, noisy.g0)
    np.testing.assert_array_equal(loaded.g1, noisy.g1)
    np.testing.assert_array_equal(loaded.sources, noisy.sources)
    assert loaded.stage == STAGE_NOISY
    assert loaded.noise["delta"] == 0.03


@pytest.mark.unit
def test_container_bytes_are_deterministic(tmp_path, traces):
    first = save_traces(traces, tmp_path / "a.cvxf").read_bytes()
    second = save_traces(traces, tmp_path / "b.cvxf").read_bytes()
    assert first == second


@pytest.mark.unit
def test_container_errors(tmp_path):
    with pytest.raises(DataError):
        read_container(tmp_path / "missing.cvxf")
    bogus = tmp_path / "bogus.cvxf"
    bogus.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        read_container(bogus)
    path = write_container(tmp_path / "short.cvxf", "raw", {"g0": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError):
        read_container(path)
    with pytest.raises(DataError):
        write_container(tmp_path / "x.cvxf", "unknown", {})


@pytest.mark.unit
def test_load_rejects_other_stage(tmp_path):
    path = write_container(tmp_path / "coeffs.cvxf", "coefficients", {"values": np.zeros((2, 2))})
    with pytest.raises(DataError):
        load_traces(path)


@pytest.mark.unit
def test_csv_export(tmp_path, traces):
    paths = export_all_sources(traces, tmp_path / "csv")
    assert len(paths) == 12
    header = paths[0].read_text().splitlines()[0]
    assert header == "node,x,y,z,t,g0,g1"
    assert len(paths[0].read_text().splitlines()) == 1 + 20 * 9


@pytest.mark.slow
def test_simulated_traces_are_positive(small_geometry):
    """Test g0 > 0 for every scenario on a coarse grid and a short window."""
    grid = SpaceTimeGrid(dx=0.1, dt=0.025, t_end=4.6, record_every=4)
    nodes = fibonacci_sphere(16, 0.5)
    for kind in ("ball", "cylinder", "rotated_cylinder"):
        model = TargetModel.for_geometry(small_geometry, kind=kind)
        traces = simulate_traces(small_geometry, model, grid, nodes, max_workers=2, sources=np.array([-0.2, 0.2]))
        assert traces.g0.shape == (2, 16, 7)
        assert np.all(traces.g0 > 0.0)
