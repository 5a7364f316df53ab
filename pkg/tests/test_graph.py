import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epitransport.graph import (
    GraphError, build_region_graph, graph_from_distances, haversine, haversine_matrix,
    load_region_graph,
)

lat = st.floats(-90, 90, allow_nan=False)
lon = st.floats(-180, 180, allow_nan=False)
point = st.tuples(lat, lon)


def chord_distance(a, b, radius=6371.0):
    """Independent oracle: great-circle distance from the 3-D chord length."""
    def xyz(p):
        la, lo = math.radians(p[0]), math.radians(p[1])
        return np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])
    chord = np.linalg.norm(xyz(a) - xyz(b))
    return 2 * radius * math.asin(min(1.0, chord / 2))


def test_haversine_identical_points():
    assert haversine((48.8566, 2.3522), (48.8566, 2.3522)) == 0.0


def test_haversine_antipodal_equator():
    assert haversine((0, 0), (0, 180)) == pytest.approx(math.pi * 6371.0, rel=1e-12)
    assert haversine((0, 0), (0, 180)) == pytest.approx(20015.1, abs=0.1)


def test_haversine_paris_marseille_matches_oracle():
    d = haversine((48.8566, 2.3522), (43.2965, 5.3698))
    oracle = chord_distance((48.8566, 2.3522), (43.2965, 5.3698))
    assert d == pytest.approx(oracle, rel=1e-10)
    # value recorded from the oracle run
    assert d == pytest.approx(660.4783796736641, abs=1e-6)


@pytest.mark.parametrize("bad", [(91, 0), (-90.5, 0), (0, 181), (0, -180.01), (float("nan"), 0)])
def test_haversine_rejects_out_of_range(bad):
    with pytest.raises(GraphError):
        haversine(bad, (0, 0))


@given(point, point)
def test_haversine_symmetric_and_nonnegative(a, b):
    assert haversine(a, b) == haversine(b, a)
    assert haversine(a, b) >= 0.0


@given(point, point, point)
def test_haversine_triangle(a, b, c):
    assert haversine(a, c) <= haversine(a, b) + haversine(b, c) + 1e-6


@given(point, point)
def test_haversine_agrees_with_chord_oracle(a, b):
    assert haversine(a, b) == pytest.approx(chord_distance(a, b), abs=1e-6)


def test_two_regions_two_km_apart():
    g = graph_from_distances([[0, 2], [2, 0]])
    np.testing.assert_array_equal(g.weights, [[0, 0.5], [0.5, 0]])
    np.testing.assert_allclose(g.laplacian_norm, [[1, -1], [-1, 1]], atol=1e-15)


def test_triangle_fixture():
    # distances (d01, d02, d12) = (1, 2, 4); hand evaluation of I - D^-1/2 W D^-1/2
    g = graph_from_distances([[0, 1, 2], [1, 0, 4], [2, 4, 0]], ["a", "b", "c"])
    np.testing.assert_array_equal(g.weights, [[0, 1, 0.5], [1, 0, 0.25], [0.5, 0.25, 0]])
    deg = np.array([1.5, 1.25, 0.75])
    expected = np.array([
        [1, -1 / math.sqrt(1.5 * 1.25), -0.5 / math.sqrt(1.5 * 0.75)],
        [-1 / math.sqrt(1.5 * 1.25), 1, -0.25 / math.sqrt(1.25 * 0.75)],
        [-0.5 / math.sqrt(1.5 * 0.75), -0.25 / math.sqrt(1.25 * 0.75), 1],
    ])
    np.testing.assert_allclose(g.laplacian_norm, expected, rtol=1e-14)
    np.testing.assert_allclose(g.laplacian_comb, np.diag(deg) - g.weights, rtol=1e-15)
    np.testing.assert_allclose(g.laplacian_norm[0, 1], -0.7302967433402214, rtol=1e-14)


coords = st.lists(st.tuples(st.floats(-60, 60), st.floats(-170, 170)), min_size=2, max_size=7,
                  unique_by=lambda p: (round(p[0], 3), round(p[1], 3)))


@settings(max_examples=50)
@given(coords)
def test_graph_invariants(pts):
    g = build_region_graph(pts)
    n = len(pts)
    off = ~np.eye(n, dtype=bool)
    np.testing.assert_array_equal(g.dist_km, g.dist_km.T)
    assert np.all(np.diag(g.dist_km) == 0) and np.all(g.dist_km[off] > 0)
    np.testing.assert_array_equal(g.weights[off], 1 / g.dist_km[off])
    assert np.all(np.diag(g.weights) == 0)
    assert np.max(np.abs(g.laplacian_comb.sum(axis=1))) <= 1e-10 * max(1, g.weights.max())
    eig = np.linalg.eigvalsh(g.laplacian_norm)
    assert eig.min() >= -1e-10 and eig.max() <= 2 + 1e-10


@settings(max_examples=30)
@given(coords, st.randoms(use_true_random=False))
def test_permutation_consistency(pts, rnd):
    n = len(pts)
    perm = list(range(n))
    rnd.shuffle(perm)
    g = build_region_graph(pts, list(range(n)))
    gp = build_region_graph([pts[i] for i in perm], perm)
    P = np.eye(n)[perm]
    for name in ("dist_km", "weights", "laplacian_norm", "laplacian_comb"):
        np.testing.assert_allclose(getattr(gp, name), P @ getattr(g, name) @ P.T,
                                   rtol=1e-12, atol=1e-15)
    assert gp.region_ids == tuple(perm)


def test_duplicate_centroids_name_the_pair():
    with pytest.raises(GraphError, match="'b'.*'c'"):
        build_region_graph([(1, 1), (2, 2), (2, 2)], ["a", "b", "c"])


def test_needs_two_regions():
    with pytest.raises(GraphError):
        build_region_graph([(1, 1)])


def test_graph_is_read_only():
    g = build_region_graph([(0, 0), (1, 1)])
    with pytest.raises(ValueError):
        g.weights[0, 1] = 3.0


def test_distance_matrix_must_be_symmetric():
    with pytest.raises(GraphError):
        graph_from_distances([[0, 1], [2, 0]])


def test_haversine_matrix_matches_scalar():
    pts = np.array([(48.8566, 2.3522), (43.2965, 5.3698), (51.5, -0.12)])
    m = haversine_matrix(pts)
    for i in range(3):
        for j in range(3):
            assert m[i, j] == pytest.approx(haversine(pts[i], pts[j]), abs=1e-9)


def test_load_centroids_file(toy_dir):
    g = load_region_graph(toy_dir / "centroids.csv")
    assert g.region_ids == ("north", "south")
    assert g.dist_km[0, 1] == pytest.approx(haversine((51.5074, -0.1278), (50.9097, -1.4044)))
