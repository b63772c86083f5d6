"""Tests for flow and spatial graph construction, normalization and graph files."""

import math

import numpy as np
import pytest
from scipy import sparse

from conftest import make_trajectory, random_graph
from errors import ValidationError
from geo_cells import CellId, GeoPoint, cell_center, cell_from_grid, grid_position, haversine_many
from graphs import (
    WeightedGraph, build_flow_graph, build_spatial_graph, build_spatial_graph_from_points,
    normalize_adjacency, read_graph, write_graph,
)
from trajectories import LocationIndex


def _dense_normalized(g, self_loop=1.0):
    a = g.matrix.toarray().astype(float) + self_loop * np.eye(g.n)
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


class TestFlowGraph:
    """Tests for consecutive co-occurrence counting."""

    def test_hand_example(self):
        """Test [A,B,C] and [B,A] give w(A,B)=2, w(B,C)=1."""
        a, b, c = CellId(18, 1), CellId(18, 2), CellId(18, 3)
        index = LocationIndex([a, b, c], [2, 2, 1])
        g = build_flow_graph([make_trajectory("u", [a, b, c]), make_trajectory("v", [b, a])], index)
        assert g.kind == "flow"
        assert g.edge_count == 2
        assert list(g.edges()) == [(0, 1, 2), (1, 2, 1)]
        assert g.matrix.dtype == np.int64

    def test_single_position(self):
        """Test a length-1 trajectory yields no edges."""
        a = CellId(18, 1)
        g = build_flow_graph([make_trajectory("u", [a])], LocationIndex([a], [1]))
        assert g.edge_count == 0

    def test_unknown_cell(self):
        """Test a cell missing from the index is named in the error."""
        index = LocationIndex([CellId(18, 1)], [1])
        with pytest.raises(ValidationError, match="18:9"):
            build_flow_graph([make_trajectory("u", [CellId(18, 1), CellId(18, 9)])], index)

    def test_conservation_on_random_fixtures(self, rng):
        """Test total undirected weight equals the number of consecutive pairs."""
        for _ in range(100):
            n = int(rng.integers(2, 30))
            cells = [CellId(18, k) for k in range(n)]
            index = LocationIndex(cells, [1] * n)
            trajs, pairs = [], 0
            for t in range(int(rng.integers(1, 15))):
                length = int(rng.integers(1, 12))
                ids = [int(rng.integers(n))]
                while len(ids) < length:
                    nxt = int(rng.integers(n))
                    if nxt != ids[-1]:
                        ids.append(nxt)
                trajs.append(make_trajectory(f"u{t}", [cells[i] for i in ids]))
                pairs += len(ids) - 1
            g = build_flow_graph(trajs, index)
            assert int(g.total_weight()) == pairs
            assert (g.matrix != g.matrix.T).nnz == 0
            assert g.matrix.diagonal().sum() == 0

    def test_workers_and_min_count(self):
        """Test sharded counting matches serial and min_count drops light edges."""
        cells = [CellId(18, k) for k in range(4)]
        index = LocationIndex(cells, [1] * 4)
        trajs = [make_trajectory(f"u{k}", [cells[0], cells[1], cells[2]]) for k in range(5)]
        trajs.append(make_trajectory("x", [cells[2], cells[3]]))
        serial = build_flow_graph(trajs, index)
        sharded = build_flow_graph(trajs, index, workers=3)
        assert (serial.matrix != sharded.matrix).nnz == 0
        heavy = build_flow_graph(trajs, index, min_count=2)
        assert list(heavy.edges()) == [(0, 1, 5), (1, 2, 5)]


class TestSpatialGraph:
    """Tests for the distance-threshold graph."""

    def test_exactly_delta_apart(self):
        """Test a pair at distance delta gets weight 1/e."""
        p, q = GeoPoint(0.0, 0.0), GeoPoint(0.0, 0.004)
        delta = float(haversine_many([p.lat], [p.lng], [q.lat], [q.lng])[0])
        g = build_spatial_graph_from_points([p, q], delta)
        assert g.edge_count == 1
        assert list(g.edges())[0][2] == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_beyond_delta(self):
        """Test a pair 1 m beyond delta is not connected."""
        p, q = GeoPoint(0.0, 0.0), GeoPoint(0.0, 0.004)
        dist = float(haversine_many([p.lat], [p.lng], [q.lat], [q.lng])[0])
        assert build_spatial_graph_from_points([p, q], dist - 1.0).edge_count == 0

    def test_three_collinear(self):
        """Test points delta/2 apart connect pairwise with e^-1/2 and e^-1."""
        pts = [GeoPoint(0.0, 0.0), GeoPoint(0.0, 0.002), GeoPoint(0.0, 0.004)]
        delta = float(haversine_many([0.0], [0.0], [0.0], [0.004])[0])
        g = build_spatial_graph_from_points(pts, delta)
        w = {(i, j): v for i, j, v in g.edges()}
        assert set(w) == {(0, 1), (1, 2), (0, 2)}
        assert w[(0, 1)] == pytest.approx(math.exp(-0.5), abs=1e-9)
        assert w[(1, 2)] == pytest.approx(math.exp(-0.5), abs=1e-9)
        assert w[(0, 2)] == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_exhaustive_scan_1000_cells(self, rng):
        """Test edges are exactly the pairs within delta with weight exp(-d/delta)."""
        col0, row0 = grid_position(GeoPoint(23.1291, 113.2644), 18)
        flat = rng.choice(60 * 60, size=1000, replace=False)
        cells = [cell_from_grid(col0 + int(k % 60), row0 + int(k // 60), 18) for k in flat]
        index = LocationIndex(cells, [1] * len(cells))
        delta = 500.0
        g = build_spatial_graph(index, delta)

        centers = [cell_center(c) for c in cells]
        lat = np.array([p.lat for p in centers])
        lng = np.array([p.lng for p in centers])
        i, j = np.triu_indices(len(cells), k=1)
        dist = haversine_many(lat[i], lng[i], lat[j], lng[j])
        within = dist <= delta
        expected = {(int(a), int(b)): math.exp(-d / delta) for a, b, d in zip(i[within], j[within], dist[within])}

        got = {(a, b): w for a, b, w in g.edges()}
        assert set(got) == set(expected)
        assert max(abs(got[k] - expected[k]) for k in got) < 1e-12
        assert np.all((g.weights > 0) & (g.weights <= 1))

    def test_antimeridian_neighbors(self):
        """Test cells on both sides of lng=180 are connected."""
        pts = [GeoPoint(0.0, 179.999), GeoPoint(0.0, -179.999)]
        assert build_spatial_graph_from_points(pts, 500.0).edge_count == 1

    def test_workers_match_serial(self, rng):
        """Test bucket sharding gives the same graph."""
        pts = [GeoPoint(23.1 + rng.uniform(0, 0.02), 113.2 + rng.uniform(0, 0.02)) for _ in range(200)]
        a = build_spatial_graph_from_points(pts, 400.0)
        b = build_spatial_graph_from_points(pts, 400.0, workers=4)
        assert a.edge_count == b.edge_count
        assert abs(a.matrix - b.matrix).max() == 0

    def test_rejects_bad_delta(self):
        """Test delta must be positive."""
        with pytest.raises(ValueError):
            build_spatial_graph_from_points([GeoPoint(0, 0)], 0.0)


class TestNormalize:
    """Tests for symmetric normalization with self-loops."""

    def test_isolated_vertex(self):
        """Test a lone vertex normalizes to [[1]]."""
        g = WeightedGraph(1, "flow", sparse.csr_matrix((1, 1), dtype=np.int64))
        assert normalize_adjacency(g).matrix.toarray().tolist() == [[1.0]]

    def test_two_vertices(self):
        """Test a unit edge gives the all-0.5 matrix."""
        g = WeightedGraph(2, "spatial", sparse.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
        assert np.allclose(normalize_adjacency(g).matrix.toarray(), 0.5, atol=1e-15)

    def test_dense_oracle(self, rng):
        """Test sparse normalization matches the dense formula on 50 graphs."""
        for k in range(50):
            n = int(rng.integers(1, 51))
            g = random_graph(n, rng, density=float(rng.uniform(0.0, 0.5)), integer=bool(k % 2))
            a_hat = normalize_adjacency(g)
            assert np.max(np.abs(a_hat.matrix.toarray() - _dense_normalized(g)), initial=0.0) < 1e-12
            assert np.all(a_hat.matrix.diagonal() > 0)

    def test_symmetric_and_spectral_radius(self, rng):
        """Test the operator is symmetric with spectral radius at most 1."""
        for _ in range(10):
            g = random_graph(int(rng.integers(2, 200)), rng, density=0.05)
            m = normalize_adjacency(g).matrix.toarray()
            assert np.allclose(m, m.T, rtol=0, atol=1e-15)
            assert np.max(np.abs(np.linalg.eigvalsh(m))) <= 1.0 + 1e-12

    def test_scaling_with_self_loop(self, rng):
        """Test scaling A and the self-loop weight together leaves the operator unchanged."""
        g = random_graph(30, rng, density=0.2)
        for c in (0.01, 3.7, 250.0):
            scaled = WeightedGraph(g.n, g.kind, (g.matrix * c).tocsr())
            diff = normalize_adjacency(scaled, self_loop_weight=c).matrix - normalize_adjacency(g).matrix
            assert abs(diff).max() < 1e-12


class TestGraphFiles:
    """Tests for the N E kind text format."""

    def test_flow_file(self, tmp_path, rng):
        """Test integer weights survive a write and read."""
        g = random_graph(25, rng, kind="flow", integer=True)
        path = str(tmp_path / "flow_graph.txt")
        write_graph(path, g)
        loaded = read_graph(path)
        assert loaded.kind == "flow" and loaded.n == 25
        assert (loaded.matrix != g.matrix).nnz == 0

    def test_spatial_file_lossless(self, tmp_path, rng):
        """Test real weights are written with full precision."""
        g = random_graph(25, rng)
        path = str(tmp_path / "spatial_graph.txt")
        write_graph(path, g)
        assert abs(read_graph(path).matrix - g.matrix).max() == 0

    @pytest.mark.parametrize("body", [
        "3 1 flow\n0 0 1\n",
        "3 1 flow\n1 0 1\n",
        "3 1 flow\n0 3 1\n",
        "3 1 spatial\n0 1 -0.5\n",
        "3 2 flow\n0 1 1\n0 1 1\n",
        "3 2 flow\n0 1 1\n",
        "3 flow\n",
        "3 1 road\n0 1 1\n",
    ])
    def test_rejects_corrupt_files(self, tmp_path, body):
        """Test self-loops, bad ids, bad weights, duplicates and bad headers are rejected."""
        path = tmp_path / "graph.txt"
        path.write_text(body)
        with pytest.raises(ValidationError):
            read_graph(str(path))
