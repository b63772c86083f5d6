"""Shared fixtures for the pipeline test suite."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from geo_cells import GeoPoint, cell_from_point  # noqa: E402
from graphs import WeightedGraph, _symmetric_csr  # noqa: E402
from trajectories import LbsRecord, Trajectory  # noqa: E402


def random_graph(n, rng, density=0.2, kind="spatial", integer=False):
    """Random symmetric graph without self-loops, weights in (0, 1] or small integers."""
    i, j = np.triu_indices(n, k=1)
    keep = rng.random(len(i)) < density
    i, j = i[keep], j[keep]
    if integer:
        w = rng.integers(1, 5, size=len(i)).astype(np.int64)
        dtype = np.int64
    else:
        w = rng.uniform(0.05, 1.0, size=len(i))
        dtype = np.float64
    return WeightedGraph(n, kind, _symmetric_csr(n, i, j, w, dtype))


def make_trajectory(user, cells, start=0, step=60):
    return Trajectory(user, tuple(cells), tuple(start + k * step for k in range(len(cells))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def guangzhou_point():
    return GeoPoint(23.1291, 113.2644)


@pytest.fixture
def street_cells():
    """Five adjacent level-18 cells walking east along one row."""
    from geo_cells import cell_from_grid, grid_position

    col, row = grid_position(GeoPoint(23.1291, 113.2644), 18)
    return [cell_from_grid(col + k, row, 18) for k in range(5)]


@pytest.fixture
def sample_records():
    """Two users; user b has a gap of two hours that splits the session."""
    p1 = GeoPoint(23.1291, 113.2644)
    p2 = GeoPoint(23.1300, 113.2700)
    p3 = GeoPoint(23.1400, 113.2800)
    return [
        LbsRecord("a", 100, p1),
        LbsRecord("a", 160, p2),
        LbsRecord("a", 220, p3),
        LbsRecord("b", 1000, p3),
        LbsRecord("b", 1060, p1),
        LbsRecord("b", 1060 + 7200, p2),
        LbsRecord("b", 1060 + 7260, p3),
    ]


@pytest.fixture
def level18_cell(guangzhou_point):
    return cell_from_point(guangzhou_point, 18)
