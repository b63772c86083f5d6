"""Tests for cosine queries, region accuracy and feature export."""

import io
import math

import numpy as np
import pandas as pd
import pytest

from errors import ValidationError
from evaluation import (
    RegionLabeling, accuracy_table, cosine_similarity, evaluate_regions, export_features,
    mean_cosine_by_region, read_features, read_region_labeling, region_accuracy_at_k,
    top_k_neighbors, write_neighbors, write_region_labeling,
)
from geo_cells import CellId
from trainer import EmbeddingMatrix
from trajectories import LocationIndex


def _cells(n):
    return [CellId(18, k) for k in range(n)]


def _emb(vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    return EmbeddingMatrix(_cells(len(vectors)), vectors)


def _separated(regions, per_region, dim=None):
    """Constant vector per region, one basis direction each."""
    dim = dim or regions
    vectors, labels = [], {}
    for r in range(regions):
        for _ in range(per_region):
            labels[len(vectors)] = f"R{r}"
            vectors.append(np.eye(dim)[r])
    return _emb(vectors), RegionLabeling(len(vectors), labels)


class TestCosine:
    """Tests for pairwise cosine similarity."""

    def test_examples(self):
        """Test parallel, orthogonal and opposite vectors."""
        assert cosine_similarity([1, 0], [2, 0]) == 1.0
        assert cosine_similarity([1, 0], [0, 3]) == 0.0
        assert cosine_similarity([1, 1], [-1, -1]) == pytest.approx(-1.0)

    def test_clamped(self, rng):
        """Test results never leave [-1, 1]."""
        for _ in range(100):
            u = rng.normal(size=5)
            assert -1.0 <= cosine_similarity(u, u * 1.0000001) <= 1.0

    def test_errors(self):
        """Test zero vectors and shape mismatch raise."""
        with pytest.raises(ValueError):
            cosine_similarity([0, 0], [1, 0])
        with pytest.raises(ValueError):
            cosine_similarity([1, 0], [1, 0, 0])


class TestTopK:
    """Tests for exact nearest-neighbour queries."""

    def test_identity_basis_tie_break(self):
        """Test equal similarities are ordered by ascending id."""
        emb = _emb(np.eye(4))
        assert top_k_neighbors(emb, 0, 3) == [(1, 0.0), (2, 0.0), (3, 0.0)]

    def test_duplicate_comes_first(self, rng):
        """Test an exact copy of the query ranks first with similarity 1."""
        vectors = rng.normal(size=(10, 4))
        vectors[7] = vectors[2]
        (first, sim), *_ = top_k_neighbors(_emb(vectors), 2, 3)
        assert first == 7 and sim == pytest.approx(1.0)

    def test_brute_force_oracle(self, rng):
        """Test agreement with a per-pair scan on N=100."""
        vectors = rng.normal(size=(100, 8))
        emb = _emb(vectors)
        for query in (0, 42, 99):
            sims = [(cosine_similarity(vectors[query], vectors[i]), i) for i in range(100) if i != query]
            expected = [i for _, i in sorted(sims, key=lambda s: (-s[0], s[1]))[:10]]
            assert [i for i, _ in top_k_neighbors(emb, query, 10)] == expected

    def test_scale_invariance(self, rng):
        """Test scaling all vectors leaves the ranking unchanged."""
        vectors = rng.normal(size=(30, 5))
        a = top_k_neighbors(_emb(vectors), 4, 8)
        b = top_k_neighbors(_emb(vectors * 3.7), 4, 8)
        assert [i for i, _ in a] == [i for i, _ in b]
        assert np.allclose([s for _, s in a], [s for _, s in b], atol=1e-12)

    def test_errors(self, rng):
        """Test k outside [1, N) and bad ids raise."""
        emb = _emb(rng.normal(size=(5, 2)))
        for k in (0, 5):
            with pytest.raises(ValueError):
                top_k_neighbors(emb, 0, k)
        with pytest.raises(ValueError):
            top_k_neighbors(emb, 5, 1)
        with pytest.raises(ValueError):
            top_k_neighbors(_emb(np.zeros((3, 2))), 0, 1)


class TestRegionAccuracy:
    """Tests for Accuracy@K over labelled regions."""

    def test_perfect_separation(self):
        """Test constant-per-region embeddings score 1.0."""
        emb, regions = _separated(4, 8)
        assert region_accuracy_at_k(emb, regions, k=5, seed=0) == 1.0

    def test_random_baseline(self):
        """Test random embeddings land near (n-1)/(N-1) on average."""
        regions = RegionLabeling(100, {i: f"R{i // 25}" for i in range(100)})
        scores = []
        for seed in range(200):
            rng = np.random.default_rng(seed)
            emb = _emb(rng.normal(size=(100, 16)))
            scores.append(region_accuracy_at_k(emb, regions, k=5, seed=seed))
        assert np.mean(scores) == pytest.approx(24 / 99, abs=0.05)

    def test_small_regions_skipped(self):
        """Test regions with at most K members are reported as skipped."""
        emb, regions = _separated(3, 4)
        labels = dict(regions.labels)
        labels.update({12 + k: "big" for k in range(8)})
        vectors = np.vstack((emb.vectors, np.tile([1.0, 1.0, 1.0], (8, 1))))
        report = evaluate_regions(_emb(vectors), RegionLabeling(20, labels), k=5, seed=1)
        assert report.skipped == ["R0", "R1", "R2"]
        assert list(report.per_region) == ["big"]

    def test_all_skipped(self):
        """Test accuracy is undefined when every region is too small."""
        emb, regions = _separated(3, 3)
        with pytest.raises(ValueError):
            region_accuracy_at_k(emb, regions, k=5, seed=0)

    def test_seeded(self, rng):
        """Test the same seed picks the same query cells."""
        regions = RegionLabeling(60, {i: f"R{i % 3}" for i in range(60)})
        emb = _emb(rng.normal(size=(60, 4)))
        a = evaluate_regions(emb, regions, 5, seed=3, samples_per_region=4)
        b = evaluate_regions(emb, regions, 5, seed=3, samples_per_region=4)
        assert a == b

    def test_accuracy_table(self):
        """Test one row per K with NaN where no region qualifies."""
        emb, regions = _separated(2, 8)
        table = accuracy_table(emb, regions, seed=0, ks=[5, 10])
        assert list(table.columns) == ["k", "accuracy", "regions", "skipped"]
        assert table.loc[0, "accuracy"] == 1.0 and table.loc[0, "regions"] == 2
        assert math.isnan(table.loc[1, "accuracy"])

    def test_labeling_from_cells(self):
        """Test cells missing from the index are ignored."""
        index = LocationIndex(_cells(3), [1, 1, 1])
        labeling = RegionLabeling.from_cells(index, {CellId(18, 2): "A", CellId(18, 0): "A", CellId(18, 9): "B"})
        assert labeling.members == {"A": [0, 2]}

    def test_labeling_out_of_range(self):
        """Test labels must refer to existing ids."""
        with pytest.raises(ValueError):
            RegionLabeling(2, {5: "A"})


class TestMeanCosine:
    """Tests for the intra/inter region cosine statistic."""

    def test_separated(self):
        """Test orthogonal regions give intra 1 and inter 0."""
        emb, regions = _separated(3, 4)
        intra, inter = mean_cosine_by_region(emb, regions)
        assert intra == pytest.approx(1.0) and inter == pytest.approx(0.0)

    def test_single_region(self):
        """Test a single region has no inter-region pairs."""
        emb = _emb(np.ones((3, 2)))
        with pytest.raises(ValueError):
            mean_cosine_by_region(emb, RegionLabeling(3, {0: "A", 1: "A", 2: "A"}))


class TestFiles:
    """Tests for feature, region and neighbour CSV files."""

    def test_features_roundtrip(self, tmp_path, rng):
        """Test exported features read back bit for bit."""
        emb = _emb(rng.normal(size=(6, 3)) / 7.0)
        path = str(tmp_path / "features.csv")
        export_features(path, emb)
        loaded = read_features(path)
        assert loaded.cells == emb.cells
        assert np.array_equal(loaded.vectors, emb.vectors)

    def test_features_subset_order(self, tmp_path, rng):
        """Test rows follow the requested id order."""
        emb = _emb(rng.normal(size=(6, 3)))
        path = str(tmp_path / "features.csv")
        export_features(path, emb, [4, 1])
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["cell_id", "v1", "v2", "v3"]
        assert list(frame["cell_id"]) == ["18:4", "18:1"]

    def test_features_empty_list(self, tmp_path, rng):
        """Test an empty id list writes only the header."""
        path = tmp_path / "features.csv"
        export_features(str(path), _emb(rng.normal(size=(2, 2))), [])
        assert path.read_text() == "cell_id,v1,v2\n"

    def test_features_bad_id(self, tmp_path, rng):
        """Test unknown ids are rejected before writing."""
        with pytest.raises(ValueError):
            export_features(str(tmp_path / "f.csv"), _emb(rng.normal(size=(2, 2))), [2])

    def test_region_labeling_file(self, tmp_path):
        """Test cell to region labels survive a write and read."""
        labels = {CellId(18, 3): "north", CellId(18, 1): "south"}
        path = str(tmp_path / "regions.csv")
        write_region_labeling(path, labels)
        assert read_region_labeling(path) == labels

    @pytest.mark.parametrize("body", [
        "cell,region\n18:1,A\n",
        "cell_id,region_id\n18:x,A\n",
        "cell_id,region_id\n18:1,A\n18:1,B\n",
    ])
    def test_region_labeling_rejects(self, tmp_path, body):
        """Test bad headers, ids and duplicate cells are rejected."""
        path = tmp_path / "regions.csv"
        path.write_text(body)
        with pytest.raises(ValidationError):
            read_region_labeling(str(path))

    def test_neighbors_csv(self):
        """Test neighbour rows carry rank, cell id and similarity."""
        emb = _emb(np.eye(3))
        buf = io.StringIO()
        write_neighbors(buf, emb, top_k_neighbors(emb, 0, 2))
        assert buf.getvalue().splitlines() == ["rank,cell_id,similarity", "1,18:1,0", "2,18:2,0"]
