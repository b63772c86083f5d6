"""Tests for the training loop, embedding files and end-to-end embedding quality."""

import numpy as np
import pytest

from errors import TrainingError, ValidationError
from evaluation import RegionLabeling, mean_cosine_by_region, region_accuracy_at_k, top_k_neighbors
from gcn_model import ModelGraphs, TrainConfig, embed_all, full_softmax_log_likelihood, init_params
from geo_cells import CellId, GeoPoint, cell_center, cell_from_grid, grid_position, haversine_distance
from graphs import build_flow_graph, build_spatial_graph, normalize_adjacency
from synthetic_city import SyntheticCityConfig, generate_synthetic_city
from trainer import EmbeddingMatrix, Trainer, read_embeddings, train, write_embeddings
from trajectories import LocationIndex, Trajectory, build_location_index, encode_trajectories, sessionize


def _grid_walks(rng, origin, cols, rows, count, length, col_offset=0):
    """Random walks over a cols×rows block of level-18 cells, one grid step at a time."""
    col0, row0 = origin
    trajs = []
    for k in range(count):
        c, r = int(rng.integers(cols)), int(rng.integers(rows))
        cells = [cell_from_grid(col0 + col_offset + c, row0 + r, 18)]
        while len(cells) < length:
            dc, dr = [(1, 0), (-1, 0), (0, 1), (0, -1)][int(rng.integers(4))]
            if 0 <= c + dc < cols and 0 <= r + dr < rows:
                c, r = c + dc, r + dr
                cells.append(cell_from_grid(col0 + col_offset + c, row0 + r, 18))
        trajs.append(Trajectory(f"u{col_offset}_{k}", tuple(cells), tuple(60 * i for i in range(length))))
    return trajs


def _prepare(trajs, index, delta):
    flow = normalize_adjacency(build_flow_graph(trajs, index))
    spatial = normalize_adjacency(build_spatial_graph(index, delta))
    return encode_trajectories(trajs, index), ModelGraphs(flow, spatial)


@pytest.fixture
def origin():
    return grid_position(GeoPoint(23.1291, 113.2644), 18)


@pytest.fixture
def small_corpus(rng, origin):
    trajs = _grid_walks(rng, origin, cols=6, rows=3, count=20, length=6)
    index = build_location_index(trajs)
    encoded, graphs = _prepare(trajs, index, 300.0)
    return encoded, graphs, index


class TestEmbeddingFiles:
    """Tests for the N d word-vector text format."""

    def test_roundtrip_is_lossless(self, tmp_path, rng, street_cells):
        """Test vectors survive a write and read bit for bit."""
        emb = EmbeddingMatrix(street_cells, rng.normal(size=(5, 3)) * 1e-7)
        path = str(tmp_path / "embeddings.txt")
        write_embeddings(path, emb)
        loaded = read_embeddings(path)
        assert loaded.cells == street_cells
        assert np.array_equal(loaded.vectors, emb.vectors)

    @pytest.mark.parametrize("body", [
        "two 2\n",
        "2 2\n18:1 0.1 0.2\n",
        "1 2\n18:1 0.1\n",
        "1 2\n18:1 0.1 0.2\n18:2 0.3 0.4\n",
        "1 2\nnope 0.1 0.2\n",
        "1 2\n18:1 0.1 abc\n",
    ])
    def test_rejects_corrupt_files(self, tmp_path, body):
        """Test bad headers, row counts, widths, ids and numbers are rejected."""
        path = tmp_path / "embeddings.txt"
        path.write_text(body)
        with pytest.raises(ValidationError):
            read_embeddings(str(path))

    def test_matrix_checks(self, street_cells):
        """Test shape, finiteness and lookup errors."""
        with pytest.raises(ValueError):
            EmbeddingMatrix(street_cells, np.zeros((4, 2)))
        with pytest.raises(ValueError):
            EmbeddingMatrix(street_cells[:1], np.array([[np.nan, 0.0]]))
        emb = EmbeddingMatrix(street_cells, np.ones((5, 2)))
        assert emb.row_of(street_cells[3]) == 3
        with pytest.raises(KeyError):
            emb.row_of(CellId(18, 0))


class TestTrainer:
    """Tests for the SGD loop on small corpora."""

    def test_only_single_positions(self, street_cells):
        """Test length-1 trajectories leave the initial forward pass unchanged."""
        index = LocationIndex(street_cells, [1] * 5)
        trajs = [Trajectory("u", (c,), (0,)) for c in street_cells]
        encoded, graphs = _prepare(trajs, index, 300.0)
        cfg = TrainConfig(dim=4, seed=11)
        trainer = Trainer(encoded, graphs, index, cfg)
        emb = trainer.fit()
        expected = embed_all(init_params(5, cfg, np.random.default_rng(11)), graphs, cfg)
        assert np.array_equal(emb.vectors, expected)
        assert trainer.history == [] and trainer.steps == 0

    def test_deterministic_single_worker(self, small_corpus):
        """Test two runs with the same seed are bit-identical."""
        encoded, graphs, index = small_corpus
        cfg = TrainConfig(dim=6, window=2, negatives=3, epochs=3, seed=5)
        a = Trainer(encoded, graphs, index, cfg)
        b = Trainer(encoded, graphs, index, cfg)
        emb_a, emb_b = a.fit(), b.fit()
        assert np.array_equal(emb_a.vectors, emb_b.vectors)
        assert [h.mean_loss for h in a.history] == [h.mean_loss for h in b.history]

    def test_seed_changes_result(self, small_corpus):
        """Test a different seed gives different embeddings."""
        encoded, graphs, index = small_corpus
        a = Trainer(encoded, graphs, index, TrainConfig(dim=6, epochs=1, seed=1)).fit()
        b = Trainer(encoded, graphs, index, TrainConfig(dim=6, epochs=1, seed=2)).fit()
        assert not np.array_equal(a.vectors, b.vectors)

    def test_hogwild_finite_and_decreasing(self, small_corpus):
        """Test lock-free workers keep parameters finite and reduce the loss."""
        encoded, graphs, index = small_corpus
        cfg = TrainConfig(dim=8, window=2, negatives=3, epochs=6, tolerance=0.0, workers=4, seed=9)
        trainer = Trainer(encoded, graphs, index, cfg)
        emb = trainer.fit()
        assert np.isfinite(emb.vectors).all()
        assert len(trainer.history) == 6
        assert trainer.history[-1].mean_loss < trainer.history[0].mean_loss

    def test_nan_raises_training_error(self, small_corpus):
        """Test non-finite parameters abort with the failing batch id."""
        encoded, graphs, index = small_corpus
        trainer = Trainer(encoded, graphs, index, TrainConfig(dim=4, epochs=1))
        trainer.params.U0[:] = np.nan
        with pytest.raises(TrainingError) as info:
            trainer.fit()
        assert info.value.batch_id == 0

    def test_learning_rate_decays(self, small_corpus):
        """Test lr falls linearly towards min_lr across epochs."""
        encoded, graphs, index = small_corpus
        cfg = TrainConfig(dim=4, epochs=4, tolerance=0.0, lr=0.05, min_lr=0.001)
        trainer = Trainer(encoded, graphs, index, cfg)
        trainer.fit()
        lrs = [h.lr for h in trainer.history]
        assert lrs == sorted(lrs, reverse=True)
        assert lrs[-1] == pytest.approx(0.001, abs=1e-3)

    def test_convergence_stops_early(self, small_corpus):
        """Test a loose tolerance stops after the second epoch."""
        encoded, graphs, index = small_corpus
        trainer = Trainer(encoded, graphs, index, TrainConfig(dim=4, epochs=20, tolerance=10.0))
        trainer.fit()
        assert trainer.converged and len(trainer.history) == 2

    def test_size_mismatch(self, small_corpus, street_cells):
        """Test graphs and index must describe the same locations."""
        encoded, graphs, _ = small_corpus
        with pytest.raises(ValidationError):
            Trainer(encoded, graphs, LocationIndex(street_cells, [1] * 5), TrainConfig())

    def test_step_path_selection(self, small_corpus):
        """Test one-layer models use neighbour tables and deeper ones the CSR path."""
        encoded, graphs, index = small_corpus
        assert Trainer(encoded, graphs, index, TrainConfig(dim=4)).fast_step is not None
        deep = Trainer(encoded, graphs, index, TrainConfig(dim=4, layers=2, epochs=2))
        assert deep.fast_step is None
        assert np.isfinite(deep.fit().vectors).all()

    @pytest.mark.parametrize("agg", ["mean", "max"])
    def test_table_and_csr_paths_agree(self, small_corpus, agg):
        """Test both step implementations train to the same embeddings from one seed."""
        encoded, graphs, index = small_corpus
        cfg = TrainConfig(dim=6, window=2, negatives=3, epochs=2, tolerance=0.0, agg=agg, seed=4)
        fast = Trainer(encoded, graphs, index, cfg)
        general = Trainer(encoded, graphs, index, cfg)
        general.fast_step = None
        emb_fast, emb_general = fast.fit(), general.fit()
        assert np.allclose(emb_fast.vectors, emb_general.vectors, rtol=0, atol=1e-9)
        assert np.array_equal(fast.touch_counts, general.touch_counts)

    def test_train_single_graph(self, rng, origin):
        """Test the convenience wrapper accepts a missing branch for an ablation variant."""
        trajs = _grid_walks(rng, origin, cols=4, rows=2, count=8, length=5)
        index = build_location_index(trajs)
        flow = normalize_adjacency(build_flow_graph(trajs, index))
        emb = train(trajs, flow, None, index, TrainConfig(dim=4, epochs=2, graphs="flow"))
        assert emb.n == index.n and emb.cells == index.cells


class TestTrainingQuality:
    """Tests for what training achieves on constructed data."""

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_full_softmax_likelihood_improves(self, origin, seed):
        """Test 50 epochs raise the exact likelihood on a 50-location corpus."""
        rng = np.random.default_rng(seed)
        trajs = _grid_walks(rng, origin, cols=10, rows=5, count=40, length=8)
        index = build_location_index(trajs)
        index.extend(cell_from_grid(origin[0] + c, origin[1] + r, 18) for r in range(5) for c in range(10))
        assert index.n == 50
        encoded, graphs = _prepare(trajs, index, 300.0)
        cfg = TrainConfig(dim=8, window=2, negatives=3, epochs=50, tolerance=0.0, seed=seed)
        trainer = Trainer(encoded, graphs, index, cfg)
        before = full_softmax_log_likelihood(encoded, trainer.params.copy(), graphs, cfg)
        trainer.fit()
        after = full_softmax_log_likelihood(encoded, trainer.params, graphs, cfg)
        assert after > before

    def test_unvisited_cell_learns_from_neighbours(self, rng, origin):
        """Test a cell absent from every trajectory still trains and lands near its neighbours."""
        delta = 1000.0
        trajs = _grid_walks(rng, origin, cols=5, rows=1, count=30, length=6)
        trajs += _grid_walks(rng, origin, cols=5, rows=1, count=30, length=6, col_offset=40)
        index = build_location_index(trajs)
        lonely = cell_from_grid(origin[0] + 5, origin[1], 18)
        assert index.extend([lonely]) == 1
        encoded, graphs = _prepare(trajs, index, delta)

        cfg = TrainConfig(dim=8, window=2, negatives=3, epochs=20, seed=3)
        trainer = Trainer(encoded, graphs, index, cfg)
        emb = trainer.fit()

        lonely_id = index.id_of(lonely)
        assert trainer.touch_counts[lonely_id] > 0
        assert np.isfinite(emb.vectors[lonely_id]).all()
        (nearest, _), = top_k_neighbors(emb, lonely_id, 1)
        assert haversine_distance(cell_center(lonely), cell_center(emb.cells[nearest])) <= delta


def _train_city(city_cfg, train_cfg):
    city = generate_synthetic_city(city_cfg)
    trajs = sessionize(city.records, max_gap=3600, level=city_cfg.level)
    index = build_location_index(trajs)
    flow = normalize_adjacency(build_flow_graph(trajs, index))
    spatial = normalize_adjacency(build_spatial_graph(index, 500.0))
    emb = train(trajs, flow, spatial, index, train_cfg)
    return emb, RegionLabeling.from_cells(index, city.cell_regions)


@pytest.mark.slow
class TestSyntheticCity:
    """Tests for region recovery on the synthetic city."""

    def test_region_separation(self):
        """Test trained embeddings separate regions well above the random baseline."""
        emb, regions = _train_city(SyntheticCityConfig(seed=7), TrainConfig(seed=7))
        intra, inter = mean_cosine_by_region(emb, regions)
        assert intra - inter >= 0.2
        assert region_accuracy_at_k(emb, regions, k=5, seed=7) >= 0.6
        # ten draws per region lower the variance of the same estimate
        assert region_accuracy_at_k(emb, regions, k=5, seed=7, samples_per_region=10) >= 0.6

    def test_spatial_graph_does_not_hurt(self):
        """Test both graphs match or beat flow-only Accuracy@5 in a majority of seeds."""
        wins = 0
        for seed in range(5):
            city_cfg = SyntheticCityConfig(trajectories=500, seed=seed)
            both, regions = _train_city(city_cfg, TrainConfig(epochs=10, seed=seed))
            flow_only, _ = _train_city(city_cfg, TrainConfig(epochs=10, seed=seed, graphs="flow"))
            acc_both = region_accuracy_at_k(both, regions, k=5, seed=seed, samples_per_region=10)
            acc_flow = region_accuracy_at_k(flow_only, regions, k=5, seed=seed, samples_per_region=10)
            wins += acc_both >= acc_flow
        assert wins >= 3
