# trainer.py
# ──────────────────────────────────────────────────────────────────────────────
# Цикл обучения: эпохи → центры траекторий → SGD-шаг на один центр.
#
# Два режима:
#   workers == 1  детерминированный: один поток, один seeded RNG,
#                 два запуска с одним seed дают побитово одинаковый результат.
#   workers  > 1  throughput: потоки пишут в общие массивы параметров без
#                 локов (обновления могут перекрываться). Воспроизводимости нет,
#                 но конечность параметров и спад loss проверяются так же.
#
# Файл эмбеддингов (текстовый формат word-vectors):
#   N d
#   level:index v1 v2 ... vd
# ──────────────────────────────────────────────────────────────────────────────

import logging
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from tqdm import tqdm

from config import FLOAT_FORMAT
from errors import TrainingError, ValidationError
from geo_cells import CellId, format_cell_id, parse_cell_id
from gcn_model import (
    TrainConfig, ModelGraphs, ModelParams, NegativeSampler, SingleLayerStep, SkipGramBatch,
    init_params, skipgram_gradients, apply_gradients, embed_all, window_contexts, select_graphs,
)
from graphs import NormalizedGraph
from trajectories import LocationIndex, Trajectory, encode_trajectories

log = logging.getLogger("Train")


# ══════════════════════════════════════════════════════════════════════════════
# Результат
# ══════════════════════════════════════════════════════════════════════════════
@dataclass
class EmbeddingMatrix:
    """N×d эмбеддинги + параллельный список ячеек (строка i ↔ cells[i])."""
    cells: list[CellId]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.cells):
            raise ValueError(
                f"Эмбеддинги {self.vectors.shape} не соответствуют {len(self.cells)} ячейкам"
            )
        if not np.isfinite(self.vectors).all():
            raise ValueError("Эмбеддинги содержат NaN/Inf")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_of(self, cell: CellId) -> int:
        try:
            return self.cells.index(cell)
        except ValueError:
            raise KeyError(f"Ячейка {format_cell_id(cell)} отсутствует в эмбеддингах")


def write_embeddings(path: str, emb: EmbeddingMatrix) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{emb.n} {emb.dim}\n")
        for cell, row in zip(emb.cells, emb.vectors):
            values = " ".join(format(float(v), FLOAT_FORMAT) for v in row)
            f.write(f"{format_cell_id(cell)} {values}\n")


def read_embeddings(path: str) -> EmbeddingMatrix:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        try:
            n, d = int(header[0]), int(header[1])
        except (ValueError, IndexError):
            raise ValidationError(f"{path}: ожидался заголовок 'N d'")
        cells: list[CellId] = []
        vectors = np.empty((n, d), dtype=np.float64)
        for line_no, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(cells) >= n or len(parts) != d + 1:
                raise ValidationError(f"{path}:{line_no}: ожидалось {n} строк по {d} чисел")
            try:
                cells.append(parse_cell_id(parts[0]))
                vectors[len(cells) - 1] = [float(v) for v in parts[1:]]
            except ValueError as e:
                raise ValidationError(f"{path}:{line_no}: {e}")
    if len(cells) != n:
        raise ValidationError(f"{path}: заявлено {n} строк, прочитано {len(cells)}")
    return EmbeddingMatrix(cells, vectors)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int
    lr: float
    seconds: float


# ══════════════════════════════════════════════════════════════════════════════
# Trainer
# ══════════════════════════════════════════════════════════════════════════════
class Trainer:
    """
    Обучение по закодированным траекториям (массивы плотных id).

    После fit():
        history       — EpochStats по эпохам
        touch_counts  — сколько раз строка U0 получала градиент
        converged     — остановились по tolerance, а не по лимиту эпох
    """

    def __init__(self, trajectories: Sequence[np.ndarray], graphs: ModelGraphs,
                 index: LocationIndex, config: TrainConfig, progress: bool = False):
        self.config = config.validate()
        if graphs.n != index.n:
            raise ValidationError(f"Графы (N={graphs.n}) и индекс локаций (N={index.n}) не совпадают")
        self.graphs = graphs
        self.index = index
        self.progress = progress
        self.trajectories = [np.asarray(t, dtype=np.int64) for t in trajectories]

        self.rng = np.random.default_rng(config.seed)
        self.params: ModelParams = init_params(index.n, config, self.rng)
        self.worker_rngs = [
            np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(config.workers)
        ]
        self.sampler = NegativeSampler(index.visit_counts) if np.any(index.visit_counts > 0) else None
        # Однослойная модель учится на выровненных таблицах соседей, иначе — общий путь через CSR
        self.fast_step = SingleLayerStep(graphs, config) if SingleLayerStep.supports(graphs, config) else None
        if self.fast_step is None:
            log.info(f"Шаг SGD через CSR-срезы (layers={config.layers})")

        # Центры: (траектория, позиция). Траектории длины 1 пар не дают.
        self.centers = np.array(
            [(ti, t) for ti, traj in enumerate(self.trajectories) if len(traj) > 1 for t in range(len(traj))],
            dtype=np.int64,
        ).reshape(-1, 2)

        self.history: list[EpochStats] = []
        self.touch_counts = np.zeros(index.n, dtype=np.int64)
        self.converged = False
        self.steps = 0

    # ------------------------------------------------------------------
    # Шаг
    # ------------------------------------------------------------------
    def _learning_rate(self, step: int, total: int) -> float:
        # Линейный спад от lr к min_lr за все запланированные шаги
        frac = min(1.0, step / total) if total else 1.0
        return max(self.config.min_lr, self.config.lr + (self.config.min_lr - self.config.lr) * frac)

    def _make_batch(self, ti: int, t: int, rng: np.random.Generator) -> SkipGramBatch:
        traj = self.trajectories[ti]
        center = int(traj[t])
        contexts = window_contexts(traj, t, self.config.window)
        negatives = None
        if self.sampler is not None:
            negatives = self.sampler.try_sample(self.config.negatives, np.append(contexts, center), rng)
        if negatives is None:
            negatives = np.zeros(0, dtype=np.int64)
        return SkipGramBatch(center, contexts, negatives)

    def _step(self, batch: SkipGramBatch, lr: float, batch_id: int) -> float:
        if self.fast_step is not None:
            grads = self.fast_step.gradients(batch, self.params)
        else:
            grads = skipgram_gradients(batch, self.params, self.graphs, self.config)
        if not grads.is_finite():
            raise TrainingError(
                f"неконечный loss/градиент (loss={grads.loss}, max|g|={grads.max_abs():.3g}, "
                f"центр={batch.center}, контексты={batch.contexts.tolist()}, "
                f"негативы={batch.negatives.tolist()}, lr={lr:.3g})",
                batch_id,
            )
        if self.fast_step is not None:
            self.fast_step.apply(self.params, grads, lr)
            # Повторы в индексе увеличивают счётчик один раз
            self.touch_counts[grads.node_rows()] += 1
        else:
            apply_gradients(self.params, grads, lr)
            self.touch_counts[grads.u0_rows] += 1
        return grads.loss

    # ------------------------------------------------------------------
    # Эпохи
    # ------------------------------------------------------------------
    def _run_serial(self, order: np.ndarray, epoch: int, total_steps: int) -> tuple[float, float]:
        loss_sum = 0.0
        lr = self.config.lr
        base = epoch * len(order)
        for k, c in enumerate(order):
            step = base + k
            lr = self._learning_rate(step, total_steps)
            ti, t = self.centers[c]
            loss_sum += self._step(self._make_batch(ti, t, self.rng), lr, step)
        return loss_sum, lr

    def _run_hogwild(self, order: np.ndarray, epoch: int, total_steps: int) -> tuple[float, float]:
        workers = self.config.workers
        sums = [0.0] * workers
        errors: list[BaseException] = []
        base = epoch * len(order)

        def _worker(w: int):
            rng = self.worker_rngs[w]
            try:
                for k in range(w, len(order), workers):
                    step = base + k
                    ti, t = self.centers[order[k]]
                    lr = self._learning_rate(step, total_steps)
                    sums[w] += self._step(self._make_batch(ti, t, rng), lr, step)
            except BaseException as e:
                errors.append(e)

        threads = [
            threading.Thread(target=_worker, args=(w,), daemon=True, name=f"hogwild-{w}")
            for w in range(workers)
        ]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise errors[0]
        return sum(sums), self._learning_rate(base + len(order), total_steps)

    def fit(self) -> EmbeddingMatrix:
        cfg = self.config
        m = len(self.centers)
        if m == 0:
            log.info("Нет пар для skip-gram — эмбеддинги = начальный прямой проход")
            return self.embeddings()

        total_steps = cfg.epochs * m
        prev_loss = None
        log.info(
            f"Старт: N={self.index.n}, центров={m}, d={cfg.dim}, m={cfg.window}, K={cfg.negatives}, "
            f"graphs={cfg.graphs}, agg={cfg.agg}, workers={cfg.workers}"
        )
        for epoch in tqdm(range(cfg.epochs), desc="Train", unit="epoch", disable=not self.progress, leave=False):
            started = time.perf_counter()
            order = self.rng.permutation(m)
            if cfg.workers > 1:
                loss_sum, lr = self._run_hogwild(order, epoch, total_steps)
            else:
                loss_sum, lr = self._run_serial(order, epoch, total_steps)
            self.steps += m

            if not self.params.is_finite():
                raise TrainingError(f"параметры стали неконечными в эпохе {epoch}", self.steps - 1)

            mean_loss = loss_sum / m
            self.history.append(EpochStats(epoch, mean_loss, m, lr, time.perf_counter() - started))
            log.debug(f"Эпоха {epoch}: loss={mean_loss:.6f}, lr={lr:.5f}")

            if prev_loss is not None:
                change = abs(prev_loss - mean_loss) / max(abs(prev_loss), 1e-12)
                if change < cfg.tolerance:
                    self.converged = True
                    log.info(f"Сходимость на эпохе {epoch}: Δloss/loss = {change:.2e}")
                    break
            prev_loss = mean_loss

        if self.history:
            log.info(f"Готово: эпох={len(self.history)}, loss={self.history[-1].mean_loss:.6f}")
        return self.embeddings()

    def embeddings(self) -> EmbeddingMatrix:
        return EmbeddingMatrix(list(self.index.cells), embed_all(self.params, self.graphs, self.config))


def train(trajectories: Sequence[Trajectory], flow: NormalizedGraph | None, spatial: NormalizedGraph | None,
          index: LocationIndex, config: TrainConfig, progress: bool = False) -> EmbeddingMatrix:
    """Полный цикл: кодирование траекторий → обучение → эмбеддинги всех N локаций."""
    graphs = select_graphs(flow, spatial, config.graphs)
    encoded = encode_trajectories(trajectories, index)
    return Trainer(encoded, graphs, index, config, progress=progress).fit()
