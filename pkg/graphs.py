# graphs.py
# ──────────────────────────────────────────────────────────────────────────────
# Графы над локациями:
#   build_flow_graph()     вес (i,j) = сколько раз i и j шли подряд в траекториях
#   build_spatial_graph()  вес (i,j) = exp(-dist/Δ), если dist ≤ Δ
#   normalize_adjacency()  Â = D̃^{-1/2} (A + I) D̃^{-1/2}
#
# Хранение — scipy CSR, оба направления ребра, без петель.
# Петли (A + I) добавляются только при нормализации: сырые графы остаются
# интерпретируемыми, а нормализованные никогда не пишутся на диск.
#
# Файл графа:
#   N E kind
#   i j w        (одна строка на неориентированное ребро, i < j)
# ──────────────────────────────────────────────────────────────────────────────

import itertools
import logging
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import sparse

from config import (
    DEFAULT_DELTA_M, DEFAULT_MIN_FLOW_COUNT, GRAPH_KIND_FLOW, GRAPH_KIND_SPATIAL, FLOAT_FORMAT,
)
from errors import ValidationError
from geo_cells import GeoPoint, cell_center, haversine_many, to_unit_xyz, format_cell_id
from trajectories import LocationIndex, Trajectory

log = logging.getLogger("Graph")


@dataclass(frozen=True)
class WeightedGraph:
    """Симметричный взвешенный граф без петель. matrix — CSR (n × n)."""
    n: int
    kind: str
    matrix: sparse.csr_matrix

    @property
    def indptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def weights(self) -> np.ndarray:
        return self.matrix.data

    @property
    def edge_count(self) -> int:
        """Число неориентированных рёбер."""
        return self.matrix.nnz // 2

    def edges(self) -> Iterable[tuple[int, int, float]]:
        """Неориентированные рёбра (i, j, w) с i < j, по возрастанию i, затем j."""
        coo = sparse.triu(self.matrix, k=1, format="csr")
        for i in range(self.n):
            start, end = coo.indptr[i], coo.indptr[i + 1]
            for j, w in zip(coo.indices[start:end], coo.data[start:end]):
                yield i, int(j), w

    def total_weight(self):
        """Сумма весов по неориентированным рёбрам."""
        return self.matrix.data.sum() / 2


@dataclass(frozen=True)
class NormalizedGraph:
    """Â = D̃^{-1/2} Ã D̃^{-1/2} в CSR. Диагональ всегда присутствует."""
    n: int
    matrix: sparse.csr_matrix


def _symmetric_csr(n: int, i: np.ndarray, j: np.ndarray, w: np.ndarray, dtype) -> sparse.csr_matrix:
    """Рёбра (i, j, w) с i ≠ j, каждое один раз → симметричная CSR с отсортированными индексами."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    w = np.asarray(w, dtype=dtype)
    rows = np.concatenate((i, j))
    cols = np.concatenate((j, i))
    data = np.concatenate((w, w))
    m = sparse.csr_matrix((data, (rows, cols)), shape=(n, n), dtype=dtype)
    m.sum_duplicates()
    m.sort_indices()
    return m


def _counter_to_csr(n: int, counts: Counter, dtype) -> sparse.csr_matrix:
    if counts:
        ij = np.array(list(counts.keys()), dtype=np.int64)
        w = np.array(list(counts.values()), dtype=dtype)
        return _symmetric_csr(n, ij[:, 0], ij[:, 1], w, dtype)
    empty = np.zeros(0, dtype=np.int64)
    return _symmetric_csr(n, empty, empty, np.zeros(0, dtype=dtype), dtype)


# ══════════════════════════════════════════════════════════════════════════════
# Потоковый граф
# ══════════════════════════════════════════════════════════════════════════════
def _count_pairs(trajectories: list[Trajectory], index: LocationIndex) -> Counter:
    counts: Counter = Counter()
    for traj in trajectories:
        for a, b in zip(traj.cells, traj.cells[1:]):
            i, j = index.id_of(a), index.id_of(b)
            # Петли не храним: sessionize схлопывает дубликаты, сюда они попадают только из чужих файлов
            if i == j:
                continue
            counts[(i, j) if i < j else (j, i)] += 1
    return counts


def build_flow_graph(trajectories: Iterable[Trajectory], index: LocationIndex,
                     min_count: int = DEFAULT_MIN_FLOW_COUNT, workers: int = 1) -> WeightedGraph:
    """
    Неориентированный граф переходов: каждая пара соседних позиций траектории
    добавляет 1 к весу ребра между их id. Веса — точные целые (int64).

    workers > 1: траектории шардируются по потокам, частичные счётчики
    складываются — результат не зависит от порядка слияния.

    Raises:
        ValidationError — ячейка траектории не найдена в индексе
    """
    trajectories = list(trajectories)
    for traj in trajectories:
        for cell in traj.cells:
            if cell not in index:
                raise ValidationError(f"Ячейка {format_cell_id(cell)} отсутствует в индексе локаций")

    if workers <= 1 or len(trajectories) < 2:
        counts = _count_pairs(trajectories, index)
    else:
        partial: list[Counter] = [Counter() for _ in range(workers)]

        def _worker(shard: int):
            partial[shard] = _count_pairs(trajectories[shard::workers], index)

        threads = [
            threading.Thread(target=_worker, args=(s,), daemon=True, name=f"flow-{s}")
            for s in range(workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        counts = Counter()
        for c in partial:
            counts.update(c)

    if min_count > 1:
        counts = Counter({k: v for k, v in counts.items() if v >= min_count})

    graph = WeightedGraph(index.n, GRAPH_KIND_FLOW, _counter_to_csr(index.n, counts, np.int64))
    log.info(f"Потоковый граф: N={graph.n}, рёбер={graph.edge_count}")
    return graph


# ══════════════════════════════════════════════════════════════════════════════
# Пространственный граф
# ══════════════════════════════════════════════════════════════════════════════
# 13 "положительных" смещений из 26: каждая пара соседних бакетов обходится один раз
_NEIGHBOR_OFFSETS = [o for o in itertools.product((-1, 0, 1), repeat=3) if o > (0, 0, 0)]


def _spatial_pairs(lat: np.ndarray, lng: np.ndarray, delta: float,
                   buckets: dict[tuple, np.ndarray], keys: list[tuple]):
    found_i: list[np.ndarray] = []
    found_j: list[np.ndarray] = []
    found_w: list[np.ndarray] = []

    def _emit(a: np.ndarray, b: np.ndarray):
        dist = haversine_many(lat[a], lng[a], lat[b], lng[b])
        keep = dist <= delta
        found_i.append(np.minimum(a[keep], b[keep]))
        found_j.append(np.maximum(a[keep], b[keep]))
        found_w.append(np.exp(-dist[keep] / delta))

    for key in keys:
        members = buckets[key]
        if len(members) > 1:
            a, b = np.triu_indices(len(members), k=1)
            _emit(members[a], members[b])
        for off in _NEIGHBOR_OFFSETS:
            other = buckets.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if other is None:
                continue
            _emit(np.repeat(members, len(other)), np.tile(other, len(members)))

    if not found_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=np.float64)
    return np.concatenate(found_i), np.concatenate(found_j), np.concatenate(found_w)


def _bucketize(lat: np.ndarray, lng: np.ndarray, delta: float) -> dict[tuple, np.ndarray]:
    """Центры → 3D-хеш на сфере с ребром бакета delta. Значение — отсортированные id."""
    if not len(lat):
        return {}
    keys = np.floor(to_unit_xyz(lat, lng) / delta).astype(np.int64)
    order = np.lexsort(keys.T[::-1])
    bounds = np.flatnonzero(np.any(np.diff(keys[order], axis=0) != 0, axis=1)) + 1
    buckets: dict[tuple, np.ndarray] = {}
    for chunk in np.split(order, bounds):
        buckets[tuple(int(v) for v in keys[chunk[0]])] = np.sort(chunk)
    return buckets


def build_spatial_graph_from_points(points: list[GeoPoint], delta: float = DEFAULT_DELTA_M,
                                    workers: int = 1) -> WeightedGraph:
    """
    Рёбра между всеми парами точек на расстоянии ≤ delta, вес exp(-dist/delta).

    Поиск соседей не O(N²): центры кладутся в 3D-хеш на сфере с ребром
    бакета delta. Хорда не длиннее дуги, поэтому любая пара в пределах delta
    лежит в одном или соседних бакетах (и через антимеридиан, и у полюсов).
    """
    if delta <= 0:
        raise ValueError(f"delta должна быть > 0, получено {delta}")
    n = len(points)
    lat = np.array([p.lat for p in points], dtype=np.float64)
    lng = np.array([p.lng for p in points], dtype=np.float64)
    buckets = _bucketize(lat, lng, delta)
    keys = sorted(buckets)

    if workers <= 1 or len(keys) < 2:
        i, j, w = _spatial_pairs(lat, lng, delta, buckets, keys)
    else:
        partial: list[tuple | None] = [None] * workers

        def _worker(shard: int):
            partial[shard] = _spatial_pairs(lat, lng, delta, buckets, keys[shard::workers])

        threads = [
            threading.Thread(target=_worker, args=(s,), daemon=True, name=f"spatial-{s}")
            for s in range(workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        i, j, w = (np.concatenate(parts) for parts in zip(*partial))

    graph = WeightedGraph(n, GRAPH_KIND_SPATIAL, _symmetric_csr(n, i, j, w, np.float64))
    log.info(f"Пространственный граф: N={graph.n}, рёбер={graph.edge_count}, Δ={delta:g} м")
    return graph


def build_spatial_graph(index: LocationIndex, delta: float = DEFAULT_DELTA_M,
                        workers: int = 1) -> WeightedGraph:
    """Пространственный граф по центрам всех ячеек индекса."""
    return build_spatial_graph_from_points([cell_center(c) for c in index.cells], delta, workers)


# ══════════════════════════════════════════════════════════════════════════════
# Нормализация
# ══════════════════════════════════════════════════════════════════════════════
def normalize_adjacency(g: WeightedGraph, self_loop_weight: float = 1.0) -> NormalizedGraph:
    """
    Â = D̃^{-1/2} Ã D̃^{-1/2}, Ã = A + self_loop_weight·I, D̃_ii = Σ_j Ã_ij.
    Изолированная вершина получает D̃_ii = self_loop_weight — деления на ноль нет.
    """
    if self_loop_weight <= 0:
        raise ValueError(f"self_loop_weight должен быть > 0, получено {self_loop_weight}")
    a = g.matrix.astype(np.float64)
    a_tilde = (a + self_loop_weight * sparse.identity(g.n, dtype=np.float64, format="csr")).tocsr()
    degree = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = sparse.diags(1.0 / np.sqrt(degree))
    a_hat = (d_inv_sqrt @ a_tilde @ d_inv_sqrt).tocsr()
    a_hat.sum_duplicates()
    a_hat.sort_indices()
    return NormalizedGraph(g.n, a_hat)


# ══════════════════════════════════════════════════════════════════════════════
# Файлы
# ══════════════════════════════════════════════════════════════════════════════
def _format_weight(w, kind: str) -> str:
    if kind == GRAPH_KIND_FLOW:
        return str(int(w))
    return format(float(w), FLOAT_FORMAT)


def write_graph(path: str, g: WeightedGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{g.n} {g.edge_count} {g.kind}\n")
        for i, j, w in g.edges():
            f.write(f"{i} {j} {_format_weight(w, g.kind)}\n")


def read_graph(path: str) -> WeightedGraph:
    """
    Raises:
        ValidationError — битый заголовок/строка, петля, id вне [0, N), число рёбер не сходится
    """
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 3 or header[2] not in (GRAPH_KIND_FLOW, GRAPH_KIND_SPATIAL):
            raise ValidationError(f"{path}: ожидался заголовок 'N E kind'")
        try:
            n, e = int(header[0]), int(header[1])
        except ValueError:
            raise ValidationError(f"{path}: ожидался заголовок 'N E kind'")
        kind = header[2]
        dtype = np.int64 if kind == GRAPH_KIND_FLOW else np.float64
        pairs: Counter = Counter()
        for line_no, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            try:
                i, j = int(parts[0]), int(parts[1])
                w = int(parts[2]) if kind == GRAPH_KIND_FLOW else float(parts[2])
            except (ValueError, IndexError):
                raise ValidationError(f"{path}:{line_no}: битая строка ребра")
            if not (0 <= i < j < n):
                raise ValidationError(f"{path}:{line_no}: ожидалось 0 ≤ i < j < N, получено {i} {j}")
            if not w > 0:
                raise ValidationError(f"{path}:{line_no}: вес ребра должен быть > 0, получено {w}")
            if (i, j) in pairs:
                raise ValidationError(f"{path}:{line_no}: ребро {i} {j} повторяется")
            pairs[(i, j)] = w
    if len(pairs) != e:
        raise ValidationError(f"{path}: заявлено рёбер {e}, прочитано {len(pairs)}")
    return WeightedGraph(n, kind, _counter_to_csr(n, pairs, dtype))
