# evaluation.py
# ──────────────────────────────────────────────────────────────────────────────
# Проверка качества эмбеддингов:
#   cosine_similarity / top_k_neighbors — точный полный перебор (без ANN)
#   region_accuracy_at_k                — доля top-K соседей из того же региона
#   mean_cosine_by_region               — средний косинус внутри / между регионами
#   export_features / read_features     — CSV cell_id,v1..vd без потерь точности
#
# Все запросы только читают эмбеддинги — безопасны для параллельных вызовов.
# ──────────────────────────────────────────────────────────────────────────────

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from config import DEFAULT_EVAL_KS, FLOAT_FORMAT
from errors import ValidationError
from geo_cells import CellId, format_cell_id, parse_cell_id
from trainer import EmbeddingMatrix
from trajectories import LocationIndex

log = logging.getLogger("Eval")

_CSV_FLOAT_FORMAT = "%" + FLOAT_FORMAT


# ══════════════════════════════════════════════════════════════════════════════
# Косинус и соседи
# ══════════════════════════════════════════════════════════════════════════════
def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    """
    u·v / (‖u‖·‖v‖), результат прижат к [-1, 1].

    Raises:
        ValueError — нулевой вектор (косинус не определён)
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"Векторы разной размерности: {u.shape} и {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("Косинус с нулевым вектором не определён")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _row_cosines(vectors: np.ndarray, query_id: int) -> np.ndarray:
    """Косинусы строки query_id со всеми строками. Нулевые строки (кроме запроса) → 0."""
    q = vectors[query_id]
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError(f"Нулевой вектор запроса (id {query_id})")
    norms = np.linalg.norm(vectors, axis=1)
    sims = np.zeros(len(vectors))
    nonzero = norms > 0
    sims[nonzero] = (vectors[nonzero] @ q) / (norms[nonzero] * qn)
    return np.clip(sims, -1.0, 1.0)


def top_k_neighbors(emb: EmbeddingMatrix, query_id: int, k: int) -> list[tuple[int, float]]:
    """
    k ближайших по косинусу (id, similarity) по убыванию; сам запрос исключён.
    Равные значения упорядочиваются по возрастанию id.

    Raises:
        ValueError — k вне [1, N), id вне [0, N) или нулевой вектор запроса
    """
    n = emb.n
    if not 0 <= query_id < n:
        raise ValueError(f"id запроса вне [0, {n}): {query_id}")
    if not 1 <= k < n:
        raise ValueError(f"k должен быть в [1, N={n}), получено {k}")
    sims = _row_cosines(emb.vectors, query_id)
    ids = np.arange(n)
    # lexsort: последний ключ — главный
    order = np.lexsort((ids, -sims))
    order = order[order != query_id][:k]
    return [(int(i), float(sims[i])) for i in order]


# ══════════════════════════════════════════════════════════════════════════════
# Регионы
# ══════════════════════════════════════════════════════════════════════════════
@dataclass
class RegionLabeling:
    """Плотный id локации → id региона. Ячейки без метки в регионы не входят."""
    n: int
    labels: dict[int, str]
    members: dict[str, list[int]] = field(init=False)

    def __post_init__(self):
        members: dict[str, list[int]] = {}
        for loc, region in sorted(self.labels.items()):
            if not 0 <= loc < self.n:
                raise ValueError(f"Метка для id {loc} вне [0, {self.n})")
            members.setdefault(str(region), []).append(loc)
        self.members = members

    @classmethod
    def from_cells(cls, index: LocationIndex, cell_regions: Mapping[CellId, str]) -> "RegionLabeling":
        """Метки по ячейкам; ячейки, которых нет в индексе, пропускаются."""
        labels = {index.id_of(c): str(r) for c, r in cell_regions.items() if c in index}
        missing = len(cell_regions) - len(labels)
        if missing:
            log.info(f"Разметка регионов: {missing} ячеек нет в индексе — пропущены")
        return cls(index.n, labels)

    @property
    def regions(self) -> list[str]:
        return sorted(self.members)


@dataclass
class RegionAccuracyReport:
    k: int
    accuracy: float
    per_region: dict[str, float]
    sampled: dict[str, int]
    skipped: list[str]


def evaluate_regions(emb: EmbeddingMatrix, regions: RegionLabeling, k: int,
                     seed: int, samples_per_region: int = 1) -> RegionAccuracyReport:
    """
    Для каждого региона с > k членами берёт samples_per_region случайных
    локаций (seeded), считает долю их top-k соседей из того же региона.

    Raises:
        ValueError — ни один регион не прошёл порог размера
    """
    if emb.n != regions.n:
        raise ValueError(f"Эмбеддинги (N={emb.n}) и разметка (N={regions.n}) не совпадают")
    if samples_per_region < 1:
        raise ValueError(f"samples_per_region должен быть ≥ 1, получено {samples_per_region}")
    rng = np.random.default_rng(seed)
    per_region: dict[str, float] = {}
    sampled: dict[str, int] = {}
    skipped: list[str] = []
    for region in regions.regions:
        members = regions.members[region]
        if len(members) <= k:
            skipped.append(region)
            continue
        picks = rng.choice(len(members), size=samples_per_region, replace=True)
        hits = []
        for p in picks:
            query = members[p]
            neighbors = top_k_neighbors(emb, query, k)
            hits.append(sum(regions.labels.get(i) == region for i, _ in neighbors) / k)
        per_region[region] = float(np.mean(hits))
        sampled[region] = int(members[picks[0]])
    if skipped:
        log.info(f"Accuracy@{k}: пропущено регионов с ≤ {k} ячейками: {len(skipped)}")
    if not per_region:
        raise ValueError(f"Accuracy@{k}: нет регионов с более чем {k} ячейками")
    accuracy = float(np.mean(list(per_region.values())))
    return RegionAccuracyReport(k, accuracy, per_region, sampled, skipped)


def region_accuracy_at_k(emb: EmbeddingMatrix, regions: RegionLabeling, k: int,
                         seed: int, samples_per_region: int = 1) -> float:
    return evaluate_regions(emb, regions, k, seed, samples_per_region).accuracy


def accuracy_table(emb: EmbeddingMatrix, regions: RegionLabeling, seed: int,
                   ks: Iterable[int] = DEFAULT_EVAL_KS) -> pd.DataFrame:
    """Accuracy@K сразу для нескольких K. K без подходящих регионов → NaN."""
    rows = []
    for k in ks:
        try:
            rep = evaluate_regions(emb, regions, k, seed)
            rows.append({"k": k, "accuracy": rep.accuracy,
                         "regions": len(rep.per_region), "skipped": len(rep.skipped)})
        except ValueError as e:
            log.warning(str(e))
            rows.append({"k": k, "accuracy": float("nan"), "regions": 0, "skipped": len(regions.members)})
    return pd.DataFrame(rows, columns=["k", "accuracy", "regions", "skipped"])


def mean_cosine_by_region(emb: EmbeddingMatrix, regions: RegionLabeling) -> tuple[float, float]:
    """(средний косинус пар внутри регионов, средний косинус пар из разных регионов)."""
    ids = np.array(sorted(regions.labels), dtype=np.int64)
    if len(ids) < 2:
        raise ValueError("Нужно хотя бы две размеченные локации")
    v = emb.vectors[ids]
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("Среди размеченных локаций есть нулевые векторы")
    unit = v / norms[:, None]
    sims = unit @ unit.T
    labels = np.array([regions.labels[i] for i in ids])
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(ids), dtype=bool)
    intra = sims[same & off_diag]
    inter = sims[~same]
    if not intra.size or not inter.size:
        raise ValueError("Нужны хотя бы два региона и регион из двух локаций")
    return float(intra.mean()), float(inter.mean())


# ══════════════════════════════════════════════════════════════════════════════
# Файлы
# ══════════════════════════════════════════════════════════════════════════════
def _feature_columns(dim: int) -> list[str]:
    return ["cell_id"] + [f"v{i}" for i in range(1, dim + 1)]


def export_features(path: str, emb: EmbeddingMatrix, ids: Sequence[int] | None = None) -> None:
    """CSV cell_id,v1..vd в порядке ids (по умолчанию все строки). Пустой ids → только заголовок."""
    ids = list(range(emb.n)) if ids is None else [int(i) for i in ids]
    for i in ids:
        if not 0 <= i < emb.n:
            raise ValueError(f"id вне [0, {emb.n}): {i}")
    frame = pd.DataFrame(emb.vectors[ids].reshape(len(ids), emb.dim), columns=_feature_columns(emb.dim)[1:])
    frame.insert(0, "cell_id", [format_cell_id(emb.cells[i]) for i in ids])
    frame.to_csv(path, index=False, float_format=_CSV_FLOAT_FORMAT, lineterminator="\n")


def read_features(path: str) -> EmbeddingMatrix:
    frame = pd.read_csv(path, dtype={"cell_id": str}, float_precision="round_trip")
    if list(frame.columns[:1]) != ["cell_id"]:
        raise ValidationError(f"{path}: первая колонка должна быть cell_id")
    try:
        cells = [parse_cell_id(c) for c in frame["cell_id"]]
    except ValueError as e:
        raise ValidationError(f"{path}: {e}")
    vectors = frame.iloc[:, 1:].to_numpy(dtype=np.float64).reshape(len(frame), frame.shape[1] - 1)
    return EmbeddingMatrix(cells, vectors)


def write_region_labeling(path: str, cell_regions: Mapping[CellId, str]) -> None:
    frame = pd.DataFrame({
        "cell_id": [format_cell_id(c) for c in cell_regions],
        "region_id": [str(r) for r in cell_regions.values()],
    })
    frame.to_csv(path, index=False, lineterminator="\n")


def read_region_labeling(path: str) -> dict[CellId, str]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != ["cell_id", "region_id"]:
        raise ValidationError(f"{path}: ожидались колонки cell_id,region_id")
    out: dict[CellId, str] = {}
    for row_no, (cell_s, region) in enumerate(zip(frame["cell_id"], frame["region_id"]), start=2):
        try:
            cell = parse_cell_id(cell_s)
        except ValueError as e:
            raise ValidationError(f"{path}:{row_no}: {e}")
        if cell in out:
            raise ValidationError(f"{path}:{row_no}: ячейка {cell_s} размечена дважды")
        out[cell] = region
    return out


def write_neighbors(path, emb: EmbeddingMatrix, neighbors: list[tuple[int, float]]) -> None:
    frame = pd.DataFrame({
        "rank": range(1, len(neighbors) + 1),
        "cell_id": [format_cell_id(emb.cells[i]) for i, _ in neighbors],
        "similarity": [s for _, s in neighbors],
    })
    frame.to_csv(path, index=False, float_format=_CSV_FLOAT_FORMAT, lineterminator="\n")
