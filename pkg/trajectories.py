# trajectories.py
# ──────────────────────────────────────────────────────────────────────────────
# LBS-записи → траектории → индекс локаций.
#
#   parse_records()        CSV `user_id,timestamp,lat,lng` → LbsRecord[] + отчёт об ошибках
#   sessionize()           записи по пользователям → траектории (правило max_gap)
#   build_location_index() траектории → плотные id 0..N-1 + счётчики посещений
#
# Файлы:
#   trajectories.tsv   user_id<TAB>cell1,cell2,...<TAB>t1,t2,...
#   locations.tsv      cell_id<TAB>visit_count   (строка i = id i)
# ──────────────────────────────────────────────────────────────────────────────

import gzip
import io
import logging
import math
import threading
import zlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from config import DEFAULT_MAX_GAP_SEC, DEFAULT_LEVEL, REJECTION_SAMPLE_LIMIT, DENSIFY_MAX_CELLS
from errors import ValidationError
from geo_cells import (
    CellId, GeoPoint, make_point, cell_from_point, cell_grid, cell_from_grid,
    format_cell_id, parse_cell_id,
)

log = logging.getLogger("Ingest")

# Magic bytes gzip — тип потока определяем по содержимому, не по расширению
_GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class LbsRecord:
    user_id: str
    timestamp: int
    point: GeoPoint


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    cells: tuple[CellId, ...]
    timestamps: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.cells)


@dataclass
class RejectionReport:
    """Счётчик отклонённых строк + первые REJECTION_SAMPLE_LIMIT примеров (номер строки, причина)."""
    count: int = 0
    samples: list[tuple[int, str]] = field(default_factory=list)

    def add(self, line_no: int, reason: str) -> None:
        self.count += 1
        if len(self.samples) < REJECTION_SAMPLE_LIMIT:
            self.samples.append((line_no, reason))


# ══════════════════════════════════════════════════════════════════════════════
# Чтение записей
# ══════════════════════════════════════════════════════════════════════════════
def open_record_stream(path: str) -> io.BufferedIOBase:
    """
    Открывает файл записей как байтовый поток.
    gzip распознаётся по magic bytes, так что records.csv.gz и
    сжатый файл без расширения читаются одинаково.
    """
    with open(path, "rb") as f:
        header = f.read(2)
    if header == _GZIP_MAGIC:
        return gzip.open(path, "rb")
    return open(path, "rb")


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _parse_line(text: str) -> LbsRecord:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"ожидалось 4 поля, получено {len(parts)}")
    user_id, ts_s, lat_s, lng_s = parts
    if not user_id:
        raise ValueError("пустой user_id")
    try:
        timestamp = int(ts_s)
    except ValueError:
        raise ValueError(f"timestamp не целое: {ts_s!r}")
    if timestamp < 0:
        raise ValueError(f"отрицательный timestamp: {timestamp}")
    try:
        lat = float(lat_s)
        lng = float(lng_s)
    except ValueError:
        raise ValueError(f"координаты не числа: {lat_s!r}, {lng_s!r}")
    if not (math.isfinite(lat) and math.isfinite(lng)):
        raise ValueError("неконечные координаты")
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"широта вне диапазона: {lat}")
    if not -180.0 <= lng <= 180.0:
        raise ValueError(f"долгота вне диапазона: {lng}")
    return LbsRecord(user_id, timestamp, make_point(lat, lng))


def parse_records(stream: Iterable[bytes | str]) -> tuple[list[LbsRecord], RejectionReport]:
    """
    Разбирает CSV-строки `user_id,timestamp,lat,lng` в порядке входа.

    Заголовок необязателен: первая непустая строка с нечисловым вторым
    полем считается заголовком и пропускается. Битые строки не фатальны —
    они попадают в RejectionReport.

    Raises:
        ValidationError — поток не читается
    """
    records: list[LbsRecord] = []
    report = RejectionReport()
    first = True
    try:
        for line_no, raw in enumerate(stream, start=1):
            text = raw.decode("utf-8", errors="replace") if isinstance(raw, bytes) else raw
            text = text.strip()
            if not text:
                continue
            if first:
                first = False
                parts = text.split(",")
                if len(parts) >= 2 and not _is_number(parts[1].strip()):
                    continue
            try:
                records.append(_parse_line(text))
            except ValueError as e:
                report.add(line_no, str(e))
    except (OSError, EOFError, zlib.error) as e:
        # Обрезанный gzip даёт EOFError, испорченный deflate-поток — zlib.error
        raise ValidationError(f"Не удалось прочитать поток записей: {e}")

    if report.count:
        log.warning(f"Отклонено строк: {report.count}")
        for line_no, reason in report.samples:
            log.debug(f"  строка {line_no}: {reason}")
    return records, report


# ══════════════════════════════════════════════════════════════════════════════
# Сессионизация
# ══════════════════════════════════════════════════════════════════════════════
def _group_by_user(records: Iterable[LbsRecord]) -> dict[str, list[LbsRecord]]:
    groups: dict[str, list[LbsRecord]] = {}
    for rec in records:
        groups.setdefault(rec.user_id, []).append(rec)
    return groups


def _sessionize_user(user_id: str, recs: list[LbsRecord], max_gap: int, level: int) -> list[Trajectory]:
    # sorted() стабилен: записи с одинаковым timestamp остаются в порядке входа
    recs = sorted(recs, key=lambda r: r.timestamp)
    out: list[Trajectory] = []
    cells: list[CellId] = []
    stamps: list[int] = []
    prev_ts = None
    for rec in recs:
        if prev_ts is not None and rec.timestamp - prev_ts > max_gap:
            out.append(Trajectory(user_id, tuple(cells), tuple(stamps)))
            cells, stamps = [], []
        prev_ts = rec.timestamp
        cell = cell_from_point(rec.point, level)
        # Подряд идущие дубликаты схлопываются, остаётся первый timestamp
        if cells and cells[-1] == cell:
            continue
        cells.append(cell)
        stamps.append(rec.timestamp)
    if cells:
        out.append(Trajectory(user_id, tuple(cells), tuple(stamps)))
    return out


def sessionize(records: Iterable[LbsRecord], max_gap: int = DEFAULT_MAX_GAP_SEC,
               level: int = DEFAULT_LEVEL, workers: int = 1) -> list[Trajectory]:
    """
    Режет записи каждого пользователя на траектории: новая траектория
    начинается, когда разрыв до предыдущей записи больше max_gap.

    Выход упорядочен по (user_id, время начала) — результат не зависит
    от порядка входных записей и от числа workers.
    workers > 1: пользователи шардируются по потокам, шарды независимы.
    """
    if max_gap <= 0:
        raise ValueError(f"max_gap должен быть > 0, получено {max_gap}")
    groups = _group_by_user(records)
    users = sorted(groups)

    if workers <= 1 or len(users) < 2:
        per_user = [_sessionize_user(u, groups[u], max_gap, level) for u in users]
    else:
        per_user: list[list[Trajectory] | None] = [None] * len(users)

        def _worker(shard: int):
            for i in range(shard, len(users), workers):
                u = users[i]
                per_user[i] = _sessionize_user(u, groups[u], max_gap, level)

        threads = [
            threading.Thread(target=_worker, args=(s,), daemon=True, name=f"sessionize-{s}")
            for s in range(workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    trajectories = [t for user_trajs in per_user for t in user_trajs]
    log.info(f"Пользователей: {len(users)} | траекторий: {len(trajectories)}")
    return trajectories


# ══════════════════════════════════════════════════════════════════════════════
# Индекс локаций
# ══════════════════════════════════════════════════════════════════════════════
class LocationIndex:
    """
    Биекция CellId ↔ плотный id в [0, N) + число посещений на id.

    Наблюдаемые ячейки всегда имеют visit_count ≥ 1. Ячейки, добавленные
    через extend()/densify_index(), имеют visit_count = 0: они попадают
    в графы, но не в негативные сэмплы.
    """

    def __init__(self, cells: Iterable[CellId] = (), visit_counts: Iterable[int] = ()):
        self.cells: list[CellId] = list(cells)
        self.visit_counts = np.asarray(list(visit_counts), dtype=np.int64)
        if len(self.visit_counts) != len(self.cells):
            raise ValueError("cells и visit_counts разной длины")
        self._ids = {c: i for i, c in enumerate(self.cells)}
        if len(self._ids) != len(self.cells):
            raise ValueError("В индексе повторяются ячейки")

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, cell: CellId) -> bool:
        return cell in self._ids

    @property
    def n(self) -> int:
        return len(self.cells)

    def id_of(self, cell: CellId) -> int:
        try:
            return self._ids[cell]
        except KeyError:
            raise KeyError(f"Ячейка {format_cell_id(cell)} отсутствует в индексе")

    def cell_of(self, location_id: int) -> CellId:
        return self.cells[location_id]

    def extend(self, cells: Iterable[CellId]) -> int:
        """Добавляет ненаблюдавшиеся ячейки (visit_count = 0). Возвращает число добавленных."""
        added = [c for c in dict.fromkeys(cells) if c not in self._ids]
        for c in added:
            self._ids[c] = len(self.cells)
            self.cells.append(c)
        if added:
            self.visit_counts = np.concatenate(
                (self.visit_counts, np.zeros(len(added), dtype=np.int64))
            )
        return len(added)


def build_location_index(trajectories: Iterable[Trajectory]) -> LocationIndex:
    """
    Плотные id в порядке первого появления; visit_count = число позиций
    траекторий, попавших в ячейку.

    Raises:
        ValueError — пустой набор траекторий
    """
    counts: dict[CellId, int] = {}
    for traj in trajectories:
        for cell in traj.cells:
            counts[cell] = counts.get(cell, 0) + 1
    if not counts:
        raise ValueError("Нельзя построить индекс локаций по пустому набору траекторий")
    return LocationIndex(counts.keys(), counts.values())


def densify_index(index: LocationIndex, max_cells: int = DENSIFY_MAX_CELLS) -> int:
    """
    Дополняет индекс всеми ячейками bounding box наблюдаемых ячеек (тот же уровень).
    Возвращает число добавленных ячеек.
    """
    if not len(index):
        return 0
    levels = {c.level for c in index.cells}
    if len(levels) != 1:
        raise ValueError(f"densify требует один уровень ячеек, получено {sorted(levels)}")
    level = levels.pop()
    grid = np.array([cell_grid(c) for c in index.cells])
    (col_min, row_min), (col_max, row_max) = grid.min(axis=0), grid.max(axis=0)
    total = int(col_max - col_min + 1) * int(row_max - row_min + 1)
    if total > max_cells:
        raise ValidationError(
            f"densify: bounding box содержит {total} ячеек (лимит {max_cells})"
        )
    added = index.extend(
        cell_from_grid(col, row, level)
        for row in range(int(row_min), int(row_max) + 1)
        for col in range(int(col_min), int(col_max) + 1)
    )
    log.info(f"densify: добавлено {added} ячеек, N = {len(index)}")
    return added


def encode_trajectories(trajectories: Iterable[Trajectory], index: LocationIndex) -> list[np.ndarray]:
    """Траектории → массивы плотных id (int64)."""
    return [
        np.fromiter((index.id_of(c) for c in traj.cells), dtype=np.int64, count=len(traj.cells))
        for traj in trajectories
    ]


# ══════════════════════════════════════════════════════════════════════════════
# Файлы
# ══════════════════════════════════════════════════════════════════════════════
def write_trajectories(path: str, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for traj in trajectories:
            cells = ",".join(format_cell_id(c) for c in traj.cells)
            stamps = ",".join(str(t) for t in traj.timestamps)
            f.write(f"{traj.user_id}\t{cells}\t{stamps}\n")


def read_trajectories(path: str) -> list[Trajectory]:
    out: list[Trajectory] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                user_id, cells_s, stamps_s = line.split("\t")
                cells = tuple(parse_cell_id(c) for c in cells_s.split(","))
                stamps = tuple(int(t) for t in stamps_s.split(","))
            except ValueError as e:
                raise ValidationError(f"{path}:{line_no}: битая строка траектории ({e})")
            if len(cells) != len(stamps):
                raise ValidationError(f"{path}:{line_no}: число ячеек и меток времени не совпадает")
            out.append(Trajectory(user_id, cells, stamps))
    return out


def write_location_index(path: str, index: LocationIndex) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for cell, count in zip(index.cells, index.visit_counts):
            f.write(f"{format_cell_id(cell)}\t{int(count)}\n")


def read_location_index(path: str) -> LocationIndex:
    cells: list[CellId] = []
    counts: list[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                cell_s, count_s = line.split("\t")
                cells.append(parse_cell_id(cell_s))
                counts.append(int(count_s))
            except ValueError as e:
                raise ValidationError(f"{path}:{line_no}: битая строка индекса ({e})")
    return LocationIndex(cells, counts)
