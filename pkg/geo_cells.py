# geo_cells.py
# ──────────────────────────────────────────────────────────────────────────────
# Дискретизация координат в иерархические ячейки.
#
# Сетка plate carrée 2^L × 2^L поверх [-90, 90] × [-180, 180),
# ячейки линеаризуются кривой Гильберта порядка L (пакет hilbertcurve).
# Это замена кубической проекции S2: та же идея (Гильберт + иерархия),
# но без граней куба.
#
# Соглашение об ориентации кривой (фиксировано — id стабильны между машинами):
#   (col=0, row=0) → индекс 0, первый шаг кривой идёт вдоль +y (row)
#   на любом уровне.
#   Порядок 1: (0,0)=0, (0,1)=1, (1,1)=2, (1,0)=3.
#
# Все функции чистые; общий только кэш кривых по уровням (lru_cache), его
# заполнение идемпотентно — можно звать из любых потоков.
# ──────────────────────────────────────────────────────────────────────────────

import math
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from hilbertcurve.hilbertcurve import HilbertCurve

from config import EARTH_RADIUS_M, MIN_LEVEL, MAX_LEVEL


class GeoPoint(NamedTuple):
    lat: float   # [-90, 90]
    lng: float   # [-180, 180)


class CellId(NamedTuple):
    level: int   # [1, 30]
    index: int   # [0, 4^level)

    def __str__(self) -> str:
        return format_cell_id(self)


# ------------------------------------------------------------------
# Точки
# ------------------------------------------------------------------
def normalize_lng(lng: float) -> float:
    """Сворачивает долготу в [-180, 180). +180 превращается в -180."""
    if -180.0 <= lng < 180.0:
        return lng
    lng = ((lng + 180.0) % 360.0) - 180.0
    # float-остаток может дать ровно 180.0 для значений чуть меньше -180
    if lng >= 180.0:
        lng -= 360.0
    return lng


def make_point(lat: float, lng: float) -> GeoPoint:
    """
    Проверяет и нормализует координаты.

    Raises:
        ValueError — нечисловые/бесконечные координаты или |lat| > 90
    """
    lat = float(lat)
    lng = float(lng)
    if not (math.isfinite(lat) and math.isfinite(lng)):
        raise ValueError(f"Координаты должны быть конечными: ({lat}, {lng})")
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"Широта вне [-90, 90]: {lat}")
    return GeoPoint(lat, normalize_lng(lng))


def _check_level(level: int) -> int:
    level = int(level)
    if not MIN_LEVEL <= level <= MAX_LEVEL:
        raise ValueError(f"Уровень ячейки вне [{MIN_LEVEL}, {MAX_LEVEL}]: {level}")
    return level


def _check_cell(cell: CellId) -> CellId:
    level = _check_level(cell.level)
    if not 0 <= cell.index < (1 << (2 * level)):
        raise ValueError(f"Индекс ячейки вне [0, 4^{level}): {cell.index}")
    return cell


# ------------------------------------------------------------------
# Кривая Гильберта
# ------------------------------------------------------------------
@lru_cache(maxsize=None)
def _curve(level: int) -> tuple[HilbertCurve, bool]:
    """
    Кривая порядка level и флаг перестановки осей.
    Ориентация HilbertCurve зависит от чётности порядка; при первом шаге
    вдоль +x оси меняются местами, чтобы индекс 1 всегда был (0, 1).
    """
    curve = HilbertCurve(level, 2)
    return curve, list(curve.point_from_distance(1)) != [0, 1]


def hilbert_encode(x: int, y: int, level: int) -> int:
    """(col, row) → индекс на кривой порядка level."""
    level = _check_level(level)
    n = 1 << level
    if not (0 <= x < n and 0 <= y < n):
        raise ValueError(f"Координаты сетки вне [0, {n}): ({x}, {y})")
    curve, swap = _curve(level)
    return int(curve.distance_from_point([int(y), int(x)] if swap else [int(x), int(y)]))


def hilbert_decode(index: int, level: int) -> tuple[int, int]:
    """Индекс на кривой → (col, row). Обратная к hilbert_encode."""
    level = _check_level(level)
    if not 0 <= index < 1 << (2 * level):
        raise ValueError(f"Индекс вне [0, 4^{level}): {index}")
    curve, swap = _curve(level)
    a, b = (int(v) for v in curve.point_from_distance(int(index)))
    return (b, a) if swap else (a, b)


# ------------------------------------------------------------------
# Ячейки
# ------------------------------------------------------------------
def grid_position(p: GeoPoint, level: int) -> tuple[int, int]:
    """(col, row) ячейки, содержащей точку. Полюс +90 прижимается к верхней строке."""
    n = 1 << level
    row = math.floor((p.lat + 90.0) / 180.0 * n)
    col = math.floor((normalize_lng(p.lng) + 180.0) / 360.0 * n)
    row = min(max(row, 0), n - 1)
    col = min(max(col, 0), n - 1)
    return col, row


def cell_from_point(p: GeoPoint, level: int) -> CellId:
    """
    Ячейка уровня level, содержащая точку p.

    Raises:
        ValueError — неконечные координаты или уровень вне [1, 30]
    """
    level = _check_level(level)
    p = make_point(p.lat, p.lng)
    col, row = grid_position(p, level)
    return CellId(level, hilbert_encode(col, row, level))


def cell_from_grid(col: int, row: int, level: int) -> CellId:
    level = _check_level(level)
    return CellId(level, hilbert_encode(col, row, level))


def cell_grid(c: CellId) -> tuple[int, int]:
    _check_cell(c)
    return hilbert_decode(c.index, c.level)


def cell_bounds(c: CellId) -> tuple[float, float, float, float]:
    """(lat_min, lat_max, lng_min, lng_max) прямоугольника ячейки."""
    col, row = cell_grid(c)
    n = 1 << c.level
    lat_step = 180.0 / n
    lng_step = 360.0 / n
    lat_min = -90.0 + row * lat_step
    lng_min = -180.0 + col * lng_step
    return lat_min, lat_min + lat_step, lng_min, lng_min + lng_step


def cell_center(c: CellId) -> GeoPoint:
    """Середина прямоугольника ячейки."""
    col, row = cell_grid(c)
    n = 1 << c.level
    return GeoPoint(
        -90.0 + (row + 0.5) * 180.0 / n,
        -180.0 + (col + 0.5) * 360.0 / n,
    )


def format_cell_id(c: CellId) -> str:
    return f"{c.level}:{c.index}"


def parse_cell_id(text: str) -> CellId:
    """
    "18:123456789" → CellId(18, 123456789).

    Raises:
        ValueError — не тот формат или значения вне диапазона
    """
    try:
        level_s, index_s = text.strip().split(":")
        cell = CellId(int(level_s), int(index_s))
    except ValueError:
        raise ValueError(f"Ожидался id ячейки вида 'level:index', получено {text!r}")
    return _check_cell(cell)


# ------------------------------------------------------------------
# Расстояния
# ------------------------------------------------------------------
def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Расстояние по большому кругу (метры) на сфере радиуса EARTH_RADIUS_M."""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = lat2 - lat1
    dlng = math.radians(b.lng - a.lng)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlng / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


def haversine_many(lat1, lng1, lat2, lng2) -> np.ndarray:
    """Векторная версия haversine_distance поверх numpy-массивов (в градусах)."""
    lat1 = np.radians(np.asarray(lat1, dtype=np.float64))
    lat2 = np.radians(np.asarray(lat2, dtype=np.float64))
    dlat = lat2 - lat1
    dlng = np.radians(np.asarray(lng2, dtype=np.float64) - np.asarray(lng1, dtype=np.float64))
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlng / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def to_unit_xyz(lat, lng) -> np.ndarray:
    """Точки на сфере радиуса EARTH_RADIUS_M в декартовых координатах, shape (n, 3)."""
    lat = np.radians(np.asarray(lat, dtype=np.float64))
    lng = np.radians(np.asarray(lng, dtype=np.float64))
    cos_lat = np.cos(lat)
    return EARTH_RADIUS_M * np.column_stack(
        (cos_lat * np.cos(lng), cos_lat * np.sin(lng), np.sin(lat))
    )
