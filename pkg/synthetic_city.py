# synthetic_city.py
# ──────────────────────────────────────────────────────────────────────────────
# Синтетический город с известной разметкой регионов.
#
# R регионов — компактные блоки соседних ячеек (√n × √n), центры блоков
# разнесены на SYNTH_REGION_SPACING_M метров. Пользователи шагают в соседние
# ячейки текущего региона и с вероятностью p на каждом шаге прыгают в другой.
#
# Всё определяется одним seed: записи, метки и статистика траекторий
# побитово воспроизводимы.
# ──────────────────────────────────────────────────────────────────────────────

import gzip
import logging
import math
from dataclasses import dataclass, asdict
from typing import Iterable

import numpy as np

from config import (
    DEFAULT_LEVEL, DEFAULT_SEED, EARTH_RADIUS_M, FLOAT_FORMAT,
    SYNTH_REGIONS, SYNTH_CELLS_PER_REGION, SYNTH_INTER_REGION_PROB, SYNTH_TRAJECTORIES,
    SYNTH_TRAJECTORY_LENGTH, SYNTH_USERS, SYNTH_STEP_SEC, SYNTH_SESSION_PAUSE_SEC,
    SYNTH_ORIGIN_LAT, SYNTH_ORIGIN_LNG, SYNTH_REGION_SPACING_M,
)
from geo_cells import CellId, GeoPoint, cell_bounds, cell_from_grid, grid_position, make_point
from trajectories import LbsRecord

log = logging.getLogger("Synth")

# 2020-09-13 12:26:40 UTC — от него отсчитываются часы всех пользователей
_EPOCH_START = 1_600_000_000

# Доля ячейки по краям, куда точки не ставятся
_JITTER_MARGIN = 0.1

_METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0


@dataclass
class SyntheticCityConfig:
    regions: int = SYNTH_REGIONS
    cells_per_region: int = SYNTH_CELLS_PER_REGION
    inter_region_prob: float = SYNTH_INTER_REGION_PROB
    trajectories: int = SYNTH_TRAJECTORIES
    min_length: int = SYNTH_TRAJECTORY_LENGTH
    max_length: int = SYNTH_TRAJECTORY_LENGTH
    users: int = SYNTH_USERS
    level: int = DEFAULT_LEVEL
    step_sec: int = SYNTH_STEP_SEC
    pause_sec: int = SYNTH_SESSION_PAUSE_SEC
    region_spacing_m: float = SYNTH_REGION_SPACING_M
    origin_lat: float = SYNTH_ORIGIN_LAT
    origin_lng: float = SYNTH_ORIGIN_LNG
    seed: int = DEFAULT_SEED

    def validate(self) -> "SyntheticCityConfig":
        if self.regions < 2:
            raise ValueError(f"Нужно хотя бы 2 региона, получено {self.regions}")
        if self.cells_per_region < 2:
            raise ValueError(f"В регионе нужно хотя бы 2 ячейки, получено {self.cells_per_region}")
        if not 0.0 <= self.inter_region_prob <= 1.0:
            raise ValueError(f"inter_region_prob вне [0, 1]: {self.inter_region_prob}")
        if self.trajectories < 1 or self.users < 1:
            raise ValueError("trajectories и users должны быть ≥ 1")
        if not 2 <= self.min_length <= self.max_length:
            raise ValueError(f"Длина траектории: ожидалось 2 ≤ min ≤ max, получено {self.min_length}..{self.max_length}")
        if not 0 < self.step_sec < self.pause_sec:
            raise ValueError("Ожидалось 0 < step_sec < pause_sec")
        return self


@dataclass
class SyntheticCity:
    config: SyntheticCityConfig
    records: list[LbsRecord]
    cell_regions: dict[CellId, str]
    # Регион каждого шага каждой сгенерированной траектории
    truth: list[list[str]]


def region_name(r: int) -> str:
    return f"R{r}"


# ------------------------------------------------------------------
# Карта
# ------------------------------------------------------------------
def _region_anchor(cfg: SyntheticCityConfig, r: int) -> GeoPoint:
    """Центры регионов на квадратной решётке с шагом region_spacing_m."""
    side = math.ceil(math.sqrt(cfg.regions))
    east = (r % side) * cfg.region_spacing_m
    north = (r // side) * cfg.region_spacing_m
    lat = cfg.origin_lat + north / _METERS_PER_DEGREE
    lng = cfg.origin_lng + east / (_METERS_PER_DEGREE * math.cos(math.radians(cfg.origin_lat)))
    return make_point(lat, lng)


def _region_block(cfg: SyntheticCityConfig, r: int) -> list[CellId]:
    col0, row0 = grid_position(_region_anchor(cfg, r), cfg.level)
    side = math.ceil(math.sqrt(cfg.cells_per_region))
    n = 1 << cfg.level
    cells = []
    for k in range(cfg.cells_per_region):
        col = (col0 + k % side) % n
        row = min(row0 + k // side, n - 1)
        cells.append(cell_from_grid(col, row, cfg.level))
    return cells


def _block_neighbors(cfg: SyntheticCityConfig) -> list[list[int]]:
    """Для каждой позиции блока — позиции соседних ячеек (ход короля), у всех регионов одинаково."""
    side = math.ceil(math.sqrt(cfg.cells_per_region))
    out = []
    for k in range(cfg.cells_per_region):
        col, row = k % side, k // side
        out.append([
            j for j in range(cfg.cells_per_region)
            if j != k and abs(j % side - col) <= 1 and abs(j // side - row) <= 1
        ])
    return out


def build_city_map(cfg: SyntheticCityConfig) -> dict[CellId, str]:
    """Ячейка → регион. Блоки регионов не пересекаются."""
    cell_regions: dict[CellId, str] = {}
    for r in range(cfg.regions):
        for cell in _region_block(cfg, r):
            if cell in cell_regions:
                raise ValueError("Регионы пересекаются — увеличьте region_spacing_m")
            cell_regions[cell] = region_name(r)
    return cell_regions


def _jitter(cell: CellId, rng: np.random.Generator) -> GeoPoint:
    lat_min, lat_max, lng_min, lng_max = cell_bounds(cell)
    u, v = rng.uniform(_JITTER_MARGIN, 1.0 - _JITTER_MARGIN, size=2)
    return GeoPoint(lat_min + u * (lat_max - lat_min), lng_min + v * (lng_max - lng_min))


# ------------------------------------------------------------------
# Генерация
# ------------------------------------------------------------------
def generate_synthetic_city(cfg: SyntheticCityConfig | None = None) -> SyntheticCity:
    """
    Каждая траектория принадлежит пользователю j % users и начинается в его
    домашнем регионе (user % R). На каждом шаге с вероятностью 1−p — соседняя
    ячейка того же региона, с вероятностью p — ячейка другого региона.
    Соседние ячейки траектории всегда различны; шаги идут через step_sec,
    траектории одного пользователя разделены pause_sec (> max_gap).
    """
    cfg = (cfg or SyntheticCityConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    blocks = [_region_block(cfg, r) for r in range(cfg.regions)]
    neighbors = _block_neighbors(cfg)
    cell_regions = build_city_map(cfg)

    clocks = [_EPOCH_START + u for u in range(cfg.users)]
    records: list[LbsRecord] = []
    truth: list[list[str]] = []
    for j in range(cfg.trajectories):
        user = j % cfg.users
        user_id = f"u{user:05d}"
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        region = user % cfg.regions
        cell_k = int(rng.integers(len(blocks[region])))
        steps: list[str] = []
        ts = clocks[user]
        for step in range(length):
            if step > 0:
                if rng.random() < cfg.inter_region_prob:
                    region = (region + 1 + int(rng.integers(cfg.regions - 1))) % cfg.regions
                    cell_k = int(rng.integers(len(blocks[region])))
                else:
                    # Соседняя ячейка того же региона
                    choices = neighbors[cell_k]
                    cell_k = choices[int(rng.integers(len(choices)))]
                ts += cfg.step_sec
            cell = blocks[region][cell_k]
            records.append(LbsRecord(user_id, ts, _jitter(cell, rng)))
            steps.append(region_name(region))
        clocks[user] = ts + cfg.pause_sec
        truth.append(steps)

    log.info(
        f"Город: регионов={cfg.regions}, ячеек={len(cell_regions)}, "
        f"траекторий={len(truth)}, записей={len(records)}, p={cfg.inter_region_prob:g}"
    )
    return SyntheticCity(cfg, records, cell_regions, truth)


def inter_region_fraction(truth: Iterable[list[str]]) -> float:
    """Доля соседних пар шагов, где регион меняется."""
    pairs = changes = 0
    for steps in truth:
        for a, b in zip(steps, steps[1:]):
            pairs += 1
            changes += a != b
    return changes / pairs if pairs else 0.0


# ------------------------------------------------------------------
# Файлы
# ------------------------------------------------------------------
def _records_csv(records: Iterable[LbsRecord]) -> bytes:
    lines = ["user_id,timestamp,lat,lng"]
    for rec in records:
        lines.append(
            f"{rec.user_id},{rec.timestamp},"
            f"{format(rec.point.lat, FLOAT_FORMAT)},{format(rec.point.lng, FLOAT_FORMAT)}"
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_records(path: str, records: Iterable[LbsRecord], compress: bool = False) -> None:
    """CSV user_id,timestamp,lat,lng. compress=True — gzip с mtime=0 (байт-в-байт воспроизводимо)."""
    data = _records_csv(records)
    if compress:
        data = gzip.compress(data, mtime=0)
    with open(path, "wb") as f:
        f.write(data)


def synthetic_city_summary(city: SyntheticCity) -> dict:
    """Конфигурация + статистика для манифеста."""
    return {
        **asdict(city.config),
        "records": len(city.records),
        "cells": len(city.cell_regions),
        "inter_region_fraction": inter_region_fraction(city.truth),
    }

