# manifest.py
# ──────────────────────────────────────────────────────────────────────────────
# Манифест воспроизводимости: manifest.json в каждой выходной директории.
#
# Формат — JSON-список, каждый запуск стадии добавляет одну запись:
#   {stage, config, seed, inputs{path: sha256}, outputs{path: sha256},
#    wall_time_sec, tool_version}
# Пути записаны относительно директории манифеста.
#
# Перед чтением входного файла стадия сверяет его sha256 с последней записью
# манифеста, где этот файл был выходом. Несовпадение → DigestMismatchError.
# ──────────────────────────────────────────────────────────────────────────────

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Iterable

from packaging.version import InvalidVersion, Version

from config import MANIFEST_FILE
from errors import DigestMismatchError, ValidationError
from version import APP_VERSION

log = logging.getLogger("Manifest")

_CHUNK = 1 << 20


@dataclass
class ManifestEntry:
    stage: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time_sec: float = 0.0
    tool_version: str = APP_VERSION


def file_digest(path: str) -> str:
    """sha256 файла (hex), читается блоками."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(directory: str) -> str:
    return os.path.join(directory or ".", MANIFEST_FILE)


def _key(directory: str, path: str) -> str:
    return os.path.relpath(os.path.abspath(path), os.path.abspath(directory or ".")).replace(os.sep, "/")


def _is_newer_major(recorded: str, current: str = APP_VERSION) -> bool:
    """True если манифест записан инструментом более новой мажорной версии."""
    try:
        return Version(recorded).major > Version(current).major
    except InvalidVersion:
        return False


def load_manifest(directory: str) -> list[dict]:
    """
    Записи манифеста директории; нет файла → пустой список.

    Raises:
        ValidationError — файл не JSON-список
    """
    path = manifest_path(directory)
    if not os.path.exists(path):
        return []
    try:
        with open(path, "r", encoding="utf-8") as f:
            entries = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"{path}: манифест не читается ({e})")
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: манифест должен быть JSON-списком")
    for entry in entries:
        version = str(entry.get("tool_version", ""))
        if _is_newer_major(version):
            log.warning(f"{path}: записан версией {version}, текущая {APP_VERSION}")
    return entries


def append_entry(directory: str, entry: ManifestEntry) -> None:
    entries = load_manifest(directory)
    entries.append(asdict(entry))
    path = manifest_path(directory)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump(entries, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    log.debug(f"{path}: + {entry.stage}")


def verify_input(path: str) -> str:
    """
    Проверяет входной файл по манифесту его директории и возвращает sha256.
    Файл, не упомянутый ни в одном манифесте, принимается как есть.

    Raises:
        FileNotFoundError — файла нет
        DigestMismatchError — sha256 не совпадает с последней записью
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    actual = file_digest(path)
    directory = os.path.dirname(path)
    key = _key(directory, path)
    for entry in reversed(load_manifest(directory)):
        expected = entry.get("outputs", {}).get(key)
        if expected is not None:
            if expected != actual:
                raise DigestMismatchError(path, expected, actual)
            break
    return actual


def record_stage(stage: str, config: dict, seed: int | None, inputs: Iterable[str],
                 outputs: Iterable[str], wall_time_sec: float) -> ManifestEntry:
    """
    Добавляет запись в манифест директории выходов (по одной на директорию).
    Без выходных файлов запись идёт в директорию первого входа.
    Пути входов записываются относительно той же директории.
    """
    outputs = list(outputs)
    inputs = list(inputs)
    directories = list(dict.fromkeys(os.path.dirname(p) for p in outputs))
    if not directories:
        directories = [os.path.dirname(inputs[0]) if inputs else "."]
    entry = None
    for directory in directories:
        entry = ManifestEntry(
            stage=stage,
            config=config,
            seed=seed,
            inputs={_key(directory, p): file_digest(p) for p in inputs},
            outputs={_key(directory, p): file_digest(p) for p in outputs if os.path.dirname(p) == directory},
            wall_time_sec=round(wall_time_sec, 6),
        )
        append_entry(directory, entry)
    return entry
