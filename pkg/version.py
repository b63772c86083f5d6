# version.py
# ──────────────────────────────────────────────────────────────────────────────
# Единый источник правды о версии инструмента.
# Версия пишется в каждую запись manifest.json и сравнивается при чтении.
# ──────────────────────────────────────────────────────────────────────────────

APP_NAME    = "GeoL2V"
APP_VERSION = "1.0.0"           # SemVer: MAJOR.MINOR.PATCH

# Полная строка для логов и --version
VERSION_STRING = f"{APP_NAME} v{APP_VERSION}"
