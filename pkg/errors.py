# errors.py
# ──────────────────────────────────────────────────────────────────────────────
# Иерархия исключений пайплайна.
# pipeline_main.run() превращает их в коды выхода:
#   ValidationError (и наследники)  → 1
#   всё остальное                   → 2
# ──────────────────────────────────────────────────────────────────────────────


class PipelineError(Exception):
    """Базовый класс всех ошибок пайплайна."""


class ValidationError(PipelineError, ValueError):
    """Некорректный вход: флаги, файлы, форматы, нарушенные предусловия."""


class UsageError(ValidationError):
    """Неизвестная подкоманда или флаг. Сообщение содержит usage."""


class DigestMismatchError(ValidationError):
    """Файл изменился после того, как его записала предыдущая стадия."""

    def __init__(self, path: str, expected: str, actual: str):
        super().__init__(
            f"Дайджест не совпадает: {path}\n"
            f"  manifest: {expected}\n"
            f"  файл:     {actual}"
        )
        self.path = path
        self.expected = expected
        self.actual = actual


class TrainingError(PipelineError, RuntimeError):
    """NaN/Inf в loss, градиентах или параметрах во время обучения."""

    def __init__(self, message: str, batch_id: int | None = None):
        if batch_id is not None:
            message = f"батч #{batch_id}: {message}"
        super().__init__(message)
        self.batch_id = batch_id
