# config.py
# ──────────────────────────────────────────────────────────────────────────────
# Все значения по умолчанию для пайплайна в одном месте.
# Флаги pipeline_main.py переопределяют их, но не меняют этот файл.
# ──────────────────────────────────────────────────────────────────────────────

# --- Дискретизация пространства ---
# Уровень 18: ячейка на экваторе ≈ 153 м × 76 м ≈ 11 700 м².
# Ближайший практичный аналог ячеек S2 уровня 16 (~19 800 м²).
DEFAULT_LEVEL = 18
MIN_LEVEL = 1
MAX_LEVEL = 30

# Радиус сферы для haversine (метры)
EARTH_RADIUS_M = 6_371_000.0

# --- Траектории ---
# Максимальный разрыв между соседними записями одной траектории (секунды).
DEFAULT_MAX_GAP_SEC = 3600

# Сколько отклонённых строк CSV храним в отчёте как примеры (счётчик — полный)
REJECTION_SAMPLE_LIMIT = 20

# Защита от взрыва densify: максимум ячеек в bounding-box сетке
DENSIFY_MAX_CELLS = 1_000_000

# --- Графы ---
# Порог расстояния Δ для пространственного графа (метры)
DEFAULT_DELTA_M = 500.0

# Рёбра потокового графа с весом < MIN_COUNT отбрасываются (1 = оставить всё)
DEFAULT_MIN_FLOW_COUNT = 1

GRAPH_KIND_FLOW    = "flow"
GRAPH_KIND_SPATIAL = "spatial"

# --- Модель ---
DEFAULT_DIM        = 16
DEFAULT_WINDOW     = 5
DEFAULT_NEGATIVES  = 5
DEFAULT_LR         = 0.025
DEFAULT_MIN_LR     = 1e-4       # линейный спад lr заканчивается здесь
DEFAULT_EPOCHS     = 30
DEFAULT_TOLERANCE  = 1e-4       # относительное изменение среднего loss за эпоху
DEFAULT_AGG        = "mean"     # mean | max
DEFAULT_ACTIVATION = "tanh"     # tanh | identity
DEFAULT_LAYERS     = 1
DEFAULT_GRAPHS     = "both"     # both | flow | spatial
DEFAULT_SEED       = 7
DEFAULT_WORKERS    = 1

AGG_MODES       = ("mean", "max")
ACTIVATIONS     = ("tanh", "identity")
GRAPH_VARIANTS  = ("both", "flow", "spatial")

# Степень unigram-распределения для негативного сэмплирования
NEGATIVE_POWER = 0.75

# Полный softmax — только как тестовый оракул, на больших N он бессмыслен
FULL_SOFTMAX_MAX_N = 1000

# Выровненные таблицы соседей (быстрый однослойный шаг): N × max_degree на ветвь.
# Если хаб раздувает таблицу сверх лимита, обучение идёт общим путём через CSR.
NEIGHBOR_TABLE_MAX_ENTRIES = 20_000_000

# --- Оценка ---
DEFAULT_TOP_K     = 10
DEFAULT_EVAL_KS   = (5, 10, 20)

# --- Синтетический город ---
SYNTH_REGIONS           = 4
SYNTH_CELLS_PER_REGION  = 25
SYNTH_INTER_REGION_PROB = 0.05
SYNTH_TRAJECTORIES      = 2000
SYNTH_TRAJECTORY_LENGTH = 10
SYNTH_USERS             = 200
SYNTH_STEP_SEC          = 300      # шаг внутри траектории, заметно меньше max_gap
SYNTH_SESSION_PAUSE_SEC = 4 * 3600 # пауза между траекториями одного пользователя
SYNTH_ORIGIN_LAT        = 23.10
SYNTH_ORIGIN_LNG        = 113.25
SYNTH_REGION_SPACING_M  = 5000.0   # центры регионов далеко друг от друга (>> Δ)

# --- Файлы пайплайна ---
RECORDS_FILE        = "records.csv"
REGIONS_FILE        = "regions.csv"
TRAJECTORIES_FILE   = "trajectories.tsv"
LOCATIONS_FILE      = "locations.tsv"
FLOW_GRAPH_FILE     = "flow_graph.txt"
SPATIAL_GRAPH_FILE  = "spatial_graph.txt"
EMBEDDINGS_FILE     = "embeddings.txt"
FEATURES_FILE       = "features.csv"
MANIFEST_FILE       = "manifest.json"

# Все диагностические сообщения в формате "[Tag] текст" → stderr
LOG_FORMAT = "[%(name)s] %(message)s"

# Точность вещественных чисел во всех текстовых форматах (без потерь для float64)
FLOAT_FORMAT = ".17g"
