# gcn_model.py
# ──────────────────────────────────────────────────────────────────────────────
# Модель эмбеддингов: skip-gram поверх двух параллельных GCN.
#
#   U^f = σ(Â_f · U⁰ · W_f)      U^s = σ(Â_s · U⁰ · W_s)      u = Agg(U^f, U^s)
#   Контекстные векторы u' считаются так же из U⁰', с теми же W_f, W_s.
#
#   loss(центр) = Σ_контексты −log σ(u·u'_o) + Σ_негативы −log σ(−u·u'_z)
#
# Полный прямой проход N×d на каждом шаге SGD неподъёмен при N ~ 10⁵,
# поэтому обучение идёт через "ленивые" строки: для запрошенных id
# собираются только их окрестности (по одному хопу на слой GCN),
# и Â режется в маленькую плотную матрицу |R_out| × |R_in|.
# Градиенты — ручной обратный проход через ту же структуру.
# ──────────────────────────────────────────────────────────────────────────────

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from config import (
    DEFAULT_DIM, DEFAULT_WINDOW, DEFAULT_NEGATIVES, DEFAULT_LR, DEFAULT_MIN_LR,
    DEFAULT_EPOCHS, DEFAULT_TOLERANCE, DEFAULT_AGG, DEFAULT_ACTIVATION, DEFAULT_LAYERS,
    DEFAULT_GRAPHS, DEFAULT_SEED, DEFAULT_WORKERS, AGG_MODES, ACTIVATIONS, GRAPH_VARIANTS,
    NEGATIVE_POWER, FULL_SOFTMAX_MAX_N, NEIGHBOR_TABLE_MAX_ENTRIES, GRAPH_KIND_FLOW, GRAPH_KIND_SPATIAL,
)
from graphs import NormalizedGraph

log = logging.getLogger("Model")


# ══════════════════════════════════════════════════════════════════════════════
# Конфигурация и параметры
# ══════════════════════════════════════════════════════════════════════════════
@dataclass
class TrainConfig:
    dim: int = DEFAULT_DIM
    window: int = DEFAULT_WINDOW
    negatives: int = DEFAULT_NEGATIVES
    lr: float = DEFAULT_LR
    min_lr: float = DEFAULT_MIN_LR
    epochs: int = DEFAULT_EPOCHS
    tolerance: float = DEFAULT_TOLERANCE
    agg: str = DEFAULT_AGG
    activation: str = DEFAULT_ACTIVATION
    layers: int = DEFAULT_LAYERS
    graphs: str = DEFAULT_GRAPHS
    seed: int = DEFAULT_SEED
    workers: int = DEFAULT_WORKERS

    def validate(self) -> "TrainConfig":
        """Raises ValueError на первом нарушенном ограничении."""
        if self.dim < 1:
            raise ValueError(f"dim должен быть ≥ 1, получено {self.dim}")
        if self.window < 1:
            raise ValueError(f"window должен быть ≥ 1, получено {self.window}")
        if self.negatives < 1:
            raise ValueError(f"negatives должен быть ≥ 1, получено {self.negatives}")
        if not (self.lr > 0 and self.min_lr > 0):
            raise ValueError(f"lr и min_lr должны быть > 0: {self.lr}, {self.min_lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs должен быть ≥ 0, получено {self.epochs}")
        if self.tolerance < 0:
            raise ValueError(f"tolerance должен быть ≥ 0, получено {self.tolerance}")
        if self.agg not in AGG_MODES:
            raise ValueError(f"agg: ожидалось одно из {AGG_MODES}, получено {self.agg!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation: ожидалось одно из {ACTIVATIONS}, получено {self.activation!r}")
        if self.layers < 1:
            raise ValueError(f"layers должен быть ≥ 1, получено {self.layers}")
        if self.graphs not in GRAPH_VARIANTS:
            raise ValueError(f"graphs: ожидалось одно из {GRAPH_VARIANTS}, получено {self.graphs!r}")
        if self.workers < 1:
            raise ValueError(f"workers должен быть ≥ 1, получено {self.workers}")
        return self


@dataclass
class ModelParams:
    """
    U0  — базовые эмбеддинги узлов, N×d
    U0c — базовые контекстные эмбеддинги, N×d
    Wf, Ws — веса GCN по слоям (d×d каждый), общие для узлового и контекстного путей

    U0 и U0c — представления одного массива stacked (2N×d): строка U0c[i] лежит
    в stacked[N + i]. Шаг SGD читает и пишет обе таблицы одной выборкой.
    """
    U0: np.ndarray
    U0c: np.ndarray
    Wf: list[np.ndarray]
    Ws: list[np.ndarray]

    def __post_init__(self):
        U0 = np.asarray(self.U0, dtype=np.float64)
        U0c = np.asarray(self.U0c, dtype=np.float64)
        if U0.ndim != 2 or U0.shape != U0c.shape:
            raise ValueError(f"U0 и U0c должны быть N×d одной формы: {U0.shape} vs {U0c.shape}")
        d = U0.shape[1]
        for name, ws in (("Wf", self.Wf), ("Ws", self.Ws)):
            for w in ws:
                if w.shape != (d, d):
                    raise ValueError(f"{name}: ожидалась матрица {d}×{d}, получено {w.shape}")
        self.stacked = np.concatenate((U0, U0c))
        self.U0 = self.stacked[:len(U0)]
        self.U0c = self.stacked[len(U0):]

    @property
    def n(self) -> int:
        return self.U0.shape[0]

    @property
    def dim(self) -> int:
        return self.U0.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.U0.copy(), self.U0c.copy(),
            [w.copy() for w in self.Wf], [w.copy() for w in self.Ws],
        )

    def is_finite(self) -> bool:
        arrays = [self.U0, self.U0c, *self.Wf, *self.Ws]
        return all(np.isfinite(a).all() for a in arrays)


def init_params(n: int, config: TrainConfig, rng: np.random.Generator) -> ModelParams:
    """
    U0, U0c ~ U[−0.5/d, 0.5/d]; Wf, Ws ~ U[−√(6/2d), +√(6/2d)] (Glorot).
    Порядок вызовов rng фиксирован — от него зависит побитовая воспроизводимость.
    """
    d = config.dim
    bound_u = 0.5 / d
    bound_w = math.sqrt(6.0 / (2 * d))
    U0 = rng.uniform(-bound_u, bound_u, size=(n, d))
    U0c = rng.uniform(-bound_u, bound_u, size=(n, d))
    Wf = [rng.uniform(-bound_w, bound_w, size=(d, d)) for _ in range(config.layers)]
    Ws = [rng.uniform(-bound_w, bound_w, size=(d, d)) for _ in range(config.layers)]
    return ModelParams(U0, U0c, Wf, Ws)


@dataclass(frozen=True)
class ModelGraphs:
    """Нормализованные графы модели. None — ветвь отключена (абляция)."""
    flow: NormalizedGraph | None = None
    spatial: NormalizedGraph | None = None

    def __post_init__(self):
        if self.flow is None and self.spatial is None:
            raise ValueError("Нужен хотя бы один граф")
        if self.flow is not None and self.spatial is not None and self.flow.n != self.spatial.n:
            raise ValueError(f"Графы разного размера: flow N={self.flow.n}, spatial N={self.spatial.n}")

    @property
    def n(self) -> int:
        return (self.flow or self.spatial).n

    def named(self) -> list[tuple[str, NormalizedGraph]]:
        """Включённые ветви по порядку: flow, затем spatial."""
        out = []
        if self.flow is not None:
            out.append((GRAPH_KIND_FLOW, self.flow))
        if self.spatial is not None:
            out.append((GRAPH_KIND_SPATIAL, self.spatial))
        return out

    def branches(self, params: ModelParams) -> list[tuple[str, NormalizedGraph, list[np.ndarray]]]:
        weights = {GRAPH_KIND_FLOW: params.Wf, GRAPH_KIND_SPATIAL: params.Ws}
        return [(kind, g, weights[kind]) for kind, g in self.named()]


def select_graphs(flow: NormalizedGraph | None, spatial: NormalizedGraph | None,
                  variant: str = DEFAULT_GRAPHS) -> ModelGraphs:
    """both | flow | spatial → ModelGraphs с нужными ветвями."""
    if variant == "both":
        return ModelGraphs(flow, spatial)
    log.debug(f"Абляция: используется только граф {variant}")
    if variant == "flow":
        return ModelGraphs(flow=flow)
    if variant == "spatial":
        return ModelGraphs(spatial=spatial)
    raise ValueError(f"graphs: ожидалось одно из {GRAPH_VARIANTS}, получено {variant!r}")


# ══════════════════════════════════════════════════════════════════════════════
# Прямой проход GCN
# ══════════════════════════════════════════════════════════════════════════════
def _activation(name: str):
    """(f, f'(z, f(z)))"""
    if name == "tanh":
        return np.tanh, lambda z, y: 1.0 - y * y
    if name == "identity":
        return (lambda z: z), (lambda z, y: np.ones_like(z))
    raise ValueError(f"activation: ожидалось одно из {ACTIVATIONS}, получено {name!r}")


def _as_layers(W) -> list[np.ndarray]:
    if isinstance(W, np.ndarray) and W.ndim == 2:
        return [W]
    layers = list(W)
    if not layers:
        raise ValueError("Нужен хотя бы один слой W")
    return layers


def _check_dims(n: int, base: np.ndarray, layers: list[np.ndarray]) -> None:
    if base.ndim != 2 or base.shape[0] != n:
        raise ValueError(f"base: ожидалось {n}×d, получено {base.shape}")
    width = base.shape[1]
    for w in layers:
        if w.ndim != 2 or w.shape[0] != width:
            raise ValueError(f"W: ожидалось {width}×d', получено {w.shape}")
        width = w.shape[1]


def gcn_forward(normalized: NormalizedGraph, base: np.ndarray, W, activation: str = DEFAULT_ACTIVATION) -> np.ndarray:
    """σ(Â · base · W) по всем строкам. Â остаётся разреженной."""
    layers = _as_layers(W)
    base = np.asarray(base, dtype=np.float64)
    _check_dims(normalized.n, base, layers)
    act, _ = _activation(activation)
    h = base
    for w in layers:
        h = act(normalized.matrix @ h @ w)
    return np.asarray(h)


def _gather_rows(adj, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Строки rows (уникальные) из CSR adj → (плотный блок |rows| × |cols|, cols),
    где cols — отсортированное объединение их соседей.
    """
    indptr, indices, data = adj.indptr, adj.indices, adj.data
    starts = indptr[rows].astype(np.int64)
    lengths = indptr[rows + 1].astype(np.int64) - starts
    total = int(lengths.sum())
    owner = np.repeat(np.arange(len(rows)), lengths)
    offsets = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    pos = np.repeat(starts, lengths) + offsets
    cols, inv = np.unique(indices[pos], return_inverse=True)
    local = np.zeros((len(rows), len(cols)))
    local[owner, inv] = data[pos]
    return local, cols.astype(np.int64)


class _BranchPass:
    """
    Прямой проход одной ветви GCN для набора уникальных строк + кэш для обратного.

    blocks[l] = (плотный блок Â, id входных строк слоя l); blocks[0][1] — строки base,
    от которых зависит результат.
    """

    def __init__(self, adj, base: np.ndarray, weights: list[np.ndarray], activation: str, rows: np.ndarray):
        self.weights = weights
        self.act, self.act_grad = _activation(activation)
        blocks = []
        out_rows = rows
        for _ in weights:
            local, in_rows = _gather_rows(adj, out_rows)
            blocks.append((local, in_rows))
            out_rows = in_rows
        blocks.reverse()
        self.blocks = blocks

        h = base[blocks[0][1]]
        self.cache = []
        for (local, _), w in zip(blocks, weights):
            agg = local @ h
            z = agg @ w
            h = self.act(z)
            self.cache.append((agg, z, h))
        self.output = h

    @property
    def base_rows(self) -> np.ndarray:
        return self.blocks[0][1]

    def backward(self, grad_out: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """dL/d(output) → (dL/d base[base_rows], [dL/dW_l])."""
        grads_w: list[np.ndarray] = [None] * len(self.weights)
        g = grad_out
        for layer in reversed(range(len(self.weights))):
            agg, z, out = self.cache[layer]
            dz = g * self.act_grad(z, out)
            grads_w[layer] = agg.T @ dz
            g = self.blocks[layer][0].T @ (dz @ self.weights[layer].T)
        return g, grads_w


def _check_rows(rows, n: int) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64).ravel()
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise ValueError(f"id строки вне [0, {n}): min={rows.min()}, max={rows.max()}")
    return rows


def gcn_forward_rows(normalized: NormalizedGraph, base: np.ndarray, W, activation: str,
                     rows: Sequence[int]) -> np.ndarray:
    """
    Те же строки, что дал бы gcn_forward, но считаются только они:
    читаются лишь строки base из окрестностей rows. Повторы в rows допустимы.
    """
    layers = _as_layers(W)
    base = np.asarray(base, dtype=np.float64)
    _check_dims(normalized.n, base, layers)
    rows = _check_rows(rows, normalized.n)
    uniq, inv = np.unique(rows, return_inverse=True)
    branch = _BranchPass(normalized.matrix, base, layers, activation, uniq)
    return branch.output[inv]


def aggregate(Uf: np.ndarray, Us: np.ndarray, mode: str = DEFAULT_AGG) -> np.ndarray:
    """mean → (Uf + Us)/2, max → поэлементный максимум."""
    if Uf.shape != Us.shape:
        raise ValueError(f"Формы не совпадают: {Uf.shape} vs {Us.shape}")
    if mode == "mean":
        return (Uf + Us) / 2.0
    if mode == "max":
        return np.maximum(Uf, Us)
    raise ValueError(f"agg: ожидалось одно из {AGG_MODES}, получено {mode!r}")


class _Encoding:
    """u (или u') для набора уникальных строк по всем ветвям + агрегация."""

    def __init__(self, params: ModelParams, graphs: ModelGraphs, config: TrainConfig,
                 rows: np.ndarray, context: bool):
        base = params.U0c if context else params.U0
        self.mode = config.agg
        self.passes = [
            (kind, _BranchPass(g.matrix, base, weights, config.activation, rows))
            for kind, g, weights in graphs.branches(params)
        ]
        outs = [p.output for _, p in self.passes]
        self.output = outs[0] if len(outs) == 1 else aggregate(outs[0], outs[1], self.mode)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict[str, list[np.ndarray]]]:
        """dL/du → (id строк base, dL/d base[id], {ветвь: [dL/dW_l]})."""
        if len(self.passes) == 1:
            branch_grads = [grad]
        elif self.mode == "mean":
            branch_grads = [grad * 0.5, grad * 0.5]
        else:
            # Субградиент max: при равенстве значение уходит в первую ветвь (flow)
            first = self.passes[0][1].output >= self.passes[1][1].output
            branch_grads = [grad * first, grad * ~first]

        rows = np.unique(np.concatenate([p.base_rows for _, p in self.passes]))
        grad_base = np.zeros((len(rows), grad.shape[1]))
        grads_w: dict[str, list[np.ndarray]] = {}
        for (kind, branch), g in zip(self.passes, branch_grads):
            g_base, g_w = branch.backward(g)
            grad_base[np.searchsorted(rows, branch.base_rows)] += g_base
            grads_w[kind] = g_w
        return rows, grad_base, grads_w


def embed(params: ModelParams, graphs: ModelGraphs, config: TrainConfig, rows: Sequence[int],
          context: bool = False) -> np.ndarray:
    """
    Узловые векторы u_l (context=False) или контекстные u'_l (context=True)
    для строк rows: Agg(GCN_flow(rows), GCN_spatial(rows)).
    """
    rows = _check_rows(rows, graphs.n)
    uniq, inv = np.unique(rows, return_inverse=True)
    return _Encoding(params, graphs, config, uniq, context).output[inv]


def embed_all(params: ModelParams, graphs: ModelGraphs, config: TrainConfig,
              context: bool = False) -> np.ndarray:
    """Все N строк через разреженный прямой проход."""
    base = params.U0c if context else params.U0
    outs = [gcn_forward(g, base, weights, config.activation) for _, g, weights in graphs.branches(params)]
    return outs[0] if len(outs) == 1 else aggregate(outs[0], outs[1], config.agg)


# ══════════════════════════════════════════════════════════════════════════════
# Негативное сэмплирование
# ══════════════════════════════════════════════════════════════════════════════
class NegativeSampler:
    """
    Unigram^0.75 по числу посещений. Ячейки с visit_count = 0 (добавленные
    densify/extend) имеют нулевую вероятность.
    """

    def __init__(self, visit_counts: Sequence[int], power: float = NEGATIVE_POWER):
        weights = np.asarray(visit_counts, dtype=np.float64) ** power
        total = weights.sum()
        if not total > 0:
            raise ValueError("Негативный сэмплер: нет ни одной ячейки с visit_count > 0")
        self.n = len(weights)
        self.probs = weights / total
        # Число id с ненулевой вероятностью: кандидаты есть, пока исключение их не покрыло
        self.support = int(np.count_nonzero(weights))
        cdf = np.cumsum(self.probs)
        # Хвост из нулевых весов получает ровно 1.0 и при r < 1 не выпадает
        self.cdf = cdf / cdf[-1]

    def _excluded(self, exclude) -> tuple[np.ndarray, float] | None:
        """(уникальные исключённые id, оставшаяся масса) или None, если кандидатов нет. O(|exclude|)."""
        if not isinstance(exclude, np.ndarray):
            exclude = np.fromiter(exclude, dtype=np.int64)
        excluded = np.unique(exclude.astype(np.int64, copy=False))
        p = self.probs[excluded]
        if np.count_nonzero(p) >= self.support:
            return None
        return excluded, 1.0 - float(p.sum())

    def has_candidates(self, exclude: Iterable[int]) -> bool:
        return self._excluded(exclude) is not None

    def try_sample(self, k: int, exclude: Iterable[int], rng: np.random.Generator) -> np.ndarray | None:
        """Как sample, но без кандидатов возвращает None вместо исключения."""
        if k < 1:
            raise ValueError(f"K должен быть ≥ 1, получено {k}")
        prepared = self._excluded(exclude)
        if prepared is None:
            return None
        excluded, allowed_mass = prepared

        if allowed_mass < 0.5:
            # Отбраковка станет слишком дорогой — сэмплируем из усечённого распределения
            p = self.probs.copy()
            p[excluded] = 0.0
            return rng.choice(self.n, size=k, p=p / p.sum())

        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            draws = np.searchsorted(self.cdf, rng.random(k - filled), side="right")
            draws = np.minimum(draws, self.n - 1)
            keep = draws[~(draws[:, None] == excluded[None, :]).any(axis=1)]
            out[filled:filled + len(keep)] = keep
            filled += len(keep)
        return out

    def sample(self, k: int, exclude: Iterable[int], rng: np.random.Generator) -> np.ndarray:
        """
        k id с повторениями; исключённые id отбрасываются и перетягиваются.

        Raises:
            ValueError — k < 1 или после исключения не осталось ни одного кандидата
        """
        out = self.try_sample(k, exclude, rng)
        if out is None:
            raise ValueError("Негативный сэмплер: после исключения не осталось кандидатов")
        return out


def negative_sample(sampler: NegativeSampler, k: int, exclude: Iterable[int],
                    rng: np.random.Generator) -> np.ndarray:
    return sampler.sample(k, exclude, rng)


# ══════════════════════════════════════════════════════════════════════════════
# Функция потерь и градиенты
# ══════════════════════════════════════════════════════════════════════════════
@dataclass
class SkipGramBatch:
    """Один центр + его контексты + негативы (id могут повторяться)."""
    center: int
    contexts: np.ndarray
    negatives: np.ndarray


@dataclass
class SkipGramGradients:
    loss: float
    u0_rows: np.ndarray
    u0_grad: np.ndarray
    u0c_rows: np.ndarray
    u0c_grad: np.ndarray
    wf: list[np.ndarray]
    ws: list[np.ndarray]

    def is_finite(self) -> bool:
        arrays = [self.u0_grad, self.u0c_grad, *self.wf, *self.ws]
        return math.isfinite(self.loss) and all(np.isfinite(a).all() for a in arrays)

    def max_abs(self) -> float:
        arrays = [self.u0_grad, self.u0c_grad, *self.wf, *self.ws]
        return max((float(np.abs(a).max()) for a in arrays if a.size), default=0.0)

    def u0_dense(self, n: int) -> np.ndarray:
        out = np.zeros((n, self.u0_grad.shape[1]))
        out[self.u0_rows] = self.u0_grad
        return out

    def u0c_dense(self, n: int) -> np.ndarray:
        out = np.zeros((n, self.u0c_grad.shape[1]))
        out[self.u0c_rows] = self.u0c_grad
        return out


def skipgram_loss(center: np.ndarray, contexts: np.ndarray, negatives: np.ndarray) -> float:
    """
    Σ −log σ(u·u'_o) + Σ −log σ(−u·u'_z).
    −log σ(x) = log(1 + e^{−x}) считается через logaddexp — без переполнения при |x| > 30.
    """
    u = np.asarray(center, dtype=np.float64).ravel()
    C = np.asarray(contexts, dtype=np.float64).reshape(-1, u.size)
    Z = np.asarray(negatives, dtype=np.float64).reshape(-1, u.size)
    return float(np.sum(np.logaddexp(0.0, -(C @ u))) + np.sum(np.logaddexp(0.0, Z @ u)))


def _batch_ids(batch: SkipGramBatch) -> tuple[np.ndarray, np.ndarray]:
    contexts = np.asarray(batch.contexts, dtype=np.int64).ravel()
    negatives = np.asarray(batch.negatives, dtype=np.int64).ravel()
    return contexts, negatives


def batch_loss(batch: SkipGramBatch, params: ModelParams, graphs: ModelGraphs, config: TrainConfig) -> float:
    """Только прямой проход — для конечных разностей и диагностики."""
    contexts, negatives = _batch_ids(batch)
    u = embed(params, graphs, config, [batch.center])[0]
    V = embed(params, graphs, config, np.concatenate((contexts, negatives)), context=True)
    return skipgram_loss(u, V[:len(contexts)], V[len(contexts):])


def _sum_layer_grads(weights: list[np.ndarray], *parts: list[np.ndarray] | None) -> list[np.ndarray]:
    total = [np.zeros_like(w) for w in weights]
    for part in parts:
        if part is None:
            continue
        for acc, g in zip(total, part):
            acc += g
    return total


def skipgram_gradients(batch: SkipGramBatch, params: ModelParams, graphs: ModelGraphs,
                       config: TrainConfig) -> SkipGramGradients:
    """
    Точные градиенты skipgram_loss по всем затронутым параметрам.

    Цепочка: loss → u, u' → Agg → σ' → W → блоки Â → строки U0 / U0c.
    Строки U0/U0c вне 1-хоп окрестностей (на слой) центра, контекстов и
    негативов в результат не попадают — их градиент ровно ноль.
    """
    contexts, negatives = _batch_ids(batch)
    center = _check_rows([batch.center], graphs.n)

    node = _Encoding(params, graphs, config, center, context=False)
    ids = _check_rows(np.concatenate((contexts, negatives)), graphs.n)
    uniq, inv = np.unique(ids, return_inverse=True)
    ctx = _Encoding(params, graphs, config, uniq, context=True)

    u = node.output[0]
    V = ctx.output[inv]
    signs = np.concatenate((np.ones(len(contexts)), -np.ones(len(negatives))))
    margins = signs * (V @ u)
    loss = float(np.sum(np.logaddexp(0.0, -margins)))

    # d loss / d (u·v) для каждой пары
    coef = -signs * expit(-margins)
    grad_u = coef @ V
    grad_ctx = np.zeros((len(uniq), params.dim))
    np.add.at(grad_ctx, inv, coef[:, None] * u[None, :])

    u0_rows, u0_grad, w_node = node.backward(grad_u[None, :])
    u0c_rows, u0c_grad, w_ctx = ctx.backward(grad_ctx)

    return SkipGramGradients(
        loss=loss,
        u0_rows=u0_rows,
        u0_grad=u0_grad,
        u0c_rows=u0c_rows,
        u0c_grad=u0c_grad,
        wf=_sum_layer_grads(params.Wf, w_node.get(GRAPH_KIND_FLOW), w_ctx.get(GRAPH_KIND_FLOW)),
        ws=_sum_layer_grads(params.Ws, w_node.get(GRAPH_KIND_SPATIAL), w_ctx.get(GRAPH_KIND_SPATIAL)),
    )


def apply_gradients(params: ModelParams, grads: SkipGramGradients, lr: float) -> None:
    """SGD-шаг на месте. Трогает только затронутые строки U0/U0c."""
    params.U0[grads.u0_rows] -= lr * grads.u0_grad
    params.U0c[grads.u0c_rows] -= lr * grads.u0c_grad
    for w, g in zip(params.Wf, grads.wf):
        w -= lr * g
    for w, g in zip(params.Ws, grads.ws):
        w -= lr * g


# ══════════════════════════════════════════════════════════════════════════════
# Быстрый однослойный шаг
# ══════════════════════════════════════════════════════════════════════════════
class NeighborTable:
    """
    Строки CSR Â, выровненные до максимальной степени:
        ids[i, :deg_i]     — соседи i (включая петлю i)
        weights[i, :deg_i] — Â[i, соседи]
    Хвост строки заполнен id самой строки с весом 0: окрестность не расширяется,
    вклад хвоста в свёртку и в градиент ровно ноль.
    """

    def __init__(self, normalized: NormalizedGraph):
        adj = normalized.matrix
        n = normalized.n
        degree = np.diff(adj.indptr).astype(np.int64)
        width = int(degree.max()) if n else 0
        self.ids = np.repeat(np.arange(n, dtype=np.int64)[:, None], width, axis=1)
        self.weights = np.zeros((n, width))
        owner = np.repeat(np.arange(n, dtype=np.int64), degree)
        slot = np.arange(len(owner), dtype=np.int64) - np.repeat(adj.indptr[:-1].astype(np.int64), degree)
        self.ids[owner, slot] = adj.indices
        self.weights[owner, slot] = adj.data

    @staticmethod
    def entries(normalized: NormalizedGraph) -> int:
        """Размер таблицы до её построения: N × max_degree."""
        degree = np.diff(normalized.matrix.indptr)
        return normalized.n * (int(degree.max()) if normalized.n else 0)


@dataclass
class LocalGradients:
    """
    Градиенты одного шага в координатах выровненных таблиц.
    rows[b] — id строк stacked для ветви b, (r, width): строка 0 — центр (U0),
    остальные — контексты и негативы (U0c, со сдвигом N). grads[b] — (r, width, d).
    """
    loss: float
    rows: list[np.ndarray]
    grads: list[np.ndarray]
    weights: dict[str, np.ndarray]

    def is_finite(self) -> bool:
        arrays = [*self.grads, *self.weights.values()]
        return math.isfinite(self.loss) and all(np.isfinite(a).all() for a in arrays)

    def max_abs(self) -> float:
        arrays = [*self.grads, *self.weights.values()]
        return max((float(np.abs(a).max()) for a in arrays if a.size), default=0.0)

    def node_rows(self) -> np.ndarray:
        """Строки U0, получившие градиент (с повторами)."""
        return np.concatenate([r[0] for r in self.rows])

    def stacked_dense(self, n: int) -> np.ndarray:
        """Плотный градиент по stacked (2N×d): первые N строк — U0, остальные — U0c."""
        d = self.grads[0].shape[-1]
        out = np.zeros((2 * n, d))
        for r, g in zip(self.rows, self.grads):
            np.add.at(out, r.ravel(), g.reshape(-1, d))
        return out


class SingleLayerStep:
    """
    SGD-шаг однослойной модели без CSR-срезов и np.unique: окрестности центра,
    контекстов и негативов берутся одной выборкой из NeighborTable на ветвь.
    Градиенты те же, что у skipgram_gradients, с точностью до порядка сложения.
    """

    def __init__(self, graphs: ModelGraphs, config: TrainConfig):
        if config.layers != 1:
            raise ValueError(f"Быстрый шаг только для одного слоя, layers={config.layers}")
        self.n = graphs.n
        self.agg = config.agg
        self.act, self.act_grad = _activation(config.activation)
        self.tables = [(kind, NeighborTable(g)) for kind, g in graphs.named()]

    @staticmethod
    def supports(graphs: ModelGraphs, config: TrainConfig) -> bool:
        if config.layers != 1:
            return False
        return sum(NeighborTable.entries(g) for _, g in graphs.named()) <= NEIGHBOR_TABLE_MAX_ENTRIES

    @staticmethod
    def _layer(params: ModelParams, kind: str) -> np.ndarray:
        return (params.Wf if kind == GRAPH_KIND_FLOW else params.Ws)[0]

    def gradients(self, batch: SkipGramBatch, params: ModelParams) -> LocalGradients:
        contexts, negatives = _batch_ids(batch)
        rows = np.concatenate(([batch.center], contexts, negatives)).astype(np.int64, copy=False)

        passes = []
        for kind, table in self.tables:
            ids = table.ids[rows]
            ids[1:] += self.n
            w = table.weights[rows]
            agg = np.matmul(w[:, None, :], params.stacked[ids])[:, 0, :]
            W = self._layer(params, kind)
            z = agg @ W
            passes.append((kind, ids, w, agg, z, self.act(z), W))

        outs = [p[5] for p in passes]
        out = outs[0] if len(outs) == 1 else aggregate(outs[0], outs[1], self.agg)
        u, V = out[0], out[1:]
        signs = np.ones(len(V))
        signs[len(contexts):] = -1.0
        margins = signs * (V @ u)
        loss = float(np.sum(np.logaddexp(0.0, -margins)))

        coef = -signs * expit(-margins)
        grad = np.empty_like(out)
        grad[0] = coef @ V
        grad[1:] = coef[:, None] * u[None, :]

        if len(passes) == 1:
            branch_grads = [grad]
        elif self.agg == "mean":
            half = grad * 0.5
            branch_grads = [half, half]
        else:
            # Тот же субградиент, что в _Encoding: равенство уходит в flow
            first = outs[0] >= outs[1]
            branch_grads = [grad * first, grad * ~first]

        rows_out, grads_out, grads_w = [], [], {}
        for (kind, ids, w, agg, z, h, W), g in zip(passes, branch_grads):
            dz = g * self.act_grad(z, h)
            grads_w[kind] = agg.T @ dz
            rows_out.append(ids)
            grads_out.append(w[:, :, None] * (dz @ W.T)[:, None, :])
        return LocalGradients(loss, rows_out, grads_out, grads_w)

    def apply(self, params: ModelParams, grads: LocalGradients, lr: float) -> None:
        """SGD на месте; повторы строк складываются (np.subtract.at)."""
        d = params.dim
        for ids, g in zip(grads.rows, grads.grads):
            np.subtract.at(params.stacked, ids.ravel(), lr * g.reshape(-1, d))
        for kind, g in grads.weights.items():
            layer = self._layer(params, kind)
            layer -= lr * g


# ══════════════════════════════════════════════════════════════════════════════
# Полный softmax (только оракул для маленьких N)
# ══════════════════════════════════════════════════════════════════════════════
def window_contexts(trajectory: np.ndarray, t: int, window: int) -> np.ndarray:
    """Id на позициях t−m..t+m без самой t, обрезанных по границам траектории."""
    lo = max(0, t - window)
    return np.concatenate((trajectory[lo:t], trajectory[t + 1:t + 1 + window]))


def full_softmax_log_likelihood(trajectories: Iterable[np.ndarray], params: ModelParams,
                                graphs: ModelGraphs, config: TrainConfig) -> float:
    """
    Σ_t Σ_{o в окне} log P(l_o | l_t), P — полный softmax по всем локациям.

    Raises:
        ValueError — N > FULL_SOFTMAX_MAX_N
    """
    n = graphs.n
    if n > FULL_SOFTMAX_MAX_N:
        raise ValueError(f"Полный softmax допустим только для N ≤ {FULL_SOFTMAX_MAX_N}, N = {n}")
    U = embed_all(params, graphs, config, context=False)
    V = embed_all(params, graphs, config, context=True)
    logits = U @ V.T
    log_norm = logsumexp(logits, axis=1)
    total = 0.0
    for traj in trajectories:
        traj = np.asarray(traj, dtype=np.int64)
        for t, center in enumerate(traj):
            ctx = window_contexts(traj, t, config.window)
            if ctx.size:
                total += float(np.sum(logits[center, ctx]) - ctx.size * log_norm[center])
    return total
