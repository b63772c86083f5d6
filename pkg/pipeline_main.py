# pipeline_main.py
# ──────────────────────────────────────────────────────────────────────────────
# Точка входа: python pipeline_main.py <команда> [флаги]
#
#   synth         синтетический город → records.csv + regions.csv
#   ingest        records.csv → trajectories.tsv + locations.tsv
#   build-graphs  → flow_graph.txt + spatial_graph.txt
#   train         → embeddings.txt
#   query         top-k соседей ячейки (CSV в stdout и/или --out)
#   eval          Accuracy@K по регионам (CSV в stdout и/или --out)
#   export        эмбеддинги → features.csv
#
# Коды выхода: 0 — успех, 1 — ошибка входных данных/флагов/файлов,
# 2 — внутренняя ошибка. Диагностика только в stderr, данные — в stdout.
# Каждый запуск дописывает запись в manifest.json рядом с выходом.
# ──────────────────────────────────────────────────────────────────────────────

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict

from config import (
    DEFAULT_LEVEL, DEFAULT_MAX_GAP_SEC, DEFAULT_DELTA_M, DEFAULT_MIN_FLOW_COUNT, DEFAULT_DIM,
    DEFAULT_WINDOW, DEFAULT_NEGATIVES, DEFAULT_LR, DEFAULT_MIN_LR, DEFAULT_EPOCHS, DEFAULT_TOLERANCE,
    DEFAULT_AGG, DEFAULT_LAYERS, DEFAULT_GRAPHS, DEFAULT_SEED, DEFAULT_WORKERS, DEFAULT_TOP_K,
    DEFAULT_EVAL_KS, AGG_MODES, GRAPH_VARIANTS, LOG_FORMAT, FLOAT_FORMAT,
    RECORDS_FILE, REGIONS_FILE, TRAJECTORIES_FILE, LOCATIONS_FILE, FLOW_GRAPH_FILE,
    SPATIAL_GRAPH_FILE, EMBEDDINGS_FILE, FEATURES_FILE,
    SYNTH_REGIONS, SYNTH_CELLS_PER_REGION, SYNTH_INTER_REGION_PROB, SYNTH_TRAJECTORIES,
    SYNTH_TRAJECTORY_LENGTH, SYNTH_USERS,
)
from errors import UsageError, ValidationError
from evaluation import (
    RegionLabeling, accuracy_table, export_features, mean_cosine_by_region, read_region_labeling,
    top_k_neighbors, write_neighbors, write_region_labeling,
)
from gcn_model import TrainConfig
from geo_cells import parse_cell_id
from graphs import (
    build_flow_graph, build_spatial_graph, normalize_adjacency, read_graph, write_graph,
)
from manifest import record_stage, verify_input
from synthetic_city import SyntheticCityConfig, generate_synthetic_city, synthetic_city_summary, write_records
from trainer import read_embeddings, train, write_embeddings
from trajectories import (
    build_location_index, densify_index, open_record_stream, parse_records, read_location_index,
    read_trajectories, sessionize, write_location_index, write_trajectories,
)
from version import VERSION_STRING

log = logging.getLogger("CLI")


class _ArgumentParser(argparse.ArgumentParser):
    """argparse, который не вызывает sys.exit(2) сам, а поднимает UsageError (→ код 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ══════════════════════════════════════════════════════════════════════════════
# Парсер
# ══════════════════════════════════════════════════════════════════════════════
def _common_flags() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--workers", type=int, default=DEFAULT_WORKERS,
                        help="потоков на стадию (> 1 — недетерминированный режим)")
    common.add_argument("--deterministic", action="store_true",
                        help="принудительно один поток, побитово воспроизводимый результат")
    common.add_argument("--quiet", action="store_true", help="только предупреждения и ошибки, без прогресса")
    return common


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ожидался список целых через запятую: {text!r}")
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError(f"K должны быть ≥ 1: {text!r}")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="pipeline_main.py", description=VERSION_STRING)
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    common = _common_flags()

    p = sub.add_parser("synth", parents=[common], help="синтетический город с разметкой регионов")
    p.add_argument("--out", required=True, help="выходная директория")
    p.add_argument("--regions", type=int, default=SYNTH_REGIONS)
    p.add_argument("--cells-per-region", type=int, default=SYNTH_CELLS_PER_REGION)
    p.add_argument("--inter-region-prob", type=float, default=SYNTH_INTER_REGION_PROB)
    p.add_argument("--trajectories", type=int, default=SYNTH_TRAJECTORIES)
    p.add_argument("--length", type=int, default=SYNTH_TRAJECTORY_LENGTH)
    p.add_argument("--users", type=int, default=SYNTH_USERS)
    p.add_argument("--level", type=int, default=DEFAULT_LEVEL)
    p.add_argument("--gzip", action="store_true", help="сжать records.csv")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="записи → траектории + индекс локаций")
    p.add_argument("--records", required=True, help="CSV user_id,timestamp,lat,lng (можно gzip)")
    p.add_argument("--out", required=True, help="выходная директория")
    p.add_argument("--level", type=int, default=DEFAULT_LEVEL)
    p.add_argument("--max-gap", type=int, default=DEFAULT_MAX_GAP_SEC, help="секунды")
    p.add_argument("--densify", action="store_true", help="дополнить индекс ячейками bounding box")
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("build-graphs", parents=[common], help="потоковый и пространственный графы")
    p.add_argument("--data", required=True, help="директория с trajectories.tsv и locations.tsv")
    p.add_argument("--out", help="выходная директория (по умолчанию --data)")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA_M, help="порог Δ, метры")
    p.add_argument("--min-count", type=int, default=DEFAULT_MIN_FLOW_COUNT)
    p.set_defaults(handler=_cmd_build_graphs)

    p = sub.add_parser("train", parents=[common], help="обучение эмбеддингов")
    p.add_argument("--data", required=True, help="директория с траекториями, индексом и графами")
    p.add_argument("--out", help="выходная директория (по умолчанию --data)")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--negatives", type=int, default=DEFAULT_NEGATIVES)
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--min-lr", type=float, default=DEFAULT_MIN_LR)
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--agg", choices=AGG_MODES, default=DEFAULT_AGG)
    p.add_argument("--graphs", choices=GRAPH_VARIANTS, default=DEFAULT_GRAPHS)
    p.add_argument("--layers", type=int, default=DEFAULT_LAYERS)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("query", parents=[common], help="top-k соседей ячейки")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--cell", required=True, help="id ячейки level:index")
    p.add_argument("-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--out", help="CSV rank,cell_id,similarity (иначе только stdout)")
    p.set_defaults(handler=_cmd_query)

    p = sub.add_parser("eval", parents=[common], help="Accuracy@K по разметке регионов")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--regions", required=True, help="CSV cell_id,region_id")
    p.add_argument("-k", type=_k_list, default=list(DEFAULT_EVAL_KS), help="например 5,10,20")
    p.add_argument("--out", help="CSV k,accuracy,regions,skipped (иначе только stdout)")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("export", parents=[common], help="эмбеддинги → CSV признаков")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", help="выходной CSV (по умолчанию features.csv рядом с эмбеддингами)")
    p.add_argument("--cell", action="append", default=None,
                   help="экспортировать только эти ячейки (флаг можно повторять)")
    p.set_defaults(handler=_cmd_export)
    return parser


# ══════════════════════════════════════════════════════════════════════════════
# Команды
# ══════════════════════════════════════════════════════════════════════════════
def _prepare_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _cmd_synth(args) -> None:
    started = time.perf_counter()
    cfg = SyntheticCityConfig(
        regions=args.regions, cells_per_region=args.cells_per_region,
        inter_region_prob=args.inter_region_prob, trajectories=args.trajectories,
        min_length=args.length, max_length=args.length, users=args.users,
        level=args.level, seed=args.seed,
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise ValidationError(str(e))
    city = generate_synthetic_city(cfg)
    out = _prepare_dir(args.out)
    records_path = os.path.join(out, RECORDS_FILE + (".gz" if args.gzip else ""))
    regions_path = os.path.join(out, REGIONS_FILE)
    write_records(records_path, city.records, compress=args.gzip)
    write_region_labeling(regions_path, city.cell_regions)
    record_stage("synth", synthetic_city_summary(city), args.seed, [], [records_path, regions_path],
                 time.perf_counter() - started)


def _cmd_ingest(args) -> None:
    started = time.perf_counter()
    verify_input(args.records)
    with open_record_stream(args.records) as stream:
        records, report = parse_records(stream)
    trajectories = sessionize(records, args.max_gap, args.level, workers=args.workers)
    if not trajectories:
        raise ValidationError(f"{args.records}: ни одной корректной записи (отклонено {report.count})")
    index = build_location_index(trajectories)
    if args.densify:
        densify_index(index)
    out = _prepare_dir(args.out)
    traj_path = os.path.join(out, TRAJECTORIES_FILE)
    loc_path = os.path.join(out, LOCATIONS_FILE)
    write_trajectories(traj_path, trajectories)
    write_location_index(loc_path, index)
    log.info(f"Записей: {len(records)}, отклонено: {report.count}, локаций: {index.n}")
    config = {"level": args.level, "max_gap": args.max_gap, "densify": args.densify,
              "rejected": report.count, "workers": args.workers}
    record_stage("ingest", config, None, [args.records], [traj_path, loc_path],
                 time.perf_counter() - started)


def _cmd_build_graphs(args) -> None:
    started = time.perf_counter()
    traj_path = os.path.join(args.data, TRAJECTORIES_FILE)
    loc_path = os.path.join(args.data, LOCATIONS_FILE)
    verify_input(traj_path)
    verify_input(loc_path)
    trajectories = read_trajectories(traj_path)
    index = read_location_index(loc_path)
    flow = build_flow_graph(trajectories, index, min_count=args.min_count, workers=args.workers)
    spatial = build_spatial_graph(index, args.delta, workers=args.workers)
    out = _prepare_dir(args.out or args.data)
    flow_path = os.path.join(out, FLOW_GRAPH_FILE)
    spatial_path = os.path.join(out, SPATIAL_GRAPH_FILE)
    write_graph(flow_path, flow)
    write_graph(spatial_path, spatial)
    config = {"delta": args.delta, "min_count": args.min_count, "workers": args.workers}
    record_stage("build-graphs", config, None, [traj_path, loc_path], [flow_path, spatial_path],
                 time.perf_counter() - started)


def _cmd_train(args) -> None:
    started = time.perf_counter()
    config = TrainConfig(
        dim=args.dim, window=args.window, negatives=args.negatives, lr=args.lr, min_lr=args.min_lr,
        epochs=args.epochs, tolerance=args.tol, agg=args.agg, layers=args.layers,
        graphs=args.graphs, seed=args.seed, workers=args.workers,
    )
    try:
        config.validate()
    except ValueError as e:
        raise ValidationError(str(e))

    traj_path = os.path.join(args.data, TRAJECTORIES_FILE)
    loc_path = os.path.join(args.data, LOCATIONS_FILE)
    inputs = [traj_path, loc_path]
    graph_paths = {}
    if config.graphs in ("both", "flow"):
        graph_paths["flow"] = os.path.join(args.data, FLOW_GRAPH_FILE)
    if config.graphs in ("both", "spatial"):
        graph_paths["spatial"] = os.path.join(args.data, SPATIAL_GRAPH_FILE)
    inputs += graph_paths.values()
    for path in inputs:
        verify_input(path)

    trajectories = read_trajectories(traj_path)
    index = read_location_index(loc_path)
    normalized = {}
    for kind, path in graph_paths.items():
        g = read_graph(path)
        if g.kind != kind or g.n != index.n:
            raise ValidationError(f"{path}: ожидался граф {kind} на N={index.n}, получен {g.kind} на N={g.n}")
        normalized[kind] = normalize_adjacency(g)

    emb = train(trajectories, normalized.get("flow"), normalized.get("spatial"), index, config,
                progress=not args.quiet)
    out = _prepare_dir(args.out or args.data)
    emb_path = os.path.join(out, EMBEDDINGS_FILE)
    write_embeddings(emb_path, emb)
    record_stage("train", asdict(config), config.seed, inputs, [emb_path], time.perf_counter() - started)


def _cmd_query(args) -> None:
    started = time.perf_counter()
    verify_input(args.embeddings)
    emb = read_embeddings(args.embeddings)
    cell = parse_cell_id(args.cell)
    try:
        query_id = emb.row_of(cell)
    except KeyError as e:
        raise ValidationError(str(e.args[0]))
    neighbors = top_k_neighbors(emb, query_id, args.k)
    write_neighbors(sys.stdout, emb, neighbors)
    outputs = []
    if args.out:
        write_neighbors(args.out, emb, neighbors)
        outputs.append(args.out)
    record_stage("query", {"cell": args.cell, "k": args.k}, None, [args.embeddings], outputs,
                 time.perf_counter() - started)


def _cmd_eval(args) -> None:
    started = time.perf_counter()
    verify_input(args.embeddings)
    verify_input(args.regions)
    emb = read_embeddings(args.embeddings)
    cell_regions = read_region_labeling(args.regions)
    index_cells = {c: i for i, c in enumerate(emb.cells)}
    labels = {index_cells[c]: r for c, r in cell_regions.items() if c in index_cells}
    regions = RegionLabeling(emb.n, labels)
    table = accuracy_table(emb, regions, args.seed, args.k)
    try:
        intra, inter = mean_cosine_by_region(emb, regions)
        log.info(f"Средний косинус: внутри регионов {intra:.4f}, между регионами {inter:.4f}")
    except ValueError as e:
        log.warning(f"Средний косинус не посчитан: {e}")
    table.to_csv(sys.stdout, index=False, float_format="%.6f", lineterminator="\n")
    outputs = []
    if args.out:
        table.to_csv(args.out, index=False, float_format=f"%{FLOAT_FORMAT}", lineterminator="\n")
        outputs.append(args.out)
    record_stage("eval", {"k": args.k}, args.seed, [args.embeddings, args.regions], outputs,
                 time.perf_counter() - started)


def _cmd_export(args) -> None:
    started = time.perf_counter()
    verify_input(args.embeddings)
    emb = read_embeddings(args.embeddings)
    ids = None
    if args.cell:
        try:
            ids = [emb.row_of(parse_cell_id(c)) for c in args.cell]
        except KeyError as e:
            raise ValidationError(str(e.args[0]))
    out_path = args.out or os.path.join(os.path.dirname(args.embeddings), FEATURES_FILE)
    out_dir = os.path.dirname(out_path)
    if out_dir:
        _prepare_dir(out_dir)
    export_features(out_path, emb, ids)
    record_stage("export", {"cells": args.cell}, None, [args.embeddings], [out_path],
                 time.perf_counter() - started)


# ══════════════════════════════════════════════════════════════════════════════
# Запуск
# ══════════════════════════════════════════════════════════════════════════════
def _configure_logging(quiet: bool) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def run(argv: list[str] | None = None) -> int:
    """Разбирает argv, выполняет одну команду, возвращает код выхода."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)

    _configure_logging(args.quiet)
    if args.deterministic:
        args.workers = 1
    if args.workers < 1:
        log.error(f"--workers должен быть ≥ 1, получено {args.workers}")
        return 1

    try:
        args.handler(args)
    except FileNotFoundError as e:
        log.error(f"Файл не найден: {e.filename or e.args[0]}")
        return 1
    except (ValidationError, ValueError) as e:
        log.error(str(e))
        return 1
    except Exception:
        log.exception("Внутренняя ошибка")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(run())
