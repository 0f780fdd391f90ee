"""Command-line interface.

Subcommands cover the whole workflow: dataset annotation, scene
classification, balanced sampling, evaluation, feedback generation,
report rebuilding, the study server, and the attention kernel check.
Exit codes: 0 success, 2 partial (some samples failed), 3 backend or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from sgscore import annotate as annotate_mod
from sgscore.attnmerge import kernel_self_check
from sgscore.config import (
    ConfigError,
    RunConfig,
    build_run_config,
    load_config_file,
)
from sgscore.feedback import GenerationError, HttpGenerationBackend
from sgscore.graph import (
    ComplexityLevel,
    SceneGraphError,
    load_dataset_jsonl,
    write_dataset_jsonl,
)
from sgscore.judge import AnswerCache, BackendError, ChatCompletionsBackend
from sgscore.metrics import (
    RunReport,
    aggregate,
    percent,
    report_to_csv,
    report_to_json,
)
from sgscore.runner import (
    FEEDBACK_SETTINGS,
    load_labels_jsonl,
    load_records_file,
    run_eval,
    run_feedback_settings,
)
from sgscore.study import StudyError, StudyServer, StudyState, load_study_tasks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_ERROR = 3


def _common_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (supports ${ENV} interpolation)")
    parser.add_argument("--alpha", type=float, help="object-recall weight in the score")
    parser.add_argument("--gamma", type=float, help="node weight in scene complexity")
    parser.add_argument("--lambda0", type=float, help="previous-image merge weight")
    parser.add_argument("--lambda1", type=float, help="reference-image merge weight")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--max-iterations", type=int, help="feedback refinement budget")
    parser.add_argument("--concurrency", type=int, help="parallel sample bound")


def _run_config(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(Path(args.config)) if args.config else {}
    overrides = {
        "alpha": args.alpha,
        "gamma": args.gamma,
        "lambda0": args.lambda0,
        "lambda1": args.lambda1,
        "seed": args.seed,
        "max_iterations": args.max_iterations,
        "concurrency": args.concurrency,
        "dataset": getattr(args, "dataset", None),
        "images_dir": getattr(args, "images_dir", None),
        "output_dir": getattr(args, "out", None),
    }
    return build_run_config(file_values, overrides)


def _load_graphs(config: RunConfig) -> dict:
    if not config.dataset:
        raise ConfigError("no dataset configured; pass --dataset or set it in the config")
    samples = load_dataset_jsonl(config.dataset)
    graphs = {}
    for sample_id, graph in samples:
        if sample_id in graphs:
            raise ConfigError(f"duplicate sample_id {sample_id!r} in dataset")
        graphs[sample_id] = graph
    return graphs


def _judge_backend(config: RunConfig) -> ChatCompletionsBackend:
    if config.judge is None:
        raise ConfigError("no judge backend configured (config key 'judge')")
    return ChatCompletionsBackend(config.judge)


def _cache(config: RunConfig) -> Optional[AnswerCache]:
    if config.cache_path:
        return AnswerCache(Path(config.cache_path))
    return None


def _print_report(report: RunReport) -> None:
    print(f"{'group':<28}{'n':>6}{'OR':>10}{'RR':>10}{'SG':>10}{'SG std':>10}")
    for name, stats in report.groups.items():
        cells = [
            "" if value is None else f"{value:.2f}"
            for value in (
                percent(stats.mean_or),
                percent(stats.mean_rr),
                percent(stats.mean_sg),
                percent(stats.std_sg),
            )
        ]
        print(f"{name:<28}{stats.n:>6}{cells[0]:>10}{cells[1]:>10}{cells[2]:>10}{cells[3]:>10}")


def cmd_annotate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    backend = _judge_backend(config)
    detections = json.loads(Path(args.detections).read_text(encoding="utf-8"))
    records = annotate_mod.load_coco_detections(detections)
    images_dir = Path(args.images_dir)

    def work(rec: annotate_mod.DetectionRecord):
        image_path = images_dir / rec.image_ref
        try:
            image = image_path.read_bytes()
        except OSError as exc:
            return rec, None, [f"cannot read image: {exc}"]
        graph, warnings = annotate_mod.annotate_image(backend, rec, image)
        return rec, graph, warnings

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        results = list(pool.map(work, records))

    graphs = []
    skipped = 0
    for rec, graph, warnings in results:
        for warning in warnings:
            logger.warning("%s: %s", rec.image_ref, warning)
        if graph is None:
            skipped += 1
        else:
            graphs.append(graph)
    write_dataset_jsonl(args.out, graphs)
    if args.stats:
        stats = annotate_mod.compute_vocab_stats(graphs)
        Path(args.stats).write_text(
            json.dumps(annotate_mod.vocab_stats_to_dict(stats), indent=2) + "\n",
            encoding="utf-8",
        )
    print(f"annotated {len(graphs)} images, skipped {skipped}")
    return EXIT_PARTIAL if skipped else EXIT_OK


def cmd_classify(args: argparse.Namespace) -> int:
    config = _run_config(args)
    backend = _judge_backend(config)
    samples = load_dataset_jsonl(config.dataset) if config.dataset else []
    if not samples:
        raise ConfigError("no dataset configured; pass --dataset")
    batch_size = args.batch_size
    labelled = 0
    skipped = 0
    with Path(args.out).open("w", encoding="utf-8") as fh:
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            prompt = annotate_mod.build_diversity_prompt([g for _, g in batch])
            entries: list[dict] = []
            for _ in range(2):
                reply = backend.complete(prompt)
                try:
                    entries, warnings = annotate_mod.parse_diversity_labels(reply)
                except annotate_mod.AnnotationError as exc:
                    logger.warning("classification reply rejected: %s", exc)
                    continue
                for warning in warnings:
                    logger.warning("classification: %s", warning)
                break
            by_index = {int(entry["image_id"]): entry for entry in entries}
            for offset, (sample_id, _) in enumerate(batch):
                entry = by_index.get(offset)
                if entry is None:
                    skipped += 1
                    continue
                label = entry["label"]
                fh.write(
                    json.dumps(
                        {
                            "image_id": start + offset,
                            "file_name": sample_id,
                            "level 1": label.level1,
                            "level 2": label.level2,
                        }
                    )
                    + "\n"
                )
                labelled += 1
    print(f"labelled {labelled} images, skipped {skipped}")
    return EXIT_PARTIAL if skipped else EXIT_OK


def _parse_quotas(text: str) -> dict[ComplexityLevel, int]:
    quotas: dict[ComplexityLevel, int] = {}
    by_name = {level.value.lower(): level for level in ComplexityLevel}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, count = part.partition("=")
        level = by_name.get(name.strip().lower())
        if level is None or not count.strip().isdigit():
            raise ConfigError(
                f"bad quota {part!r}; expected e.g. Simple=2,Medium=2,Hard=1"
            )
        quotas[level] = int(count)
    if not quotas:
        raise ConfigError("no quotas given")
    return quotas


def cmd_sample(args: argparse.Namespace) -> int:
    config = _run_config(args)
    graphs = list(_load_graphs(config).values())
    if args.synonyms or args.min_freq is not None:
        synonyms = (
            json.loads(Path(args.synonyms).read_text(encoding="utf-8"))
            if args.synonyms
            else None
        )
        min_freq = (
            args.min_freq
            if args.min_freq is not None
            else annotate_mod.DEFAULT_MIN_RELATION_FREQ
        )
        graphs = annotate_mod.filter_relations(
            graphs, min_freq=min_freq, synonyms=synonyms
        )
    quotas = _parse_quotas(args.quotas)
    subset = annotate_mod.balanced_sample(graphs, config.gamma, quotas, config.seed)
    write_dataset_jsonl(args.out, subset)
    print(f"sampled {len(subset)} graphs")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args)
    backend = _judge_backend(config)
    graphs = _load_graphs(config)
    if not config.images_dir:
        raise ConfigError("no images directory configured; pass --images-dir")
    images_dir = Path(config.images_dir)
    categories = load_labels_jsonl(Path(args.labels)) if args.labels else None

    def image_loader(sample_id: str) -> bytes:
        return (images_dir / sample_id).read_bytes()

    outcome = run_eval(
        graphs,
        image_loader,
        backend,
        config,
        Path(config.output_dir),
        resume=args.resume,
        categories=categories,
        cache=_cache(config),
    )
    _print_report(outcome.report)
    if outcome.failed:
        print(f"{len(outcome.failed)} samples failed", file=sys.stderr)
    return outcome.exit_code


def cmd_feedback(args: argparse.Namespace) -> int:
    config = _run_config(args)
    backend = _judge_backend(config)
    if config.generation is None:
        raise ConfigError("no generation backend configured (config key 'generation')")
    gen = HttpGenerationBackend(
        config.generation.base_url,
        timeout=config.generation.timeout,
        max_retries=config.generation.max_retries,
    )
    composer = (
        ChatCompletionsBackend(config.composer) if config.composer is not None else None
    )
    graphs = _load_graphs(config)
    settings = (
        tuple(s.strip() for s in args.settings.split(",") if s.strip())
        if args.settings
        else FEEDBACK_SETTINGS
    )
    try:
        outcome = run_feedback_settings(
            graphs,
            gen,
            backend,
            config,
            Path(config.output_dir),
            composer=composer,
            cache=_cache(config),
            settings=settings,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for setting in settings:
        row = outcome.summary["settings"][setting]
        cells = [
            "" if row[key] is None else f"{row[key]:.2f}"
            for key in ("mean_or", "mean_rr", "mean_sg")
        ]
        print(f"{setting:<14}{row['n']:>6}{cells[0]:>10}{cells[1]:>10}{cells[2]:>10}")
    return outcome.exit_code


def cmd_report(args: argparse.Namespace) -> int:
    config = _run_config(args)
    graphs = _load_graphs(config)
    records, failed = load_records_file(Path(args.records))
    records = {sid: rec for sid, rec in records.items() if sid in graphs}
    categories = load_labels_jsonl(Path(args.labels)) if args.labels else None
    report = aggregate(
        records.values(),
        graphs,
        gamma=config.gamma,
        categories=categories,
        alpha=config.alpha,
        seed=config.seed,
        model_name=args.model_name or "",
    )
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_to_json(report), encoding="utf-8")
    (out_dir / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    _print_report(report)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_serve_study(args: argparse.Namespace) -> int:
    config = _run_config(args)
    tasks = load_study_tasks(Path(args.tasks), seed=config.seed)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    responses_path = (
        Path(args.responses) if args.responses else out_dir / "study_responses.jsonl"
    )
    state = StudyState(tasks, responses_path)
    server = StudyServer(
        state,
        host=args.host,
        port=args.port,
        assets_dir=Path(args.assets) if args.assets else None,
        images_dir=Path(args.images_dir) if args.images_dir else None,
    )
    print(f"study server on {server.base_url} ({len(tasks)} tasks)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def cmd_kernel_check(args: argparse.Namespace) -> int:
    config = _run_config(args)
    report = kernel_self_check(seed=config.seed)
    tol = report["tolerance"]
    for key in (
        "attention_abs_err",
        "softmax_shift_abs_err",
        "merged_abs_err",
        "softmax_rowsum_abs_err",
    ):
        status = "PASS" if report[key] <= tol else "FAIL"
        print(f"{status} {key} = {report[key]:.3e} (tolerance {tol:.0e})")
    status = "PASS" if report["zero_weight_bit_exact"] else "FAIL"
    print(f"{status} zero_weight_bit_exact = {report['zero_weight_bit_exact']}")
    return EXIT_OK if report["ok"] else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgscore",
        description="Scene-graph factual-consistency toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="build scene graphs from detections")
    _common_options(p)
    p.add_argument("--detections", required=True, help="COCO-style detection JSON")
    p.add_argument("--images-dir", required=True, help="directory with image files")
    p.add_argument("--out", required=True, help="output dataset JSONL")
    p.add_argument("--stats", help="also write vocabulary stats JSON here")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("classify", help="assign scene diversity labels")
    _common_options(p)
    p.add_argument("--dataset", required=True, help="dataset JSONL")
    p.add_argument("--out", required=True, help="output labels JSONL")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sample", help="complexity-balanced dataset subset")
    _common_options(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quotas", required=True, help="e.g. Simple=2,Medium=2,Hard=1")
    p.add_argument("--min-freq", type=int, help="drop relations rarer than this")
    p.add_argument("--synonyms", help="JSON file mapping relation variants to canonical")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score images against their scene graphs")
    _common_options(p)
    p.add_argument("--dataset")
    p.add_argument("--images-dir")
    p.add_argument("--out", help="output directory")
    p.add_argument("--labels", help="diversity labels JSONL for category grouping")
    p.add_argument("--resume", action="store_true", help="skip already-scored samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("feedback", help="compare baseline/composition/feedback")
    _common_options(p)
    p.add_argument("--dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--settings", help=f"comma subset of {','.join(FEEDBACK_SETTINGS)}")
    p.set_defaults(func=cmd_feedback)

    p = sub.add_parser("report", help="rebuild a report from records")
    _common_options(p)
    p.add_argument("--records", required=True, help="records JSONL from eval")
    p.add_argument("--dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--labels")
    p.add_argument("--model-name", help="model name to echo in the report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve-study", help="serve the four-to-one study")
    _common_options(p)
    p.add_argument("--tasks", required=True, help="tasks JSONL")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--out", help="output directory")
    p.add_argument("--responses", help="responses JSONL (default under --out)")
    p.add_argument("--assets", help="built UI assets directory")
    p.add_argument("--images-dir", help="study images directory")
    p.set_defaults(func=cmd_serve_study)

    p = sub.add_parser("kernel-check", help="attention kernel self-test")
    _common_options(p)
    p.set_defaults(func=cmd_kernel_check)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        BackendError,
        GenerationError,
        StudyError,
        SceneGraphError,
        annotate_mod.AnnotationError,
        FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
