"""Run orchestration: resumable evaluation and the feedback comparison.

Per-sample results stream to records.jsonl as they finish; a rerun with
resume enabled skips samples that already succeeded and retries failed
ones.  Aggregation sorts by sample_id, so completion order never
changes a report.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from sgscore.config import RunConfig
from sgscore.feedback import (
    GenerationBackend,
    GenerationError,
    GenerationRequest,
    PromptComposer,
    compose_scene_prompt,
    run_feedback,
)
from sgscore.graph import SceneGraph, serialize_triplets
from sgscore.judge import AnswerCache, JudgeBackend, JudgeError
from sgscore.metrics import (
    EvaluationRecord,
    RunReport,
    aggregate,
    evaluate_sample,
    percent,
    record_from_dict,
    record_to_dict,
    report_to_csv,
    report_to_json,
)

logger = logging.getLogger(__name__)

FEEDBACK_SETTINGS = ("baseline", "composition", "feedback")


@dataclass
class EvalOutcome:
    """Everything an evaluation run produced, plus its exit code."""

    records: dict[str, EvaluationRecord]
    failed: dict[str, str]
    report: RunReport
    exit_code: int


def load_records_file(path: Path) -> tuple[dict[str, EvaluationRecord], dict[str, str]]:
    """Read a records file into (ok records, failed errors) by sample_id.

    The file is append-only, so the last line for a sample wins.
    """
    ok: dict[str, EvaluationRecord] = {}
    failed: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            sample_id = doc["sample_id"]
            if doc.get("status") == "failed":
                failed[sample_id] = str(doc.get("error", ""))
                ok.pop(sample_id, None)
            else:
                ok[sample_id] = record_from_dict(doc)
                failed.pop(sample_id, None)
    return ok, failed


def derive_vocab(graphs: Mapping[str, SceneGraph]) -> tuple[str, ...]:
    """Sorted distinct relations across the dataset."""
    return tuple(sorted({e.relation for g in graphs.values() for e in g.edges}))


def load_labels_jsonl(path: Path) -> dict[str, str]:
    """Map sample_id (file_name) to its Level-2 scene category."""
    labels: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            name = doc.get("file_name")
            level2 = doc.get("level 2") or doc.get("level2")
            if name and level2:
                labels[str(name)] = str(level2)
    return labels


def run_eval(
    graphs: Mapping[str, SceneGraph],
    image_loader: Callable[[str], bytes],
    backend: JudgeBackend,
    config: RunConfig,
    out_dir: Path,
    *,
    resume: bool = False,
    categories: Optional[Mapping[str, str]] = None,
    cache: Optional[AnswerCache] = None,
) -> EvalOutcome:
    """Evaluate every sample, streaming records and writing the report.

    Samples run under the configured concurrency bound.  A sample whose
    image cannot be loaded or whose backend keeps failing is recorded as
    failed and excluded from aggregation; exit code 2 signals that.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.jsonl"

    existing: dict[str, EvaluationRecord] = {}
    if resume and records_path.exists():
        loaded_ok, loaded_failed = load_records_file(records_path)
        existing = {sid: rec for sid, rec in loaded_ok.items() if sid in graphs}
        if loaded_failed:
            logger.info("retrying %d previously failed samples", len(loaded_failed))
    elif records_path.exists():
        records_path.unlink()

    vocab = config.vocab or derive_vocab(graphs)
    pending = [sid for sid in graphs if sid not in existing]

    write_lock = threading.Lock()

    def persist(doc: dict) -> None:
        with write_lock:
            with records_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(doc) + "\n")

    def work(sample_id: str) -> tuple[str, Optional[EvaluationRecord], Optional[str]]:
        try:
            image = image_loader(sample_id)
            record = evaluate_sample(
                graphs[sample_id],
                image,
                backend,
                alpha=config.alpha,
                seed=config.seed,
                vocab=vocab,
                sample_id=sample_id,
                cache=cache,
            )
            return sample_id, record, None
        except (JudgeError, OSError, ValueError) as exc:
            return sample_id, None, f"{type(exc).__name__}: {exc}"

    records: dict[str, EvaluationRecord] = dict(existing)
    failed: dict[str, str] = {}
    if pending:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = [pool.submit(work, sid) for sid in pending]
            for future in as_completed(futures):
                sample_id, record, error = future.result()
                if record is not None:
                    records[sample_id] = record
                    persist(record_to_dict(record))
                else:
                    failed[sample_id] = error or "unknown error"
                    logger.warning("sample %s failed: %s", sample_id, error)
                    persist(
                        {"v": 1, "sample_id": sample_id, "status": "failed", "error": error}
                    )

    report = aggregate(
        records.values(),
        graphs,
        gamma=config.gamma,
        categories=categories,
        alpha=config.alpha,
        seed=config.seed,
        model_name=getattr(backend, "model_name", ""),
    )
    (out_dir / "report.json").write_text(report_to_json(report), encoding="utf-8")
    (out_dir / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    return EvalOutcome(
        records=records,
        failed=failed,
        report=report,
        exit_code=2 if failed else 0,
    )


@dataclass
class FeedbackOutcome:
    """Per-setting records plus failures from a feedback comparison run."""

    records: dict[str, dict[str, EvaluationRecord]] = field(default_factory=dict)
    failed: dict[str, dict[str, str]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    exit_code: int = 0


def _setting_summary(records: Sequence[EvaluationRecord]) -> dict:
    if not records:
        return {"n": 0, "mean_or": None, "mean_rr": None, "mean_sg": None}
    n = len(records)
    return {
        "n": n,
        "mean_or": percent(sum(r.object_recall for r in records) / n),
        "mean_rr": percent(sum(r.relation_recall for r in records) / n),
        "mean_sg": percent(sum(r.sgscore for r in records) / n),
    }


def run_feedback_settings(
    graphs: Mapping[str, SceneGraph],
    gen_backend: GenerationBackend,
    judge_backend: JudgeBackend,
    config: RunConfig,
    out_dir: Path,
    *,
    composer: Optional[PromptComposer] = None,
    cache: Optional[AnswerCache] = None,
    settings: Sequence[str] = FEEDBACK_SETTINGS,
) -> FeedbackOutcome:
    """Compare bare triplet prompts, composed prompts, and full feedback.

    The feedback setting with max_iterations = 0 issues exactly the same
    generation request as the composition setting, so their scores agree
    then.
    """
    for name in settings:
        if name not in FEEDBACK_SETTINGS:
            raise ValueError(f"unknown setting {name!r}; choose from {FEEDBACK_SETTINGS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = config.vocab or derive_vocab(graphs)
    outcome = FeedbackOutcome()
    lines: list[dict] = []

    for sample_id in sorted(graphs):
        g = graphs[sample_id]
        for setting in settings:
            try:
                extra: dict = {}
                if setting == "feedback":
                    result = run_feedback(
                        g,
                        gen_backend,
                        judge_backend,
                        alpha=config.alpha,
                        lambda0=config.lambda0,
                        lambda1=config.lambda1,
                        max_iterations=config.max_iterations,
                        seed=config.seed,
                        vocab=vocab,
                        composer=composer,
                        sample_id=sample_id,
                        cache=cache,
                        size=config.image_size,
                    )
                    if result.failed or result.final_record is None:
                        raise GenerationError(result.error or "no iterations completed")
                    record = result.final_record
                    extra = {
                        "iterations": len(result.iterations),
                        "converged": result.converged,
                    }
                else:
                    if setting == "baseline":
                        prompt = serialize_triplets(g)
                    else:
                        prompt = compose_scene_prompt(g, composer)
                    image = gen_backend.generate(
                        GenerationRequest(
                            prompt=prompt, seed=config.seed, size=config.image_size
                        )
                    )
                    record = evaluate_sample(
                        g,
                        image,
                        judge_backend,
                        alpha=config.alpha,
                        seed=config.seed,
                        vocab=vocab,
                        sample_id=sample_id,
                        cache=cache,
                    )
            except (GenerationError, JudgeError, ValueError) as exc:
                outcome.failed.setdefault(setting, {})[sample_id] = str(exc)
                logger.warning("sample %s (%s) failed: %s", sample_id, setting, exc)
                continue
            outcome.records.setdefault(setting, {})[sample_id] = record
            lines.append({"setting": setting, **record_to_dict(record), **extra})

    summary = {
        "config": {
            "alpha": config.alpha,
            "lambda0": config.lambda0,
            "lambda1": config.lambda1,
            "max_iterations": config.max_iterations,
            "seed": config.seed,
        },
        "settings": {
            setting: _setting_summary(
                [outcome.records.get(setting, {})[sid]
                 for sid in sorted(outcome.records.get(setting, {}))]
            )
            for setting in settings
        },
    }
    outcome.summary = summary
    outcome.exit_code = 2 if outcome.failed else 0

    with (out_dir / "feedback_records.jsonl").open("w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line) + "\n")
    (out_dir / "report.json").write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8"
    )
    csv_lines = ["setting,n,mean_or,mean_rr,mean_sg"]
    for setting in settings:
        row = summary["settings"][setting]
        csv_lines.append(
            ",".join(
                [
                    setting,
                    str(row["n"]),
                    *(
                        "" if row[key] is None else f"{row[key]:.2f}"
                        for key in ("mean_or", "mean_rr", "mean_sg")
                    ),
                ]
            )
        )
    (out_dir / "report.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return outcome
