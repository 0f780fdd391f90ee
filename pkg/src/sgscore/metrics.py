"""Object recall, relation recall, and their weighted combination.

A generated image is scored against its ground-truth scene graph by
asking a judge about every object (with count thresholds for duplicated
categories) and every relation.  Per-sample records aggregate into
grouped reports by complexity level and scene category.
"""

from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Optional, Sequence, Union

from sgscore.graph import (
    Edge,
    ObjectId,
    SceneGraph,
    complexity,
    complexity_level,
)
from sgscore.judge import (
    AnswerCache,
    JudgeBackend,
    JudgeImage,
    build_presence_question,
    build_relation_question,
    edge_question_seed,
    ask,
)

logger = logging.getLogger(__name__)

RECORD_VERSION = 1


@dataclass(frozen=True)
class RelationVerdict:
    """Judge outcome for one ground-truth edge."""

    edge: Edge
    chosen_relation: str
    correct: bool


@dataclass(frozen=True)
class EvaluationRecord:
    """Scores and per-question verdicts for one (graph, image) pair."""

    sample_id: str
    object_verdicts: Mapping[ObjectId, bool]
    relation_verdicts: tuple[RelationVerdict, ...]
    object_recall: float
    relation_recall: float
    sgscore: float
    alpha: float

    def predicted_objects(self) -> tuple[ObjectId, ...]:
        return tuple(oid for oid, present in self.object_verdicts.items() if present)

    def predicted_edges(self) -> tuple[Edge, ...]:
        return tuple(v.edge for v in self.relation_verdicts if v.correct)


def object_recall(gt: SceneGraph, verdicts: Mapping[ObjectId, bool]) -> float:
    """Fraction of ground-truth objects judged present."""
    if gt.node_count == 0:
        raise ValueError("object recall is undefined for a graph with no objects")
    missing = [oid.raw for oid in gt.objects if oid not in verdicts]
    if missing:
        raise ValueError(f"verdicts missing for objects: {missing}")
    hits = sum(1 for oid in gt.objects if verdicts[oid])
    return hits / gt.node_count


def relation_recall(gt: SceneGraph, verdicts: Sequence[RelationVerdict]) -> float:
    """Fraction of ground-truth edges judged with the correct relation.

    A graph with no edges scores 1.0: there is nothing to violate.
    """
    if len(verdicts) != gt.edge_count:
        raise ValueError(
            f"expected {gt.edge_count} relation verdicts, got {len(verdicts)}"
        )
    gt_triples = {e.triple() for e in gt.edges}
    seen: set[tuple[str, str, str]] = set()
    for v in verdicts:
        triple = v.edge.triple()
        if triple not in gt_triples:
            raise ValueError(f"verdict for edge {triple} not in the graph")
        if triple in seen:
            raise ValueError(f"duplicate verdict for edge {triple}")
        seen.add(triple)
    if gt.edge_count == 0:
        return 1.0
    return sum(1 for v in verdicts if v.correct) / gt.edge_count


def sgscore(object_recall_value: float, relation_recall_value: float, alpha: float) -> float:
    """Weighted combination alpha*OR + (1-alpha)*RR."""
    for name, value in (
        ("object_recall", object_recall_value),
        ("relation_recall", relation_recall_value),
        ("alpha", alpha),
    ):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    return alpha * object_recall_value + (1.0 - alpha) * relation_recall_value


def _presence_verdicts(
    gt: SceneGraph,
    image: JudgeImage,
    backend: JudgeBackend,
    category: str,
    cache: Optional[AnswerCache],
) -> dict[ObjectId, bool]:
    """Resolve presence for all instances of one category.

    Count questions descend from the category multiplicity; the first
    Yes at threshold k credits the k lowest-index instances.
    """
    instances = sorted(
        (oid for oid in gt.objects if oid.category == category),
        key=lambda oid: oid.index,
    )
    credited = 0
    for k in range(len(instances), 0, -1):
        question = build_presence_question(category, k)
        answer = ask(backend, image, question, cache)
        if answer.yes:
            credited = k
            break
    return {oid: i < credited for i, oid in enumerate(instances)}


def _relation_verdict(
    gt: SceneGraph,
    image: JudgeImage,
    backend: JudgeBackend,
    edge_index: int,
    vocab: Sequence[str],
    seed: int,
    sample_id: str,
    cache: Optional[AnswerCache],
) -> RelationVerdict:
    edge = gt.edges[edge_index]
    question = build_relation_question(
        edge, vocab, edge_question_seed(seed, sample_id, edge_index)
    )
    answer = ask(backend, image, question, cache)
    chosen = question.choices[answer.choice_index]
    return RelationVerdict(
        edge=edge, chosen_relation=chosen, correct=answer.choice_index == question.answer_index
    )


def evaluate_sample(
    gt: SceneGraph,
    image: Union[bytes, JudgeImage],
    backend: JudgeBackend,
    *,
    alpha: float = 0.5,
    seed: int = 0,
    vocab: Sequence[str] = (),
    sample_id: Optional[str] = None,
    cache: Optional[AnswerCache] = None,
    concurrency: int = 1,
) -> EvaluationRecord:
    """Score one image against its ground-truth graph via the judge.

    Questions for different categories and edges may run concurrently;
    the count-question ladder within a category stays sequential, so
    results are independent of completion order.
    """
    if isinstance(image, bytes):
        if not image:
            raise ValueError("image bytes must be non-empty")
        image = JudgeImage.from_bytes(image)
    if sample_id is None:
        sample_id = gt.image_ref or "sample"
    if concurrency < 1:
        raise ValueError(f"concurrency must be >= 1, got {concurrency}")

    categories = sorted(gt.category_counts())
    object_verdicts: dict[ObjectId, bool] = {}
    relation_verdicts: list[Optional[RelationVerdict]] = [None] * gt.edge_count

    if concurrency == 1:
        for category in categories:
            object_verdicts.update(_presence_verdicts(gt, image, backend, category, cache))
        for i in range(gt.edge_count):
            relation_verdicts[i] = _relation_verdict(
                gt, image, backend, i, vocab, seed, sample_id, cache
            )
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            presence_futures = {
                category: pool.submit(
                    _presence_verdicts, gt, image, backend, category, cache
                )
                for category in categories
            }
            relation_futures = {
                i: pool.submit(
                    _relation_verdict, gt, image, backend, i, vocab, seed, sample_id, cache
                )
                for i in range(gt.edge_count)
            }
            for category in categories:
                object_verdicts.update(presence_futures[category].result())
            for i, future in relation_futures.items():
                relation_verdicts[i] = future.result()

    ordered_verdicts = {oid: object_verdicts[oid] for oid in gt.objects}
    verdict_tuple = tuple(v for v in relation_verdicts if v is not None)
    or_value = object_recall(gt, ordered_verdicts)
    rr_value = relation_recall(gt, verdict_tuple)
    return EvaluationRecord(
        sample_id=sample_id,
        object_verdicts=ordered_verdicts,
        relation_verdicts=verdict_tuple,
        object_recall=or_value,
        relation_recall=rr_value,
        sgscore=sgscore(or_value, rr_value, alpha),
        alpha=alpha,
    )


def record_to_dict(record: EvaluationRecord) -> dict:
    return {
        "v": RECORD_VERSION,
        "sample_id": record.sample_id,
        "alpha": record.alpha,
        "object_recall": record.object_recall,
        "relation_recall": record.relation_recall,
        "sgscore": record.sgscore,
        "object_verdicts": {
            oid.raw: present for oid, present in record.object_verdicts.items()
        },
        "relation_verdicts": [
            {
                "source": v.edge.source.raw,
                "target": v.edge.target.raw,
                "relation": v.edge.relation,
                "chosen": v.chosen_relation,
                "correct": v.correct,
            }
            for v in record.relation_verdicts
        ],
    }


def record_from_dict(doc: Mapping) -> EvaluationRecord:
    version = doc.get("v")
    if version != RECORD_VERSION:
        raise ValueError(f"unsupported record version {version!r}")
    object_verdicts = {
        ObjectId.parse(raw): bool(present)
        for raw, present in doc["object_verdicts"].items()
    }
    relation_verdicts = tuple(
        RelationVerdict(
            edge=Edge(
                source=ObjectId.parse(item["source"]),
                target=ObjectId.parse(item["target"]),
                relation=item["relation"],
            ),
            chosen_relation=item["chosen"],
            correct=bool(item["correct"]),
        )
        for item in doc["relation_verdicts"]
    )
    return EvaluationRecord(
        sample_id=doc["sample_id"],
        object_verdicts=object_verdicts,
        relation_verdicts=relation_verdicts,
        object_recall=float(doc["object_recall"]),
        relation_recall=float(doc["relation_recall"]),
        sgscore=float(doc["sgscore"]),
        alpha=float(doc["alpha"]),
    )


def percent(fraction: Optional[float]) -> Optional[float]:
    """Fraction as a percentage rounded half-up to 2 decimals."""
    if fraction is None:
        return None
    quantized = Decimal(repr(fraction * 100.0)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return float(quantized)


@dataclass(frozen=True)
class GroupStats:
    """Sample count and score statistics for one report group."""

    n: int
    mean_or: Optional[float]
    mean_rr: Optional[float]
    mean_sg: Optional[float]
    std_sg: Optional[float]


@dataclass(frozen=True)
class RunReport:
    """Grouped statistics plus an echo of the run configuration."""

    groups: Mapping[str, GroupStats]
    alpha: float
    gamma: float
    seed: Optional[int]
    model_name: str


LEVEL_GROUPS = ("Simple", "Medium", "Hard")


def _group_stats(records: Sequence[EvaluationRecord]) -> GroupStats:
    if not records:
        return GroupStats(n=0, mean_or=None, mean_rr=None, mean_sg=None, std_sg=None)
    sg_values = [r.sgscore for r in records]
    return GroupStats(
        n=len(records),
        mean_or=statistics.fmean(r.object_recall for r in records),
        mean_rr=statistics.fmean(r.relation_recall for r in records),
        mean_sg=statistics.fmean(sg_values),
        std_sg=statistics.pstdev(sg_values),
    )


def aggregate(
    records: Iterable[EvaluationRecord],
    graphs: Mapping[str, SceneGraph],
    *,
    gamma: float = 0.0,
    categories: Optional[Mapping[str, str]] = None,
    alpha: float = 0.5,
    seed: Optional[int] = None,
    model_name: str = "",
) -> RunReport:
    """Group records Overall, by complexity level, and by scene category.

    Records are sorted by sample_id first, so any input order yields an
    identical report.
    """
    ordered = sorted(records, key=lambda r: r.sample_id)
    for record in ordered:
        if record.sample_id not in graphs:
            raise ValueError(f"no graph for sample {record.sample_id!r}")

    by_level: dict[str, list[EvaluationRecord]] = {name: [] for name in LEVEL_GROUPS}
    by_category: dict[str, list[EvaluationRecord]] = {}
    for record in ordered:
        graph = graphs[record.sample_id]
        level = complexity_level(complexity(graph, gamma))
        by_level[level.value].append(record)
        if categories and record.sample_id in categories:
            by_category.setdefault(categories[record.sample_id], []).append(record)

    groups: dict[str, GroupStats] = {"Overall": _group_stats(ordered)}
    for name in LEVEL_GROUPS:
        groups[name] = _group_stats(by_level[name])
    for name in sorted(by_category):
        groups[name] = _group_stats(by_category[name])

    return RunReport(
        groups=groups, alpha=alpha, gamma=gamma, seed=seed, model_name=model_name
    )


def report_to_dict(report: RunReport) -> dict:
    """Report as a JSON-ready dict; scores become 2-decimal percentages."""
    return {
        "config": {
            "alpha": report.alpha,
            "gamma": report.gamma,
            "seed": report.seed,
            "model_name": report.model_name,
        },
        "groups": {
            name: {
                "n": stats.n,
                "mean_or": percent(stats.mean_or),
                "mean_rr": percent(stats.mean_rr),
                "mean_sg": percent(stats.mean_sg),
                "std_sg": percent(stats.std_sg),
            }
            for name, stats in report.groups.items()
        },
    }


def report_to_json(report: RunReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=False) + "\n"


def report_to_csv(report: RunReport) -> str:
    """CSV with one row per group: group, n, mean OR/RR/SG, SG std."""
    lines = ["group,n,mean_or,mean_rr,mean_sg,std_sg"]
    for name, stats in report.groups.items():
        cells = [
            name,
            str(stats.n),
            *(
                "" if value is None else f"{value:.2f}"
                for value in (
                    percent(stats.mean_or),
                    percent(stats.mean_rr),
                    percent(stats.mean_sg),
                    percent(stats.std_sg),
                )
            ),
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ConfusionMatrix:
    """4x4 counts of human choice (rows) against machine choice (columns)."""

    cells: tuple[tuple[int, int, int, int], ...]
    labels: tuple[str, str, str, str]

    def total(self) -> int:
        return sum(sum(row) for row in self.cells)


def machine_choice(candidate_records: Sequence[EvaluationRecord]) -> int:
    """Index of the highest-sgscore candidate; ties go to the lowest index."""
    if len(candidate_records) != 4:
        raise ValueError(f"expected exactly 4 candidates, got {len(candidate_records)}")
    best = 0
    for i in range(1, 4):
        if candidate_records[i].sgscore > candidate_records[best].sgscore:
            best = i
    return best


def confusion_matrix(
    responses: Iterable[tuple[int, int]],
    labels: tuple[str, str, str, str] = ("candidate-0", "candidate-1", "candidate-2", "candidate-3"),
) -> ConfusionMatrix:
    """Count (human choice, machine choice) pairs into a 4x4 matrix."""
    cells = [[0, 0, 0, 0] for _ in range(4)]
    for human, machine in responses:
        if not (0 <= human <= 3 and 0 <= machine <= 3):
            raise ValueError(f"choices must be in 0..3, got ({human}, {machine})")
        cells[human][machine] += 1
    frozen = tuple(tuple(row) for row in cells)
    return ConfusionMatrix(cells=frozen, labels=labels)
