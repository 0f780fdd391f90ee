"""Iterative image refinement driven by missing scene-graph facts.

One round: generate an image from the composed scene prompt, judge it,
collect the facts the judge could not verify into a missing graph,
render a reference image of just those facts, and regenerate with the
previous image and the reference attached as weighted streams.  The
loop stops when the missing graph is empty or the budget runs out.
"""

from __future__ import annotations

import base64
import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence, Union

import requests

from sgscore.graph import Edge, ObjectId, SceneGraph, serialize_triplets
from sgscore.judge import AnswerCache, JudgeBackend
from sgscore.metrics import EvaluationRecord, evaluate_sample

logger = logging.getLogger(__name__)

COMPOSE_INSTRUCTION = (
    "Rewrite these facts as one coherent photographic scene description, "
    "preserving every object and relationship: "
)
FALLBACK_TEMPLATE = "A realistic photo of {facts}."

MISSING_OBJECT = "missing_object"
ENDPOINT_OF_FAILED_EDGE = "endpoint_of_failed_edge"
FAILED_RELATION = "failed_relation"
INCIDENT_TO_MISSING_OBJECT = "incident_to_missing_object"

_BACKOFF_BASE = 0.25


class GenerationError(RuntimeError):
    """The generation backend stayed unreachable or kept failing."""


class PromptComposer(Protocol):
    """Text-only backend that rewrites fact lists into scene prose."""

    def complete(self, prompt: str) -> str:
        ...


def compose_scene_prompt(g: SceneGraph, composer: Optional[PromptComposer] = None) -> str:
    """Turn a graph into a generation prompt.

    With a composer backend the triplet serialization is sent inside a
    fixed rewrite instruction; without one (or when the composer fails)
    a deterministic template is used.
    """
    facts = serialize_triplets(g)
    if composer is not None:
        try:
            return composer.complete(COMPOSE_INSTRUCTION + facts)
        except Exception as exc:
            logger.warning("prompt composer failed, using template: %s", exc)
    return FALLBACK_TEMPLATE.format(facts=facts)


@dataclass(frozen=True)
class MissingGraph:
    """Facts the judge failed to confirm, plus why each one is included."""

    graph: SceneGraph
    node_provenance: Mapping[ObjectId, str]
    edge_provenance: Mapping[tuple[str, str, str], str]

    def is_empty(self) -> bool:
        return self.graph.node_count == 0 and self.graph.edge_count == 0


def build_missing_graph(gt: SceneGraph, record: EvaluationRecord) -> MissingGraph:
    """Collect unverified facts from a record into a subgraph of gt.

    Edges are the incorrectly judged ones plus every gt edge touching a
    missing object; nodes are the missing objects plus the endpoints of
    every included edge, so no edge ends at an absent node.
    """
    for oid in record.object_verdicts:
        if oid not in gt.objects:
            raise ValueError(f"verdict object {oid.raw!r} not in the graph")
    for oid in gt.objects:
        if oid not in record.object_verdicts:
            raise ValueError(f"no verdict for object {oid.raw!r}")
    gt_triples = {e.triple() for e in gt.edges}
    for v in record.relation_verdicts:
        if v.edge.triple() not in gt_triples:
            raise ValueError(f"verdict edge {v.edge.triple()} not in the graph")
    if len(record.relation_verdicts) != gt.edge_count:
        raise ValueError(
            f"expected {gt.edge_count} relation verdicts, "
            f"got {len(record.relation_verdicts)}"
        )

    missing_objects = {
        oid for oid, present in record.object_verdicts.items() if not present
    }
    failed_edges = [v.edge for v in record.relation_verdicts if not v.correct]
    failed_triples = {e.triple() for e in failed_edges}

    edge_provenance: dict[tuple[str, str, str], str] = {}
    edges: list[Edge] = []
    for edge in gt.edges:
        triple = edge.triple()
        if triple in failed_triples:
            edges.append(edge)
            edge_provenance[triple] = FAILED_RELATION
        elif edge.source in missing_objects or edge.target in missing_objects:
            edges.append(edge)
            edge_provenance[triple] = INCIDENT_TO_MISSING_OBJECT

    node_provenance: dict[ObjectId, str] = {}
    for oid in gt.objects:
        if oid in missing_objects:
            node_provenance[oid] = MISSING_OBJECT
    for edge in edges:
        for oid in (edge.source, edge.target):
            if oid not in node_provenance:
                node_provenance[oid] = ENDPOINT_OF_FAILED_EDGE

    objects = {
        oid: gt.objects[oid] for oid in gt.objects if oid in node_provenance
    }
    graph = SceneGraph(
        objects=objects, edges=tuple(edges), image_ref=None, image_wh=gt.image_wh
    )
    return MissingGraph(
        graph=graph, node_provenance=node_provenance, edge_provenance=edge_provenance
    )


@dataclass(frozen=True)
class GenerationRequest:
    """One generation call: prompt, optional weighted reference images."""

    prompt: str
    references: tuple[tuple[bytes, float], ...] = ()
    seed: int = 0
    size: tuple[int, int] = (512, 512)

    def __post_init__(self) -> None:
        if len(self.references) > 2:
            raise ValueError(f"at most 2 references allowed, got {len(self.references)}")
        for _, weight in self.references:
            if weight < 0:
                raise ValueError(f"reference weight must be >= 0, got {weight}")
        w, h = self.size
        if w < 1 or h < 1:
            raise ValueError(f"size must be positive, got {self.size}")


class GenerationBackend(Protocol):
    """Anything that can turn a GenerationRequest into image bytes."""

    def generate(self, request: GenerationRequest) -> bytes:
        ...


class HttpGenerationBackend:
    """Client for the JSON generation endpoint at {base_url}/generate."""

    def __init__(self, base_url: str, timeout: float = 300.0, max_retries: int = 3):
        if timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {timeout}")
        if max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {max_retries}")
        self.base_url = base_url
        self.timeout = timeout
        self.max_retries = max_retries

    def generate(self, request: GenerationRequest) -> bytes:
        payload = {
            "prompt": request.prompt,
            "seed": request.seed,
            "width": request.size[0],
            "height": request.size[1],
            "references": [
                {
                    "image_b64": base64.b64encode(image).decode("ascii"),
                    "weight": weight,
                }
                for image, weight in request.references
            ],
        }
        url = self.base_url.rstrip("/") + "/generate"
        last_error: Optional[str] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(_BACKOFF_BASE * 2 ** (attempt - 1))
            try:
                response = requests.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = str(exc)
                logger.warning("generation failed (attempt %d): %s", attempt + 1, exc)
                continue
            if response.status_code != 200:
                last_error = f"HTTP {response.status_code}: {response.text[:200]}"
                logger.warning(
                    "generation failed (attempt %d): %s", attempt + 1, last_error
                )
                continue
            try:
                return base64.b64decode(response.json()["image_b64"])
            except (ValueError, KeyError, TypeError) as exc:
                last_error = f"malformed response body: {exc}"
                logger.warning(
                    "generation failed (attempt %d): %s", attempt + 1, last_error
                )
                continue
        raise GenerationError(
            f"generation backend at {url} failed after {self.max_retries + 1} "
            f"attempts: {last_error}"
        )


@dataclass(frozen=True)
class FeedbackIteration:
    """One generated image with its evaluation and missing graph."""

    image: bytes
    record: EvaluationRecord
    missing: MissingGraph


@dataclass
class FeedbackResult:
    """Outcome of a refinement run; failed runs keep partial iterations."""

    iterations: list[FeedbackIteration] = field(default_factory=list)
    final_image: Optional[bytes] = None
    converged: bool = False
    failed: bool = False
    error: Optional[str] = None

    @property
    def final_record(self) -> Optional[EvaluationRecord]:
        best = _best_iteration(self.iterations)
        return best.record if best is not None else None


def _best_iteration(
    iterations: Sequence[FeedbackIteration],
) -> Optional[FeedbackIteration]:
    best: Optional[FeedbackIteration] = None
    for iteration in iterations:
        if best is None or iteration.record.sgscore >= best.record.sgscore:
            best = iteration
    return best


def run_feedback(
    gt: SceneGraph,
    gen: GenerationBackend,
    judge_backend: JudgeBackend,
    *,
    alpha: float = 0.5,
    lambda0: float = 0.5,
    lambda1: float = 0.5,
    max_iterations: int = 1,
    seed: int = 0,
    vocab: Sequence[str] = (),
    composer: Optional[PromptComposer] = None,
    sample_id: Optional[str] = None,
    cache: Optional[AnswerCache] = None,
    size: tuple[int, int] = (512, 512),
) -> FeedbackResult:
    """Generate, judge, and refine until consistent or out of budget.

    The composed prompt is fixed up front and reused for every
    regeneration; refinement round k adds the previous image (weight
    lambda0) and a fresh missing-facts reference (weight lambda1).  The
    final image is the best-scoring one seen, latest on ties.  At most
    1 + 2*max_iterations generation calls are made.
    """
    if max_iterations < 0:
        raise ValueError(f"max_iterations must be >= 0, got {max_iterations}")
    if sample_id is None:
        sample_id = gt.image_ref or "sample"

    result = FeedbackResult()
    prompt = compose_scene_prompt(gt, composer)
    call_index = 0

    def generate(request_prompt: str, references: tuple[tuple[bytes, float], ...]) -> bytes:
        nonlocal call_index
        request = GenerationRequest(
            prompt=request_prompt, references=references, seed=seed + call_index, size=size
        )
        call_index += 1
        return gen.generate(request)

    def evaluate(image: bytes) -> FeedbackIteration:
        record = evaluate_sample(
            gt,
            image,
            judge_backend,
            alpha=alpha,
            seed=seed,
            vocab=vocab,
            sample_id=sample_id,
            cache=cache,
        )
        return FeedbackIteration(
            image=image, record=record, missing=build_missing_graph(gt, record)
        )

    try:
        current = evaluate(generate(prompt, ()))
    except GenerationError as exc:
        result.failed = True
        result.error = str(exc)
        return result
    result.iterations.append(current)

    rounds = 0
    while not current.missing.is_empty() and rounds < max_iterations:
        reference_prompt = compose_scene_prompt(current.missing.graph, composer)
        try:
            reference = generate(reference_prompt, ())
            merged = generate(
                prompt, ((current.image, lambda0), (reference, lambda1))
            )
            current = evaluate(merged)
        except GenerationError as exc:
            result.failed = True
            result.error = str(exc)
            break
        result.iterations.append(current)
        rounds += 1

    best = _best_iteration(result.iterations)
    result.final_image = best.image if best is not None else None
    result.converged = bool(result.iterations) and result.iterations[-1].missing.is_empty()
    return result
