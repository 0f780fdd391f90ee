"""Dataset construction: annotation prompts, taxonomy, filtering, sampling.

Detection records become scene graphs by prompting a multimodal LLM,
validating its reply against the declared objects, classifying scene
diversity, merging relation synonyms, dropping rare relations, and
sampling a complexity-balanced subset.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

from sgscore.graph import (
    BoundingBox,
    ComplexityLevel,
    Edge,
    ObjectId,
    SceneGraph,
    SceneGraphError,
    complexity,
    complexity_level,
    format_object_spec,
    parse_scene_graph,
)
from sgscore.judge import JudgeBackend, JudgeImage

logger = logging.getLogger(__name__)

ANNOTATION_PROMPT_TEMPLATE = (
    "Given a set of detected objects in an image, each object is characterized by a "
    'name, a bounding box in "(xmin, ymin, xmax, ymax)" format. Please generate a '
    "scene graph to describe this image. The scene graph should describe relationships "
    'in the format "source -> relation -> target". Example Output:\n'
    '{"relationships": [{"source": "object_id1", "target": "object_id2", "relation":\n'
    '"relation_type"}, ... ]}\n'
    " Now, objects are {OBJECTS}. The original width and height of the provided image "
    "are {IMG_WH}. Please output the scene graph in JSON style without any comments."
)

DIVERSITY_PROMPT_TEMPLATE = (
    "Now, we have a list of image information like {IMAGE_INFO} , where each image "
    'information contains "xyxy" bounding boxes and "relationships" depicting the '
    'relation between the "source" object and the "target" object. Please classify '
    "the scene in **each image** using the following hierarchy:\n"
    "Level 1:\n"
    "- People-Centric,\n"
    "- Non-People Centric.\n"
    "Level 2:\n"
    "If People-Centric: [Choose one: Social Interaction, Individual Activities, "
    "Work/Occupation, Travel/Exploration, Sports & Recreation, "
    "Performance/Entertainment, Daily Life];\n"
    "If Non-People Centric: [Choose one: Nature, Urban/Built, Objects, "
    "Abstract/Artistic].\n"
    "Please provide the classification for each image in the list, and present your "
    "answer as a **JSON-formatted** list of dictionaries, where each dictionary "
    "corresponds to an image and contains the following keys: "
    '"image_id", "file_name", "level 1", "level 2".'
)

PEOPLE_CENTRIC = "People-Centric"
NON_PEOPLE_CENTRIC = "Non-People Centric"

LEVEL2_CATEGORIES: dict[str, tuple[str, ...]] = {
    PEOPLE_CENTRIC: (
        "Social Interaction",
        "Individual Activities",
        "Work/Occupation",
        "Travel/Exploration",
        "Sports & Recreation",
        "Performance/Entertainment",
        "Daily Life",
    ),
    NON_PEOPLE_CENTRIC: (
        "Nature",
        "Urban/Built",
        "Objects",
        "Abstract/Artistic",
    ),
}

DEFAULT_MIN_RELATION_FREQ = 100


class AnnotationError(ValueError):
    """Raised for invalid detection records or taxonomy violations."""


@dataclass(frozen=True)
class DetectionRecord:
    """Detected objects of one image, with the image dimensions."""

    image_ref: str
    image_wh: tuple[int, int]
    objects: tuple[tuple[ObjectId, BoundingBox], ...]

    def __post_init__(self) -> None:
        w, h = self.image_wh
        if w < 1 or h < 1:
            raise AnnotationError(f"image_wh must be positive, got {self.image_wh}")
        seen: set[ObjectId] = set()
        for oid, box in self.objects:
            if oid in seen:
                raise AnnotationError(f"duplicate object id {oid.raw!r}")
            seen.add(oid)
            if box.xmax > w or box.ymax > h:
                raise AnnotationError(
                    f"box {box.as_tuple()} of {oid.raw!r} exceeds image size {self.image_wh}"
                )

    def object_map(self) -> dict[ObjectId, BoundingBox]:
        return dict(self.objects)


def build_annotation_prompt(rec: DetectionRecord) -> str:
    """Fill the annotation template with the record's object specs.

    Substitution mirrors plain string replacement of the bare OBJECTS
    and IMG_WH tokens, so the template's surrounding braces remain in
    the output.
    """
    if not rec.objects:
        raise AnnotationError("cannot annotate a record with zero objects")
    specs = [format_object_spec(oid, box) for oid, box in rec.objects]
    return ANNOTATION_PROMPT_TEMPLATE.replace("OBJECTS", str(specs)).replace(
        "IMG_WH", str(tuple(rec.image_wh))
    )


def validate_annotation(
    g: SceneGraph, rec: DetectionRecord
) -> tuple[SceneGraph, list[str]]:
    """Constrain a parsed reply to the record's declared objects.

    Edges naming unknown objects are dropped with a warning; surviving
    objects carry the record's boxes.  A cleaned graph with zero edges
    gets an "empty-annotation" warning so the caller can retry or skip.
    """
    declared = rec.object_map()
    warnings: list[str] = []
    kept: list[Edge] = []
    for edge in g.edges:
        if edge.source not in declared or edge.target not in declared:
            warnings.append(
                f"dropped edge {edge.triple()}: undeclared object"
            )
            continue
        kept.append(edge)
    if not kept:
        warnings.append("empty-annotation")
    cleaned = SceneGraph(
        objects=declared,
        edges=tuple(kept),
        image_ref=rec.image_ref,
        image_wh=rec.image_wh,
    )
    return cleaned, warnings


def annotate_image(
    backend: JudgeBackend,
    rec: DetectionRecord,
    image: Union[bytes, JudgeImage],
) -> tuple[Optional[SceneGraph], list[str]]:
    """Ask the backend for a scene graph of one image and clean the reply.

    Unparseable replies are retried once with the same prompt; a second
    failure skips the image and returns (None, warnings).
    """
    if isinstance(image, bytes):
        image = JudgeImage.from_bytes(image)
    prompt = build_annotation_prompt(rec)
    declared = rec.object_map()
    warnings: list[str] = []
    graph: Optional[SceneGraph] = None
    for attempt in range(2):
        reply = backend.answer(image, prompt, None)
        try:
            graph = parse_scene_graph(reply, declared_objects=list(declared.items()))
            break
        except SceneGraphError as exc:
            warnings.append(f"attempt {attempt + 1}: unparseable reply: {exc}")
    if graph is None:
        logger.warning("skipping %s: %s", rec.image_ref, "; ".join(warnings))
        return None, warnings
    cleaned, more = validate_annotation(graph, rec)
    warnings.extend(more)
    return cleaned, warnings


@dataclass(frozen=True)
class DiversityLabel:
    """Two-level scene category from the fixed taxonomy."""

    level1: str
    level2: str

    def __post_init__(self) -> None:
        if self.level1 not in LEVEL2_CATEGORIES:
            raise AnnotationError(f"unknown level 1 category {self.level1!r}")
        if self.level2 not in LEVEL2_CATEGORIES[self.level1]:
            raise AnnotationError(
                f"{self.level2!r} is not a valid level 2 category under {self.level1!r}"
            )


def _image_info(graphs: Sequence[SceneGraph]) -> str:
    entries = []
    for i, g in enumerate(graphs):
        entries.append(
            {
                "image_id": i,
                "file_name": g.image_ref or f"image-{i}",
                "objects": {
                    oid.raw: list(box.as_tuple()) if box is not None else None
                    for oid, box in g.objects.items()
                },
                "relationships": [
                    {"source": e.source.raw, "target": e.target.raw, "relation": e.relation}
                    for e in g.edges
                ],
            }
        )
    return json.dumps(entries)


def build_diversity_prompt(batch: Sequence[SceneGraph]) -> str:
    """Fill the scene-classification template with the batch's graphs."""
    if not batch:
        raise AnnotationError("diversity batch must be non-empty")
    return DIVERSITY_PROMPT_TEMPLATE.replace("IMAGE_INFO", _image_info(batch))


def parse_diversity_labels(reply: str) -> tuple[list[dict], list[str]]:
    """Parse a classification reply into labelled entries.

    Returns (entries, warnings); entries carry image_id, file_name and a
    DiversityLabel.  Entries with invalid taxonomy pairs or missing keys
    are rejected with a warning, not raised.
    """
    try:
        doc = json.loads(reply)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"classification reply is not JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise AnnotationError("classification reply must be a JSON list")
    entries: list[dict] = []
    warnings: list[str] = []
    for i, item in enumerate(doc):
        if not isinstance(item, dict):
            warnings.append(f"entry {i}: not an object")
            continue
        try:
            label = DiversityLabel(
                level1=str(item["level 1"]).strip(),
                level2=str(item["level 2"]).strip(),
            )
        except KeyError as exc:
            warnings.append(f"entry {i}: missing key {exc}")
            continue
        except AnnotationError as exc:
            warnings.append(f"entry {i}: {exc}")
            continue
        entries.append(
            {
                "image_id": item.get("image_id", i),
                "file_name": item.get("file_name", ""),
                "label": label,
            }
        )
    return entries, warnings


@dataclass(frozen=True)
class VocabStats:
    """Relation and object-category frequencies over a dataset."""

    relation_counts: Mapping[str, int]
    category_counts: Mapping[str, int]


def compute_vocab_stats(dataset: Iterable[SceneGraph]) -> VocabStats:
    relations: dict[str, int] = {}
    categories: dict[str, int] = {}
    for g in dataset:
        for edge in g.edges:
            relations[edge.relation] = relations.get(edge.relation, 0) + 1
        for oid in g.objects:
            categories[oid.category] = categories.get(oid.category, 0) + 1
    return VocabStats(relation_counts=relations, category_counts=categories)


def vocab_stats_to_dict(stats: VocabStats) -> dict:
    return {
        "relations": dict(sorted(stats.relation_counts.items())),
        "categories": dict(sorted(stats.category_counts.items())),
    }


def resolve_synonyms(synonyms: Mapping[str, str]) -> dict[str, str]:
    """Flatten a variant->canonical map, following chains; cycles raise."""
    resolved: dict[str, str] = {}
    for start in synonyms:
        seen = [start]
        current = start
        while current in synonyms:
            current = synonyms[current].strip().lower()
            if current in seen:
                raise AnnotationError(
                    f"synonym cycle: {' -> '.join(seen + [current])}"
                )
            seen.append(current)
        resolved[start.strip().lower()] = current
    return resolved


def filter_relations(
    dataset: Sequence[SceneGraph],
    stats: Optional[VocabStats] = None,
    min_freq: int = DEFAULT_MIN_RELATION_FREQ,
    synonyms: Optional[Mapping[str, str]] = None,
) -> list[SceneGraph]:
    """Merge synonym relations, then drop relations rarer than min_freq.

    Objects are always retained, even when all their edges vanish.
    Synonym merging can collide two edges onto the same triple; the
    duplicate is dropped.
    """
    mapping = resolve_synonyms(synonyms) if synonyms else {}

    def canon(relation: str) -> str:
        return mapping.get(relation, relation)

    merged_counts: dict[str, int] = {}
    for g in dataset:
        for edge in g.edges:
            name = canon(edge.relation)
            merged_counts[name] = merged_counts.get(name, 0) + 1

    result: list[SceneGraph] = []
    for g in dataset:
        kept: list[Edge] = []
        seen: set[tuple[str, str, str]] = set()
        for edge in g.edges:
            name = canon(edge.relation)
            if merged_counts[name] < min_freq:
                continue
            renamed = Edge(source=edge.source, target=edge.target, relation=name)
            if renamed.triple() in seen:
                continue
            seen.add(renamed.triple())
            kept.append(renamed)
        result.append(
            SceneGraph(
                objects=g.objects,
                edges=tuple(kept),
                image_ref=g.image_ref,
                image_wh=g.image_wh,
            )
        )
    return result


def balanced_sample(
    dataset: Sequence[SceneGraph],
    gamma: float,
    quotas: Mapping[ComplexityLevel, int],
    seed: int,
) -> list[SceneGraph]:
    """Sample per-level quotas uniformly without replacement.

    Output lists levels in Simple, Medium, Hard order; within a level
    the seeded draw order is kept.
    """
    buckets: dict[ComplexityLevel, list[SceneGraph]] = {
        level: [] for level in ComplexityLevel
    }
    for g in dataset:
        buckets[complexity_level(complexity(g, gamma))].append(g)

    rng = random.Random(seed)
    picked: list[SceneGraph] = []
    for level in (ComplexityLevel.SIMPLE, ComplexityLevel.MEDIUM, ComplexityLevel.HARD):
        if level not in quotas:
            continue
        quota = quotas[level]
        population = buckets[level]
        if quota > len(population):
            raise AnnotationError(
                f"{level.value}: quota {quota} exceeds population {len(population)} "
                f"(short by {quota - len(population)})"
            )
        picked.extend(rng.sample(population, quota))
    return picked


def load_coco_detections(doc: Mapping) -> list[DetectionRecord]:
    """Convert COCO-style detection JSON into per-image records.

    Boxes arrive as [x, y, w, h]; they are rounded to integers and
    clamped to the image bounds.  Degenerate boxes are dropped with a
    warning.  Instance indices are assigned per image in annotation-id
    order, starting at 1.
    """
    categories = {c["id"]: str(c["name"]) for c in doc.get("categories", [])}
    images = {
        img["id"]: (str(img["file_name"]), int(img["width"]), int(img["height"]))
        for img in doc.get("images", [])
    }
    per_image: dict[int, list[Mapping]] = {}
    for ann in doc.get("annotations", []):
        per_image.setdefault(ann["image_id"], []).append(ann)

    records: list[DetectionRecord] = []
    for image_id, (file_name, width, height) in images.items():
        annotations = sorted(per_image.get(image_id, []), key=lambda a: a.get("id", 0))
        objects: list[tuple[ObjectId, BoundingBox]] = []
        index = 0
        for ann in annotations:
            category = categories.get(ann["category_id"])
            if category is None:
                logger.warning(
                    "%s: unknown category id %r", file_name, ann["category_id"]
                )
                continue
            x, y, w, h = ann["bbox"]
            xmin = max(0, int(round(x)))
            ymin = max(0, int(round(y)))
            xmax = min(width, int(round(x + w)))
            ymax = min(height, int(round(y + h)))
            if xmax <= xmin or ymax <= ymin:
                logger.warning("%s: degenerate box %r dropped", file_name, ann["bbox"])
                continue
            index += 1
            objects.append(
                (
                    ObjectId(raw=f"{category}.{index}", category=category, index=index),
                    BoundingBox(xmin, ymin, xmax, ymax),
                )
            )
        if objects:
            records.append(
                DetectionRecord(
                    image_ref=file_name, image_wh=(width, height), objects=tuple(objects)
                )
            )
    return records
