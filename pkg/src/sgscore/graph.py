"""Scene-graph data model: parsing, serialization, and complexity scoring."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

logger = logging.getLogger(__name__)


class SceneGraphError(ValueError):
    """Invalid scene-graph content (grammar, structure, or domain violation)."""


class SceneGraphParseError(SceneGraphError):
    """Scene-graph JSON that cannot be parsed or validated."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class ObjectId:
    """Instance-labeled object id of the form "<category>.<index>".

    The raw form splits at the LAST dot so multi-word categories such as
    "sports ball" survive intact.
    """

    raw: str
    category: str
    index: int

    @classmethod
    def parse(cls, raw: str) -> "ObjectId":
        text = raw.strip()
        head, sep, tail = text.rpartition(".")
        if not sep:
            raise SceneGraphError(f"object id {raw!r} has no '.<index>' suffix")
        category = head.strip()
        if not category:
            raise SceneGraphError(f"object id {raw!r} has an empty category")
        try:
            index = int(tail)
        except ValueError:
            raise SceneGraphError(f"object id {raw!r} has a non-integer index {tail!r}") from None
        if index <= 0:
            raise SceneGraphError(f"object id {raw!r} has a non-positive index")
        return cls(raw=f"{category}.{index}", category=category, index=index)

    def __str__(self) -> str:
        return self.raw


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box in (xmin, ymin, xmax, ymax) form."""

    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self) -> None:
        if min(self.xmin, self.ymin, self.xmax, self.ymax) < 0:
            raise SceneGraphError(f"bounding box {self.as_tuple()} has a negative coordinate")
        if self.xmin >= self.xmax or self.ymin >= self.ymax:
            raise SceneGraphError(f"bounding box {self.as_tuple()} is empty or inverted")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class Edge:
    """Directed, typed relation between two distinct object instances.

    The relation text is canonicalized (lowercased, trimmed) on construction.
    """

    source: ObjectId
    target: ObjectId
    relation: str

    def __post_init__(self) -> None:
        canon = self.relation.strip().lower()
        if not canon:
            raise SceneGraphError(
                f"edge {self.source.raw} -> {self.target.raw} has an empty relation"
            )
        object.__setattr__(self, "relation", canon)
        if self.source.raw == self.target.raw:
            raise SceneGraphError(f"self-loop edge on {self.source.raw}")

    def triple(self) -> tuple[str, str, str]:
        return (self.source.raw, self.relation, self.target.raw)


class ComplexityLevel(Enum):
    SIMPLE = "Simple"
    MEDIUM = "Medium"
    HARD = "Hard"


@dataclass(frozen=True)
class SceneGraph:
    """A scene as instance-labeled object nodes plus typed relation edges.

    Immutable after construction; ``objects`` preserves insertion order and
    must not be mutated by callers.
    """

    objects: Mapping[ObjectId, Optional[BoundingBox]]
    edges: tuple[Edge, ...] = ()
    image_ref: Optional[str] = None
    image_wh: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", dict(self.objects))
        object.__setattr__(self, "edges", tuple(self.edges))
        seen: set[tuple[str, str, str]] = set()
        for edge in self.edges:
            for endpoint in (edge.source, edge.target):
                if endpoint not in self.objects:
                    raise SceneGraphError(
                        f"edge endpoint {endpoint.raw!r} is not a declared object"
                    )
            if edge.triple() in seen:
                raise SceneGraphError(f"duplicate edge {edge.triple()}")
            seen.add(edge.triple())
        if self.image_wh is not None:
            object.__setattr__(self, "image_wh", (int(self.image_wh[0]), int(self.image_wh[1])))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return (
            list(self.objects.items()) == list(other.objects.items())
            and self.edges == other.edges
            and self.image_ref == other.image_ref
            and self.image_wh == other.image_wh
        )

    @property
    def node_count(self) -> int:
        return len(self.objects)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def category_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for oid in self.objects:
            counts[oid.category] = counts.get(oid.category, 0) + 1
        return counts

    def isolated_objects(self) -> list[ObjectId]:
        connected = {end for e in self.edges for end in (e.source, e.target)}
        return [oid for oid in self.objects if oid not in connected]

    def relations_between(self, subject_category: str, object_category: str) -> list[str]:
        """Relations of edges whose endpoint categories match, in edge order."""
        return [
            e.relation
            for e in self.edges
            if e.source.category == subject_category and e.target.category == object_category
        ]


def parse_scene_graph(
    json_text: str,
    declared_objects: Optional[Sequence[tuple[ObjectId, Optional[BoundingBox]]]] = None,
) -> SceneGraph:
    """Parse scene-graph JSON: a "relationships" array plus optional extras.

    The optional "objects" map, or an explicit ``declared_objects`` list,
    pins the object universe: edges referencing undeclared ids are dropped
    with a logged warning rather than failing the whole graph. Without
    either, objects mentioned in edges are materialized with no bounding
    box. Self-loops and exact duplicate triples are likewise dropped with
    warnings.
    """
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise SceneGraphParseError(
            f"malformed scene-graph JSON at offset {exc.pos}: {exc.msg}", offset=exc.pos
        ) from None
    if not isinstance(doc, dict):
        raise SceneGraphParseError("scene-graph JSON must be an object")
    rels = doc.get("relationships")
    if not isinstance(rels, list):
        raise SceneGraphParseError('scene-graph JSON needs a top-level "relationships" array')

    objects: dict[ObjectId, Optional[BoundingBox]] = {}
    constrained = False
    if declared_objects is not None:
        constrained = True
        for oid, box in declared_objects:
            if oid in objects:
                raise SceneGraphParseError(f"declared object {oid.raw!r} repeated")
            objects[oid] = box
    elif isinstance(doc.get("objects"), dict):
        constrained = True
        for raw_id, raw_box in doc["objects"].items():
            oid = ObjectId.parse(raw_id)
            if oid in objects:
                raise SceneGraphParseError(f"object {oid.raw!r} repeated in objects map")
            objects[oid] = _parse_box_value(raw_box, raw_id)

    edges: list[Edge] = []
    seen: set[tuple[str, str, str]] = set()
    for i, entry in enumerate(rels):
        if not isinstance(entry, dict):
            raise SceneGraphParseError(f"relationship {i} is not an object")
        fields = {}
        for name in ("source", "target", "relation"):
            value = entry.get(name)
            if not isinstance(value, str):
                raise SceneGraphParseError(f"relationship {i} is missing field {name!r}")
            fields[name] = value
        source = ObjectId.parse(fields["source"])
        target = ObjectId.parse(fields["target"])
        if source.raw == target.raw:
            logger.warning("dropping self-loop edge on %r (relationship %d)", source.raw, i)
            continue
        if not fields["relation"].strip():
            raise SceneGraphParseError(f"relationship {i} has an empty relation")
        edge = Edge(source=source, target=target, relation=fields["relation"])
        if constrained and (source not in objects or target not in objects):
            missing = source if source not in objects else target
            logger.warning(
                "dropping edge %s -> %s -> %s: %r is not a declared object",
                source.raw, edge.relation, target.raw, missing.raw,
            )
            continue
        if edge.triple() in seen:
            logger.warning("dropping duplicate edge %s", edge.triple())
            continue
        seen.add(edge.triple())
        if not constrained:
            objects.setdefault(source, None)
            objects.setdefault(target, None)
        edges.append(edge)

    image_ref = doc.get("image")
    if image_ref is not None and not isinstance(image_ref, str):
        raise SceneGraphParseError('"image" must be a string')
    image_wh = doc.get("image_wh")
    if image_wh is not None:
        if not (isinstance(image_wh, (list, tuple)) and len(image_wh) == 2):
            raise SceneGraphParseError('"image_wh" must be a [width, height] pair')
        image_wh = (int(image_wh[0]), int(image_wh[1]))
    return SceneGraph(objects=objects, edges=tuple(edges), image_ref=image_ref, image_wh=image_wh)


def _parse_box_value(value: object, raw_id: str) -> Optional[BoundingBox]:
    if value is None:
        return None
    if not (isinstance(value, (list, tuple)) and len(value) == 4):
        raise SceneGraphParseError(f"object {raw_id!r} box must be a 4-int array or null")
    return BoundingBox(*(int(v) for v in value))


def scene_graph_to_dict(g: SceneGraph) -> dict:
    """JSON-ready form of a graph; inverse of :func:`parse_scene_graph`."""
    doc: dict = {
        "relationships": [
            {"source": e.source.raw, "target": e.target.raw, "relation": e.relation}
            for e in g.edges
        ],
        "objects": {
            oid.raw: (list(box.as_tuple()) if box is not None else None)
            for oid, box in g.objects.items()
        },
    }
    if g.image_ref is not None:
        doc["image"] = g.image_ref
    if g.image_wh is not None:
        doc["image_wh"] = [g.image_wh[0], g.image_wh[1]]
    return doc


def scene_graph_to_json(g: SceneGraph) -> str:
    return json.dumps(scene_graph_to_dict(g), ensure_ascii=False)


def serialize_triplets(g: SceneGraph) -> str:
    """Comma-separated "{subject} {predicate} {object}" phrases in edge order.

    Instance indices are stripped; isolated objects are appended as bare
    category phrases, each category once.
    """
    phrases = [
        f"{e.source.category} {e.relation} {e.target.category}" for e in g.edges
    ]
    seen: set[str] = set()
    for oid in g.isolated_objects():
        if oid.category not in seen:
            seen.add(oid.category)
            phrases.append(oid.category)
    return ", ".join(phrases)


_OBJECT_SPEC_RE = re.compile(
    r"^\s*(?P<oid>.+?)\s*:\s*\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]\s*$"
)


def parse_object_spec(spec: str) -> tuple[ObjectId, BoundingBox]:
    """Parse "<id>:[xmin, ymin, xmax, ymax]" into its typed pair."""
    match = _OBJECT_SPEC_RE.match(spec)
    if match is None:
        raise SceneGraphError(f"object spec {spec!r} does not match '<id>:[x1, y1, x2, y2]'")
    oid = ObjectId.parse(match.group("oid"))
    box = BoundingBox(*(int(match.group(i)) for i in range(2, 6)))
    return oid, box


def format_object_spec(oid: ObjectId, box: BoundingBox) -> str:
    return f"{oid.raw}:[{box.xmin}, {box.ymin}, {box.xmax}, {box.ymax}]"


def complexity(g: SceneGraph, gamma: float) -> float:
    """Scene complexity: gamma * |V| + (1 - gamma) * |E|."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    return gamma * g.node_count + (1.0 - gamma) * g.edge_count


def complexity_level(c: float) -> ComplexityLevel:
    """Bucket a complexity value into Simple (<=3), Medium (4..7), Hard (>=8).

    Fractional values in the gaps round half-up to the nearest integer
    before bucketing; values below 1 count as Simple.
    """
    if c < 0:
        raise ValueError(f"complexity must be non-negative, got {c}")
    rounded = math.floor(c + 0.5)
    if rounded <= 3:
        return ComplexityLevel.SIMPLE
    if rounded <= 7:
        return ComplexityLevel.MEDIUM
    return ComplexityLevel.HARD


def load_dataset_jsonl(path: str | Path) -> list[tuple[str, SceneGraph]]:
    """Load a JSONL dataset, one scene graph per line.

    Sample ids come from each graph's "image" ref when present, else from
    the 1-based line number, so ids stay stable across reruns of the same
    file.
    """
    samples: list[tuple[str, SceneGraph]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                g = parse_scene_graph(line)
            except SceneGraphError as exc:
                raise SceneGraphParseError(f"{path}:{lineno}: {exc}") from exc
            sample_id = g.image_ref if g.image_ref else f"line-{lineno}"
            samples.append((sample_id, g))
    return samples


def write_dataset_jsonl(path: str | Path, graphs: Iterable[SceneGraph]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(scene_graph_to_json(g) + "\n")
            count += 1
    return count
