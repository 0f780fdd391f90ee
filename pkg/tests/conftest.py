"""Shared fixtures: the kicking/near scene and random graph generators."""

from __future__ import annotations

import random

import pytest

from sgscore.graph import BoundingBox, Edge, ObjectId, SceneGraph

RELATION_VOCAB = (
    "kicking",
    "throwing",
    "holding",
    "near",
    "on",
    "under",
    "behind",
    "chasing",
)


def oid(raw: str) -> ObjectId:
    return ObjectId.parse(raw)


def make_edge(source: str, relation: str, target: str) -> Edge:
    return Edge(source=oid(source), target=oid(target), relation=relation)


@pytest.fixture
def kicking_graph() -> SceneGraph:
    """A ball-kicking scene: two people, one ball, two relations."""
    return SceneGraph(
        objects={
            oid("sports ball.1"): BoundingBox(312, 360, 370, 417),
            oid("person.2"): BoundingBox(116, 49, 309, 491),
            oid("person.3"): BoundingBox(367, 108, 550, 477),
        },
        edges=(
            make_edge("person.2", "kicking", "sports ball.1"),
            make_edge("person.2", "near", "person.3"),
        ),
        image_ref="kick.png",
        image_wh=(640, 480),
    )


@pytest.fixture
def vocab() -> tuple[str, ...]:
    return RELATION_VOCAB


def random_graph(
    rng: random.Random,
    max_objects: int = 12,
    max_edges: int = 15,
    min_objects: int = 1,
) -> SceneGraph:
    """Random valid graph with one category per node and per ordered pair.

    Distinct node categories keep presence questions at count 1, and one
    edge per ordered category pair keeps relation questions unambiguous,
    so truthful judges score such graphs perfectly.
    """
    n = rng.randint(min_objects, max_objects)
    categories = rng.sample([f"thing{i:02d}" for i in range(40)], n)
    objects = {ObjectId.parse(f"{cat}.{i + 1}"): None for i, cat in enumerate(categories)}
    ids = list(objects)

    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    rng.shuffle(pairs)
    edge_count = rng.randint(0, min(max_edges, len(pairs)))
    edges = tuple(
        Edge(
            source=ids[a],
            target=ids[b],
            relation=rng.choice(RELATION_VOCAB),
        )
        for a, b in pairs[:edge_count]
    )
    return SceneGraph(objects=objects, edges=edges)


def degraded_world(rng: random.Random, g: SceneGraph, drop: int) -> SceneGraph:
    """Copy of g with `drop` random objects (and incident edges) removed."""
    removed = set(rng.sample(list(g.objects), drop))
    objects = {o: box for o, box in g.objects.items() if o not in removed}
    edges = tuple(
        e for e in g.edges if e.source not in removed and e.target not in removed
    )
    return SceneGraph(objects=objects, edges=edges, image_ref=g.image_ref, image_wh=g.image_wh)
