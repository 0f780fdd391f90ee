"""Scene-graph parsing, serialization, and complexity bucketing."""

from __future__ import annotations

import json
import logging

import pytest

from sgscore.graph import (
    BoundingBox,
    ComplexityLevel,
    Edge,
    ObjectId,
    SceneGraph,
    SceneGraphError,
    SceneGraphParseError,
    complexity,
    complexity_level,
    format_object_spec,
    load_dataset_jsonl,
    parse_object_spec,
    parse_scene_graph,
    scene_graph_to_json,
    serialize_triplets,
    write_dataset_jsonl,
)

from conftest import make_edge, oid

EXAMPLE_DOC = json.dumps(
    {
        "relationships": [
            {"source": "person.2", "target": "sports ball.1", "relation": "kicking"},
            {"source": "person.2", "target": "person.3", "relation": "near"},
        ]
    }
)


def test_object_id_splits_at_last_dot():
    parsed = ObjectId.parse("sports ball.1")
    assert parsed.category == "sports ball"
    assert parsed.index == 1
    assert parsed.raw == "sports ball.1"


def test_object_id_strips_whitespace():
    assert ObjectId.parse("  person.2 ").raw == "person.2"


@pytest.mark.parametrize("bad", ["person", ".3", "person.x", "person.0", "person.-1"])
def test_object_id_rejects_bad_ids(bad):
    with pytest.raises(SceneGraphError):
        ObjectId.parse(bad)


def test_bounding_box_validation():
    assert BoundingBox(1, 2, 3, 4).as_tuple() == (1, 2, 3, 4)
    with pytest.raises(SceneGraphError):
        BoundingBox(-1, 0, 5, 5)
    with pytest.raises(SceneGraphError):
        BoundingBox(5, 0, 5, 5)
    with pytest.raises(SceneGraphError):
        BoundingBox(0, 6, 5, 5)


def test_edge_canonicalizes_relation():
    edge = make_edge("person.2", " Near ", "person.3")
    assert edge.relation == "near"


def test_edge_rejects_self_loop_and_empty_relation():
    with pytest.raises(SceneGraphError):
        make_edge("person.2", "near", "person.2")
    with pytest.raises(SceneGraphError):
        make_edge("person.2", "   ", "person.3")


def test_scene_graph_rejects_undeclared_endpoint():
    with pytest.raises(SceneGraphError):
        SceneGraph(
            objects={oid("person.2"): None},
            edges=(make_edge("person.2", "near", "person.3"),),
        )


def test_scene_graph_rejects_duplicate_edges():
    objects = {oid("person.2"): None, oid("person.3"): None}
    edge = make_edge("person.2", "near", "person.3")
    with pytest.raises(SceneGraphError):
        SceneGraph(objects=objects, edges=(edge, edge))


def test_parse_example_graph():
    g = parse_scene_graph(EXAMPLE_DOC)
    assert g.node_count == 3
    assert g.edge_count == 2
    assert g.category_counts() == {"person": 2, "sports ball": 1}
    assert g.edges[0].triple() == ("person.2", "kicking", "sports ball.1")


def test_parse_round_trip(kicking_graph):
    text = scene_graph_to_json(kicking_graph)
    again = parse_scene_graph(text)
    assert again == kicking_graph
    assert parse_scene_graph(scene_graph_to_json(again)) == again


def test_parse_example_round_trip_preserves_graph():
    g = parse_scene_graph(EXAMPLE_DOC)
    assert parse_scene_graph(scene_graph_to_json(g)) == g


def test_parse_rejects_malformed_json():
    with pytest.raises(SceneGraphParseError) as err:
        parse_scene_graph("{not json")
    assert err.value.offset is not None


def test_parse_requires_relationships():
    with pytest.raises(SceneGraphParseError):
        parse_scene_graph('{"objects": {}}')


def test_parse_drops_self_loops_with_warning(caplog):
    doc = json.dumps(
        {
            "relationships": [
                {"source": "person.1", "target": "person.1", "relation": "near"},
                {"source": "person.1", "target": "dog.2", "relation": "near"},
            ]
        }
    )
    with caplog.at_level(logging.WARNING, logger="sgscore.graph"):
        g = parse_scene_graph(doc)
    assert g.edge_count == 1
    assert any("self-loop" in r.message for r in caplog.records)


def test_parse_drops_undeclared_edges_when_constrained(caplog):
    doc = json.dumps(
        {
            "objects": {"person.1": None, "dog.2": [0, 0, 10, 10]},
            "relationships": [
                {"source": "person.1", "target": "dog.2", "relation": "holding"},
                {"source": "person.1", "target": "cat.9", "relation": "near"},
            ],
        }
    )
    with caplog.at_level(logging.WARNING, logger="sgscore.graph"):
        g = parse_scene_graph(doc)
    assert g.edge_count == 1
    assert g.objects[oid("dog.2")] == BoundingBox(0, 0, 10, 10)
    assert any("cat.9" in r.message for r in caplog.records)


def test_parse_drops_duplicate_triples(caplog):
    doc = json.dumps(
        {
            "relationships": [
                {"source": "a.1", "target": "b.2", "relation": "near"},
                {"source": "a.1", "target": "b.2", "relation": "Near"},
            ]
        }
    )
    with caplog.at_level(logging.WARNING, logger="sgscore.graph"):
        g = parse_scene_graph(doc)
    assert g.edge_count == 1


def test_parse_missing_field_names_index():
    doc = json.dumps({"relationships": [{"source": "a.1", "target": "b.2"}]})
    with pytest.raises(SceneGraphParseError) as err:
        parse_scene_graph(doc)
    assert "relationship 0" in str(err.value)
    assert "relation" in str(err.value)


def test_serialize_triplets(kicking_graph):
    assert (
        serialize_triplets(kicking_graph)
        == "person kicking sports ball, person near person"
    )


def test_serialize_triplets_isolated_objects():
    g = SceneGraph(
        objects={oid("person.1"): None, oid("dog.2"): None, oid("dog.3"): None},
        edges=(),
    )
    assert serialize_triplets(g) == "person, dog"


def test_object_spec_round_trip():
    spec = "sports ball.1:[312, 360, 370, 417]"
    parsed_oid, box = parse_object_spec(spec)
    assert parsed_oid.raw == "sports ball.1"
    assert box.as_tuple() == (312, 360, 370, 417)
    assert format_object_spec(parsed_oid, box) == spec


def test_object_spec_rejects_garbage():
    with pytest.raises(SceneGraphError):
        parse_object_spec("person.2 312 360")


def test_complexity_defaults_to_edge_count(kicking_graph):
    assert complexity(kicking_graph, 0.0) == 2.0
    assert complexity(kicking_graph, 1.0) == 3.0
    assert complexity(kicking_graph, 0.5) == 2.5
    with pytest.raises(ValueError):
        complexity(kicking_graph, 1.5)


@pytest.mark.parametrize(
    "value,expected",
    [
        (0.0, ComplexityLevel.SIMPLE),
        (1.0, ComplexityLevel.SIMPLE),
        (3.0, ComplexityLevel.SIMPLE),
        (3.4, ComplexityLevel.SIMPLE),
        (3.5, ComplexityLevel.MEDIUM),
        (4.0, ComplexityLevel.MEDIUM),
        (7.0, ComplexityLevel.MEDIUM),
        (7.5, ComplexityLevel.HARD),
        (8.0, ComplexityLevel.HARD),
        (30.0, ComplexityLevel.HARD),
    ],
)
def test_complexity_level_buckets(value, expected):
    assert complexity_level(value) is expected


def test_complexity_level_rejects_negative():
    with pytest.raises(ValueError):
        complexity_level(-0.1)


def test_dataset_jsonl_round_trip(tmp_path, kicking_graph):
    other = SceneGraph(objects={oid("tree.1"): None}, edges=(), image_ref="tree.png")
    path = tmp_path / "data.jsonl"
    assert write_dataset_jsonl(path, [kicking_graph, other]) == 2
    loaded = load_dataset_jsonl(path)
    assert [sid for sid, _ in loaded] == ["kick.png", "tree.png"]
    assert loaded[0][1] == kicking_graph
    assert loaded[1][1] == other


def test_dataset_jsonl_line_fallback_ids(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text(
        '{"relationships": [{"source": "a.1", "target": "b.2", "relation": "near"}]}\n',
        encoding="utf-8",
    )
    loaded = load_dataset_jsonl(path)
    assert loaded[0][0] == "line-1"


def test_dataset_jsonl_reports_bad_line(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text("not json\n", encoding="utf-8")
    with pytest.raises(SceneGraphParseError) as err:
        load_dataset_jsonl(path)
    assert ":1:" in str(err.value)
