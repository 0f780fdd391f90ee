"""Scene-graph factual-consistency toolkit.

Builds scene-graph datasets via multimodal-LLM annotation, scores generated
images with object/relation recall through a pluggable judge, runs the
scene-graph feedback refinement loop against a pluggable image generator,
and serves the four-to-one human study.
"""

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
    parse_object_spec,
    parse_scene_graph,
    scene_graph_to_json,
    serialize_triplets,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ComplexityLevel",
    "Edge",
    "ObjectId",
    "SceneGraph",
    "SceneGraphError",
    "SceneGraphParseError",
    "complexity",
    "complexity_level",
    "parse_object_spec",
    "parse_scene_graph",
    "scene_graph_to_json",
    "serialize_triplets",
]
