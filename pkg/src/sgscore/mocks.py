"""Deterministic test doubles for the generation and judge backends.

The simulation harness treats an "image" as a canonical JSON fact set:
{"objects": [category, ...], "edges": [[source, relation, target], ...]}.
The mock renderer draws the first N facts of a prompt and unions in the
facts of every weighted reference image, so refinement only ever adds
facts; the fact judges answer questions by looking the facts up.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional, Sequence, Union

from sgscore.feedback import COMPOSE_INSTRUCTION, GenerationRequest
from sgscore.judge import (
    CHOICE_LABELS,
    JudgeImage,
    PresenceQuestion,
    Question,
    RelationQuestion,
)

ObjectFact = tuple[str, str]
EdgeFact = tuple[str, str, str, str]
Fact = Union[ObjectFact, EdgeFact]

_PHOTO_PREFIX = "A realistic photo of "


def parse_prompt_facts(prompt: str, vocab: Sequence[str]) -> list[Fact]:
    """Recover ordered facts from a scene prompt.

    Handles the photo template, the composer instruction (as echoed by
    a pass-through composer), and bare triplet lists.  Relation phrases
    are split on the first vocabulary relation found as an infix.
    """
    text = prompt.strip()
    if text.startswith(COMPOSE_INSTRUCTION):
        text = text[len(COMPOSE_INSTRUCTION):]
    if text.startswith(_PHOTO_PREFIX):
        text = text[len(_PHOTO_PREFIX):]
    text = text.rstrip(".")
    facts: list[Fact] = []
    relations = sorted((r for r in vocab if r), key=len, reverse=True)
    for phrase in text.split(", "):
        phrase = phrase.strip()
        if not phrase:
            continue
        for relation in relations:
            infix = f" {relation} "
            if infix in phrase:
                source, target = phrase.split(infix, 1)
                facts.append(("edge", source, relation, target))
                break
        else:
            facts.append(("obj", phrase))
    return facts


def facts_to_image(facts: Sequence[Fact]) -> bytes:
    """Serialize facts as canonical JSON bytes (sorted, so digest-stable)."""
    objects = {f[1] for f in facts if f[0] == "obj"}
    edges = {(f[1], f[2], f[3]) for f in facts if f[0] == "edge"}
    for source, _, target in edges:
        objects.add(source)
        objects.add(target)
    doc = {
        "objects": sorted(objects),
        "edges": sorted(list(edge) for edge in edges),
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def image_to_facts(data: bytes) -> set[Fact]:
    doc = json.loads(data.decode("utf-8"))
    facts: set[Fact] = {("obj", category) for category in doc.get("objects", [])}
    for source, relation, target in doc.get("edges", []):
        facts.add(("edge", source, relation, target))
    return facts


class MockSceneRenderer:
    """Generation backend that renders fact sets instead of pixels.

    Only the first `capacity` prompt facts make it into the image, which
    models a generator that drops facts from long prompts.  Facts from
    every reference image with positive weight are added on top.
    """

    def __init__(self, vocab: Sequence[str], capacity: int = 10_000):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.vocab = tuple(vocab)
        self.capacity = capacity
        self.calls = 0

    def generate(self, request: GenerationRequest) -> bytes:
        self.calls += 1
        facts = set(parse_prompt_facts(request.prompt, self.vocab)[: self.capacity])
        for image, weight in request.references:
            if weight > 0:
                facts |= image_to_facts(image)
        return facts_to_image(sorted(facts))


class FactSetJudge:
    """Judge backend that reads answers straight out of a fact image."""

    def __init__(self, model_name: str = "fact-judge"):
        self.model_name = model_name
        self.calls = 0

    def answer(self, image: JudgeImage, prompt_text: str, question: Question) -> str:
        self.calls += 1
        doc = json.loads(image.data.decode("utf-8"))
        objects: list[str] = list(doc.get("objects", []))
        edges = [tuple(edge) for edge in doc.get("edges", [])]
        if isinstance(question, PresenceQuestion):
            count = objects.count(question.category)
            return "Yes" if count >= question.required_count else "No"
        for source, relation, target in edges:
            if (
                source == question.subject_category
                and target == question.object_category
                and relation in question.choices
            ):
                return CHOICE_LABELS[question.choices.index(relation)]
        return CHOICE_LABELS[len(question.choices) - 1]


class EchoComposer:
    """Pass-through composer: replies with the request it was given."""

    def complete(self, prompt: str) -> str:
        return prompt


_PRESENCE_ONE_RE = re.compile(r"^Is there a (.+) in the image\? Answer Yes or No\.")
_PRESENCE_MANY_RE = re.compile(
    r"^Are there at least (\d+) (.+)\(s\) in the image\? Answer Yes or No\."
)
_RELATION_RE = re.compile(
    r"^What is the relationship between the (.+?) and the (.+) in the image\? "
    r"A\) (.+); B\) (.+); C\) (.+); D\) (.+)\."
)


def fact_chat_reply(payload: dict) -> str:
    """Answer a chat-completions request against its attached fact image.

    This is the wire-level twin of FactSetJudge: it recovers the
    question by parsing the prompt text, so HTTP-backed runs can be
    tested end to end without a real model.
    """
    text = ""
    image_b64 = ""
    for part in payload["messages"][0]["content"]:
        if part.get("type") == "text":
            text = part["text"]
        elif part.get("type") == "image_url":
            url = part["image_url"]["url"]
            image_b64 = url.split("base64,", 1)[1]
    doc = json.loads(base64.b64decode(image_b64).decode("utf-8"))
    objects: list[str] = list(doc.get("objects", []))
    edges = [tuple(edge) for edge in doc.get("edges", [])]

    match = _PRESENCE_ONE_RE.match(text)
    if match:
        return "Yes" if objects.count(match.group(1)) >= 1 else "No"
    match = _PRESENCE_MANY_RE.match(text)
    if match:
        needed = int(match.group(1))
        return "Yes" if objects.count(match.group(2)) >= needed else "No"
    match = _RELATION_RE.match(text)
    if match:
        subject, target = match.group(1), match.group(2)
        choices = [match.group(i) for i in range(3, 7)]
        for edge_source, relation, edge_target in edges:
            if edge_source == subject and edge_target == target and relation in choices:
                return CHOICE_LABELS[choices.index(relation)]
        return "D"
    raise ValueError(f"unrecognized prompt: {text[:120]!r}")


class _StubState:
    def __init__(self) -> None:
        self.requests: list[dict] = []
        self.authorizations: list[Optional[str]] = []
        self.lock = threading.Lock()


class ChatStubServer:
    """Local chat-completions endpoint scripted by a reply function.

    reply_fn receives the decoded request payload and returns reply
    text, or an int to force that HTTP status.  Requests are recorded
    for wire-format assertions.
    """

    def __init__(self, reply_fn: Callable[[dict], Union[str, int]] = fact_chat_reply):
        state = _StubState()
        self.state = state

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802 (http.server API)
                if self.path != "/chat/completions":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length).decode("utf-8"))
                with state.lock:
                    state.requests.append(payload)
                    state.authorizations.append(self.headers.get("Authorization"))
                result = reply_fn(payload)
                if isinstance(result, int):
                    self.send_response(result)
                    self.end_headers()
                    self.wfile.write(b"stub error")
                    return
                body = json.dumps(
                    {"choices": [{"message": {"content": result}}]}
                ).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, fmt: str, *args) -> None:
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def request_count(self) -> int:
        with self.state.lock:
            return len(self.state.requests)

    @property
    def requests(self) -> list[dict]:
        with self.state.lock:
            return list(self.state.requests)

    @property
    def authorizations(self) -> list[Optional[str]]:
        with self.state.lock:
            return list(self.state.authorizations)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


class GenerationStubServer:
    """Local /generate endpoint backed by a renderer (wire conformance stub)."""

    def __init__(self, renderer: Optional[MockSceneRenderer] = None, vocab: Sequence[str] = ()):
        if renderer is None:
            renderer = MockSceneRenderer(vocab)
        self.renderer = renderer
        state = _StubState()
        self.state = state
        render = renderer.generate

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802 (http.server API)
                if self.path != "/generate":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length).decode("utf-8"))
                with state.lock:
                    state.requests.append(payload)
                request = GenerationRequest(
                    prompt=payload["prompt"],
                    references=tuple(
                        (base64.b64decode(ref["image_b64"]), float(ref["weight"]))
                        for ref in payload.get("references", [])
                    ),
                    seed=int(payload.get("seed", 0)),
                    size=(int(payload.get("width", 512)), int(payload.get("height", 512))),
                )
                image = render(request)
                body = json.dumps(
                    {"image_b64": base64.b64encode(image).decode("ascii")}
                ).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, fmt: str, *args) -> None:
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def request_count(self) -> int:
        with self.state.lock:
            return len(self.state.requests)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
