"""Four-to-one human study: task queue, response log, and HTTP API.

Each task shows one original image and four candidates in a shuffled
display order.  Model labels and canonical indices stay server-side;
annotators only ever see display positions.  Every annotator answers
every task in order, and duplicate submissions are rejected.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import random
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping, Optional, Sequence
from urllib.parse import parse_qs, urlparse

from sgscore.metrics import confusion_matrix

logger = logging.getLogger(__name__)


class StudyError(ValueError):
    """Raised for malformed tasks or responses."""


class DuplicateResponseError(StudyError):
    """The (task, annotator) pair already has a recorded response."""


@dataclass(frozen=True)
class StudyTask:
    """One question: an original, four candidates, and their shuffle."""

    task_id: str
    original: str
    candidates: tuple[str, str, str, str]
    models: tuple[str, str, str, str]
    display_order: tuple[int, int, int, int]
    machine_choice: Optional[int] = None

    def __post_init__(self) -> None:
        if sorted(self.display_order) != [0, 1, 2, 3]:
            raise StudyError(
                f"display_order must be a permutation of 0..3, got {self.display_order}"
            )
        if self.machine_choice is not None and not 0 <= self.machine_choice <= 3:
            raise StudyError(f"machine_choice must be in 0..3, got {self.machine_choice}")


@dataclass(frozen=True)
class StudyResponse:
    """A recorded choice; resolved_choice is the canonical candidate index."""

    task_id: str
    annotator_id: str
    displayed_choice: int
    resolved_choice: int
    timestamp: float


def resolve_choice(task: StudyTask, displayed_choice: int) -> int:
    """Canonical index of the candidate shown at a display position."""
    if not 0 <= displayed_choice <= 3:
        raise StudyError(f"displayed_choice must be in 0..3, got {displayed_choice}")
    return task.display_order[displayed_choice]


def _task_from_doc(doc: Mapping, seed: int) -> StudyTask:
    task_id = str(doc["task_id"])
    raw_candidates = doc["candidates"]
    if len(raw_candidates) != 4:
        raise StudyError(f"task {task_id}: need exactly 4 candidates")
    images: list[str] = []
    models: list[str] = []
    for entry in raw_candidates:
        if isinstance(entry, str):
            images.append(entry)
            models.append("")
        else:
            images.append(str(entry["image"]))
            models.append(str(entry.get("model", "")))
    if "display_order" in doc:
        display_order = tuple(int(i) for i in doc["display_order"])
    else:
        rng = random.Random(f"{seed}|{task_id}")
        order = [0, 1, 2, 3]
        rng.shuffle(order)
        display_order = tuple(order)
    machine = doc.get("machine_choice")
    return StudyTask(
        task_id=task_id,
        original=str(doc["original"]),
        candidates=tuple(images),
        models=tuple(models),
        display_order=display_order,
        machine_choice=None if machine is None else int(machine),
    )


def load_study_tasks(path: Path, seed: int = 0) -> list[StudyTask]:
    """Read tasks JSONL; tasks without a display_order get a seeded one."""
    tasks: list[StudyTask] = []
    seen: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                task = _task_from_doc(json.loads(line), seed)
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise StudyError(f"tasks line {lineno}: {exc}") from exc
            if task.task_id in seen:
                raise StudyError(f"duplicate task_id {task.task_id!r}")
            seen.add(task.task_id)
            tasks.append(task)
    return tasks


class StudyState:
    """Tasks plus an append-only response log, safe for concurrent use."""

    def __init__(self, tasks: Sequence[StudyTask], responses_path: Optional[Path] = None):
        self.tasks = list(tasks)
        self._by_id = {task.task_id: task for task in self.tasks}
        self._responses: dict[tuple[str, str], StudyResponse] = {}
        self._lock = threading.Lock()
        self._path = Path(responses_path) if responses_path is not None else None
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        assert self._path is not None
        with self._path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                response = StudyResponse(
                    task_id=str(doc["task_id"]),
                    annotator_id=str(doc["annotator_id"]),
                    displayed_choice=int(doc["displayed_choice"]),
                    resolved_choice=int(doc["resolved_choice"]),
                    timestamp=float(doc["timestamp"]),
                )
                self._responses[(response.task_id, response.annotator_id)] = response

    def progress(self, annotator_id: str) -> dict:
        with self._lock:
            answered = sum(
                1 for task in self.tasks if (task.task_id, annotator_id) in self._responses
            )
        return {"answered": answered, "total": len(self.tasks)}

    def next_task(self, annotator_id: str) -> Optional[StudyTask]:
        """Lowest-index task this annotator has not answered yet."""
        with self._lock:
            for task in self.tasks:
                if (task.task_id, annotator_id) not in self._responses:
                    return task
        return None

    def submit(self, task_id: str, annotator_id: str, displayed_choice: int) -> StudyResponse:
        task = self._by_id.get(task_id)
        if task is None:
            raise StudyError(f"unknown task {task_id!r}")
        if not annotator_id:
            raise StudyError("annotator_id must be non-empty")
        resolved = resolve_choice(task, displayed_choice)
        response = StudyResponse(
            task_id=task_id,
            annotator_id=annotator_id,
            displayed_choice=displayed_choice,
            resolved_choice=resolved,
            timestamp=time.time(),
        )
        with self._lock:
            key = (task_id, annotator_id)
            if key in self._responses:
                raise DuplicateResponseError(
                    f"annotator {annotator_id!r} already answered task {task_id!r}"
                )
            self._responses[key] = response
            if self._path is not None:
                doc = {
                    "task_id": response.task_id,
                    "annotator_id": response.annotator_id,
                    "displayed_choice": response.displayed_choice,
                    "resolved_choice": response.resolved_choice,
                    "timestamp": response.timestamp,
                }
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(doc) + "\n")
        return response

    def responses(self) -> list[StudyResponse]:
        with self._lock:
            ordered = sorted(
                self._responses.values(), key=lambda r: (r.task_id, r.annotator_id)
            )
        return ordered

    def export(self) -> dict:
        """All responses plus the human-vs-machine confusion matrix.

        Only canonical indices appear; model labels never leave the
        tasks file.
        """
        rows = [
            {
                "task_id": r.task_id,
                "annotator_id": r.annotator_id,
                "displayed_choice": r.displayed_choice,
                "resolved_choice": r.resolved_choice,
                "timestamp": r.timestamp,
            }
            for r in self.responses()
        ]
        pairs = []
        for r in self.responses():
            task = self._by_id[r.task_id]
            if task.machine_choice is not None:
                pairs.append((r.resolved_choice, task.machine_choice))
        matrix = confusion_matrix(pairs)
        return {
            "responses": rows,
            "confusion_matrix": {
                "cells": [list(row) for row in matrix.cells],
                "total": matrix.total(),
            },
        }


def _image_url(ref: str) -> str:
    if ref.startswith(("http://", "https://", "/")):
        return ref
    return f"/images/{ref}"


def task_view(task: StudyTask, progress: dict) -> dict:
    """UI payload for one task: URLs in display order, nothing else."""
    return {
        "task_id": task.task_id,
        "original_image_url": _image_url(task.original),
        "candidate_image_urls": [
            _image_url(task.candidates[canonical]) for canonical in task.display_order
        ],
        "progress": progress,
    }


class StudyServer:
    """Threaded HTTP server exposing the study API and static assets."""

    def __init__(
        self,
        state: StudyState,
        host: str = "127.0.0.1",
        port: int = 0,
        assets_dir: Optional[Path] = None,
        images_dir: Optional[Path] = None,
    ):
        self.state = state
        self.assets_dir = Path(assets_dir) if assets_dir is not None else None
        self.images_dir = Path(images_dir) if images_dir is not None else None
        handler = _build_handler(self.state, self.assets_dir, self.images_dir)
        self._server = ThreadingHTTPServer((host, port), handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def _build_handler(state: StudyState, assets_dir: Optional[Path], images_dir: Optional[Path]):
    class Handler(BaseHTTPRequestHandler):
        def _send_json(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_file(self, root: Path, relative: str) -> None:
            target = (root / relative.lstrip("/")).resolve()
            if not str(target).startswith(str(root.resolve())) or not target.is_file():
                self.send_error(404)
                return
            body = target.read_bytes()
            content_type = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
            self.send_response(200)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self) -> None:  # noqa: N802 (http.server API)
            parsed = urlparse(self.path)
            if parsed.path == "/api/tasks/next":
                params = parse_qs(parsed.query)
                annotator = params.get("annotator", [""])[0]
                if not annotator:
                    self._send_json(400, {"error": "annotator query parameter required"})
                    return
                task = state.next_task(annotator)
                progress = state.progress(annotator)
                payload = {
                    "task": None if task is None else task_view(task, progress),
                    "progress": progress,
                }
                self._send_json(200, payload)
                return
            if parsed.path == "/api/export":
                self._send_json(200, state.export())
                return
            if parsed.path.startswith("/images/"):
                if images_dir is None:
                    self.send_error(404)
                    return
                self._send_file(images_dir, parsed.path[len("/images/"):])
                return
            if assets_dir is not None:
                relative = parsed.path
                if relative in ("", "/"):
                    relative = "/index.html"
                self._send_file(assets_dir, relative)
                return
            self.send_error(404)

        def do_POST(self) -> None:  # noqa: N802 (http.server API)
            parsed = urlparse(self.path)
            if parsed.path != "/api/responses":
                self.send_error(404)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                doc = json.loads(self.rfile.read(length).decode("utf-8"))
                task_id = str(doc["task_id"])
                annotator_id = str(doc["annotator_id"])
                displayed_choice = int(doc["displayed_choice"])
            except (ValueError, KeyError, TypeError) as exc:
                self._send_json(400, {"error": f"malformed submission: {exc}"})
                return
            try:
                state.submit(task_id, annotator_id, displayed_choice)
            except DuplicateResponseError as exc:
                self._send_json(409, {"error": str(exc)})
                return
            except StudyError as exc:
                self._send_json(400, {"error": str(exc)})
                return
            self._send_json(200, {"ok": True, "progress": state.progress(annotator_id)})

        def log_message(self, fmt: str, *args) -> None:
            logger.debug("study server: " + fmt, *args)

    return Handler
