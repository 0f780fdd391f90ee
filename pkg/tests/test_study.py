"""Study task queue, response handling, export, and the HTTP API."""

from __future__ import annotations

import json
import threading

import pytest
import requests

from sgscore.study import (
    DuplicateResponseError,
    StudyError,
    StudyServer,
    StudyState,
    StudyTask,
    load_study_tasks,
    resolve_choice,
    task_view,
)

MODEL_LABELS = ("model-alpha", "model-beta", "model-gamma", "model-delta")


def make_task(i, display_order=(0, 1, 2, 3), machine_choice=0):
    return StudyTask(
        task_id=f"t{i}",
        original=f"orig{i}.png",
        candidates=tuple(f"cand{i}-{j}.png" for j in range(4)),
        models=MODEL_LABELS,
        display_order=display_order,
        machine_choice=machine_choice,
    )


SIX_TASKS = [make_task(i, machine_choice=i % 4) for i in range(6)]


def write_tasks_file(path, docs):
    with path.open("w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc) + "\n")
    return path


def task_doc(i, **extra):
    doc = {
        "task_id": f"t{i}",
        "original": f"orig{i}.png",
        "candidates": [
            {"image": f"cand{i}-{j}.png", "model": MODEL_LABELS[j]} for j in range(4)
        ],
        "display_order": [0, 1, 2, 3],
        "machine_choice": i % 4,
    }
    doc.update(extra)
    return doc


def test_task_rejects_bad_display_order():
    with pytest.raises(StudyError):
        make_task(0, display_order=(0, 1, 2, 2))
    with pytest.raises(StudyError):
        make_task(0, machine_choice=4)


def test_resolve_choice_inverts_permutation():
    task = make_task(0, display_order=(3, 0, 1, 2))
    assert resolve_choice(task, 2) == 1
    assert resolve_choice(task, 0) == 3
    assert [resolve_choice(task, d) for d in range(4)] == [3, 0, 1, 2]
    with pytest.raises(StudyError):
        resolve_choice(task, 4)


def test_load_study_tasks(tmp_path):
    path = write_tasks_file(tmp_path / "tasks.jsonl", [task_doc(i) for i in range(6)])
    tasks = load_study_tasks(path)
    assert [t.task_id for t in tasks] == [f"t{i}" for i in range(6)]
    assert tasks[0].models == MODEL_LABELS
    assert tasks[2].machine_choice == 2


def test_load_study_tasks_accepts_bare_image_strings(tmp_path):
    doc = task_doc(0)
    doc["candidates"] = [f"c{j}.png" for j in range(4)]
    del doc["machine_choice"]
    path = write_tasks_file(tmp_path / "tasks.jsonl", [doc])
    task = load_study_tasks(path)[0]
    assert task.candidates == ("c0.png", "c1.png", "c2.png", "c3.png")
    assert task.models == ("", "", "", "")
    assert task.machine_choice is None


def test_load_study_tasks_seeds_missing_display_order(tmp_path):
    doc = task_doc(0)
    del doc["display_order"]
    path = write_tasks_file(tmp_path / "tasks.jsonl", [doc])
    first = load_study_tasks(path, seed=1)[0].display_order
    second = load_study_tasks(path, seed=1)[0].display_order
    assert first == second
    assert sorted(first) == [0, 1, 2, 3]
    others = {load_study_tasks(path, seed=s)[0].display_order for s in range(20)}
    assert len(others) > 1


def test_load_study_tasks_rejects_duplicates(tmp_path):
    path = write_tasks_file(tmp_path / "tasks.jsonl", [task_doc(0), task_doc(0)])
    with pytest.raises(StudyError):
        load_study_tasks(path)


def test_load_study_tasks_reports_line_number(tmp_path):
    path = tmp_path / "tasks.jsonl"
    path.write_text(json.dumps(task_doc(0)) + "\nnot json\n", encoding="utf-8")
    with pytest.raises(StudyError) as err:
        load_study_tasks(path)
    assert "line 2" in str(err.value)


def test_next_task_is_sequential_per_annotator():
    state = StudyState(SIX_TASKS)
    assert state.next_task("ann-a").task_id == "t0"
    state.submit("t0", "ann-a", 0)
    assert state.next_task("ann-a").task_id == "t1"
    assert state.next_task("ann-b").task_id == "t0"
    assert state.progress("ann-a") == {"answered": 1, "total": 6}
    assert state.progress("ann-b") == {"answered": 0, "total": 6}


def test_next_task_exhausts_to_none():
    state = StudyState(SIX_TASKS[:2])
    state.submit("t0", "a", 0)
    state.submit("t1", "a", 1)
    assert state.next_task("a") is None
    assert state.progress("a") == {"answered": 2, "total": 2}


def test_submit_validates():
    state = StudyState(SIX_TASKS)
    with pytest.raises(StudyError):
        state.submit("missing", "a", 0)
    with pytest.raises(StudyError):
        state.submit("t0", "", 0)
    state.submit("t0", "a", 1)
    with pytest.raises(DuplicateResponseError):
        state.submit("t0", "a", 2)


def test_submit_resolves_display_position():
    task = make_task(9, display_order=(3, 0, 1, 2))
    state = StudyState([task])
    response = state.submit("t9", "a", 2)
    assert response.displayed_choice == 2
    assert response.resolved_choice == 1


def test_concurrent_annotators_lose_nothing():
    state = StudyState(SIX_TASKS)
    annotators = [f"ann-{i}" for i in range(8)]
    errors = []

    def run(annotator):
        try:
            while True:
                task = state.next_task(annotator)
                if task is None:
                    return
                state.submit(task.task_id, annotator, hash(annotator) % 4)
        except Exception as exc:  # pragma: no cover - failure reporting
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(a,)) for a in annotators]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert len(state.responses()) == len(SIX_TASKS) * len(annotators)
    for annotator in annotators:
        assert state.progress(annotator)["answered"] == len(SIX_TASKS)


def test_responses_persist_and_resume(tmp_path):
    path = tmp_path / "responses.jsonl"
    state = StudyState(SIX_TASKS, responses_path=path)
    state.submit("t0", "a", 0)
    state.submit("t1", "a", 3)

    resumed = StudyState(SIX_TASKS, responses_path=path)
    assert resumed.progress("a") == {"answered": 2, "total": 6}
    assert resumed.next_task("a").task_id == "t2"
    with pytest.raises(DuplicateResponseError):
        resumed.submit("t0", "a", 1)


def test_export_counts_and_matrix():
    tasks = [
        make_task(0, display_order=(3, 0, 1, 2), machine_choice=1),
        make_task(1, machine_choice=0),
        make_task(2, machine_choice=None),
    ]
    state = StudyState(tasks)
    state.submit("t0", "a", 2)
    state.submit("t1", "a", 0)
    state.submit("t2", "a", 3)
    export = state.export()
    assert len(export["responses"]) == 3
    matrix = export["confusion_matrix"]
    assert matrix["total"] == 2
    assert matrix["cells"][1][1] == 1
    assert matrix["cells"][0][0] == 1


def collect_strings(payload, found):
    if isinstance(payload, dict):
        for key, value in payload.items():
            found.add(str(key))
            collect_strings(value, found)
    elif isinstance(payload, list):
        for item in payload:
            collect_strings(item, found)
    elif isinstance(payload, str):
        found.add(payload)


def test_task_view_orders_candidates_and_hides_models():
    task = make_task(0, display_order=(3, 0, 1, 2))
    view = task_view(task, {"answered": 0, "total": 1})
    assert view["candidate_image_urls"] == [
        "/images/cand0-3.png",
        "/images/cand0-0.png",
        "/images/cand0-1.png",
        "/images/cand0-2.png",
    ]
    assert view["original_image_url"] == "/images/orig0.png"
    strings = set()
    collect_strings(view, strings)
    for label in MODEL_LABELS:
        assert label not in strings
    assert "machine_choice" not in strings
    assert "display_order" not in strings


def test_task_view_passes_through_absolute_urls():
    task = StudyTask(
        task_id="x",
        original="https://cdn/orig.png",
        candidates=("/static/a.png", "b.png", "c.png", "d.png"),
        models=("", "", "", ""),
        display_order=(0, 1, 2, 3),
        machine_choice=None,
    )
    view = task_view(task, {"answered": 0, "total": 1})
    assert view["original_image_url"] == "https://cdn/orig.png"
    assert view["candidate_image_urls"][0] == "/static/a.png"
    assert view["candidate_image_urls"][1] == "/images/b.png"


@pytest.fixture
def study_server(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    for task in SIX_TASKS:
        (images / task.original).write_bytes(b"orig")
        for name in task.candidates:
            (images / name).write_bytes(b"cand")
    assets = tmp_path / "assets"
    assets.mkdir()
    (assets / "index.html").write_text("<html>study</html>", encoding="utf-8")
    state = StudyState(SIX_TASKS, responses_path=tmp_path / "responses.jsonl")
    server = StudyServer(state, assets_dir=assets, images_dir=images)
    server.start()
    yield server
    server.close()


def test_api_requires_annotator(study_server):
    response = requests.get(f"{study_server.base_url}/api/tasks/next", timeout=5)
    assert response.status_code == 400


def test_api_next_task_payload(study_server):
    response = requests.get(
        f"{study_server.base_url}/api/tasks/next",
        params={"annotator": "a"},
        timeout=5,
    )
    assert response.status_code == 200
    doc = response.json()
    assert doc["task"]["task_id"] == "t0"
    assert len(doc["task"]["candidate_image_urls"]) == 4
    assert doc["progress"] == {"answered": 0, "total": 6}


def test_api_submit_and_duplicate(study_server):
    body = {"task_id": "t0", "annotator_id": "dup", "displayed_choice": 1}
    first = requests.post(
        f"{study_server.base_url}/api/responses", json=body, timeout=5
    )
    assert first.status_code == 200
    assert first.json()["ok"] is True
    assert first.json()["progress"]["answered"] == 1

    second = requests.post(
        f"{study_server.base_url}/api/responses", json=body, timeout=5
    )
    assert second.status_code == 409


def test_api_rejects_malformed_submission(study_server):
    response = requests.post(
        f"{study_server.base_url}/api/responses",
        json={"task_id": "t0"},
        timeout=5,
    )
    assert response.status_code == 400
    unknown = requests.post(
        f"{study_server.base_url}/api/responses",
        json={"task_id": "nope", "annotator_id": "a", "displayed_choice": 0},
        timeout=5,
    )
    assert unknown.status_code == 400


def test_api_serves_images_and_blocks_traversal(study_server):
    ok = requests.get(f"{study_server.base_url}/images/orig0.png", timeout=5)
    assert ok.status_code == 200
    assert ok.content == b"orig"
    evil = requests.get(
        f"{study_server.base_url}/images/../responses.jsonl", timeout=5
    )
    assert evil.status_code == 404


def test_api_serves_assets(study_server):
    root = requests.get(study_server.base_url + "/", timeout=5)
    assert root.status_code == 200
    assert b"study" in root.content
    assert "text/html" in root.headers["Content-Type"]


def test_full_study_flow_over_http(study_server):
    for annotator in ("ann-1", "ann-2"):
        while True:
            doc = requests.get(
                f"{study_server.base_url}/api/tasks/next",
                params={"annotator": annotator},
                timeout=5,
            ).json()
            if doc["task"] is None:
                break
            strings = set()
            collect_strings(doc, strings)
            for label in MODEL_LABELS:
                assert label not in strings
            submit = requests.post(
                f"{study_server.base_url}/api/responses",
                json={
                    "task_id": doc["task"]["task_id"],
                    "annotator_id": annotator,
                    "displayed_choice": len(doc["task"]["task_id"]) % 4,
                },
                timeout=5,
            )
            assert submit.status_code == 200

    export = requests.get(f"{study_server.base_url}/api/export", timeout=5).json()
    assert len(export["responses"]) == 12
    cells = export["confusion_matrix"]["cells"]
    assert sum(sum(row) for row in cells) == 12
    strings = set()
    collect_strings(export, strings)
    for label in MODEL_LABELS:
        assert label not in strings
