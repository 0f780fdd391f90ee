"""Visual question answering against a pluggable multimodal judge.

Object presence is checked with yes/no questions, relations with
four-choice questions whose last option is always "no visible
relationship".  Replies are parsed conservatively: anything that stays
unparseable after one clarifying retry counts as a miss, never a hit.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import requests

from sgscore.graph import Edge, SceneGraph

logger = logging.getLogger(__name__)

NO_RELATION = "no visible relationship"
CHOICE_LABELS = ("A", "B", "C", "D")
CLARIFY_SUFFIX = " Answer with a single letter."

_BACKOFF_BASE = 0.25


class JudgeError(RuntimeError):
    """Base class for judge failures."""


class BackendError(JudgeError):
    """The backend stayed unreachable or kept returning bad responses."""


class VocabularyError(JudgeError):
    """Raised when the relation vocabulary cannot supply two distractors."""


@dataclass(frozen=True)
class PresenceQuestion:
    """Yes/no question about object presence, with a count threshold."""

    category: str
    required_count: int
    prompt_text: str


@dataclass(frozen=True)
class RelationQuestion:
    """Four-choice question about the relation between two categories."""

    subject_category: str
    object_category: str
    choices: tuple[str, str, str, str]
    answer_index: int
    prompt_text: str


Question = Union[PresenceQuestion, RelationQuestion]


class AnswerKind(enum.Enum):
    YES_NO = "yes_no"
    CHOICE = "choice"


@dataclass(frozen=True)
class JudgeAnswer:
    """Parsed judge reply; abstentions are recorded as No / last choice."""

    kind: AnswerKind
    raw_reply: str
    yes: Optional[bool] = None
    choice_index: Optional[int] = None
    abstained: bool = False

    def __post_init__(self) -> None:
        if self.kind is AnswerKind.YES_NO:
            if self.yes is None or self.choice_index is not None:
                raise ValueError("yes/no answer must populate yes only")
        else:
            if self.choice_index is None or self.yes is not None:
                raise ValueError("choice answer must populate choice_index only")


@dataclass(frozen=True)
class JudgeImage:
    """Image bytes plus their digest, the cache identity of the image."""

    data: bytes
    digest: str

    @classmethod
    def from_bytes(cls, data: bytes) -> "JudgeImage":
        return cls(data=data, digest=hashlib.sha256(data).hexdigest())


class JudgeBackend(Protocol):
    """Anything that can reply to a question about an image."""

    model_name: str

    def answer(self, image: JudgeImage, prompt_text: str, question: Question) -> str:
        ...


def build_presence_question(category: str, required_count: int) -> PresenceQuestion:
    """Build the presence prompt for one category at a count threshold."""
    if required_count < 1:
        raise ValueError(f"required_count must be >= 1, got {required_count}")
    if required_count == 1:
        prompt = f"Is there a {category} in the image? Answer Yes or No."
    else:
        prompt = (
            f"Are there at least {required_count} {category}(s) in the image?"
            " Answer Yes or No."
        )
    return PresenceQuestion(category=category, required_count=required_count, prompt_text=prompt)


def build_relation_question(edge: Edge, vocab: Sequence[str], seed: int) -> RelationQuestion:
    """Build the four-choice relation prompt for one edge.

    Two distractors are drawn from vocab (minus the ground truth) by a
    RNG seeded with `seed`, the first three options are shuffled by the
    same RNG, and "no visible relationship" is always option D.
    """
    pool: list[str] = []
    for relation in vocab:
        canon = relation.strip().lower()
        if canon and canon != edge.relation and canon != NO_RELATION and canon not in pool:
            pool.append(canon)
    if len(pool) < 2:
        raise VocabularyError(
            f"need at least 2 distractors for relation {edge.relation!r}; "
            f"extend the relation vocabulary (have {len(pool)})"
        )
    rng = random.Random(seed)
    distractors = rng.sample(pool, 2)
    first_three = [edge.relation, *distractors]
    rng.shuffle(first_three)
    choices = (*first_three, NO_RELATION)
    answer_index = choices.index(edge.relation)
    listed = "; ".join(
        f"{label}) {text}" for label, text in zip(CHOICE_LABELS, choices)
    )
    prompt = (
        f"What is the relationship between the {edge.source.category} and the "
        f"{edge.target.category} in the image? {listed}."
    )
    return RelationQuestion(
        subject_category=edge.source.category,
        object_category=edge.target.category,
        choices=choices,
        answer_index=answer_index,
        prompt_text=prompt,
    )


def edge_question_seed(run_seed: int, sample_id: str, edge_index: int) -> int:
    """Stable per-edge seed so distractor draws reproduce across runs."""
    key = f"{run_seed}|{sample_id}|{edge_index}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_LETTER_RE = re.compile(r"^\s*([A-Da-d])(?![A-Za-z])")


def parse_reply(question: Question, reply: str) -> Optional[JudgeAnswer]:
    """Parse a raw reply, or return None when it does not commit to an answer."""
    if isinstance(question, PresenceQuestion):
        match = _YES_NO_RE.search(reply)
        if match is None:
            return None
        return JudgeAnswer(
            kind=AnswerKind.YES_NO,
            raw_reply=reply,
            yes=match.group(1).lower() == "yes",
        )
    match = _LETTER_RE.match(reply)
    if match is not None:
        index = CHOICE_LABELS.index(match.group(1).upper())
        return JudgeAnswer(kind=AnswerKind.CHOICE, raw_reply=reply, choice_index=index)
    stripped = reply.strip().strip(".").strip().lower()
    for index, choice in enumerate(question.choices):
        if stripped == choice:
            return JudgeAnswer(kind=AnswerKind.CHOICE, raw_reply=reply, choice_index=index)
    return None


def _abstention(question: Question, reply: str) -> JudgeAnswer:
    if isinstance(question, PresenceQuestion):
        return JudgeAnswer(
            kind=AnswerKind.YES_NO, raw_reply=reply, yes=False, abstained=True
        )
    return JudgeAnswer(
        kind=AnswerKind.CHOICE,
        raw_reply=reply,
        choice_index=len(question.choices) - 1,
        abstained=True,
    )


class AnswerCache:
    """JSONL-backed reply cache keyed by (image digest, prompt, model)."""

    def __init__(self, path: Optional[Path] = None):
        self._path = Path(path) if path is not None else None
        self._entries: dict[tuple[str, str, str], str] = {}
        self._lock = threading.Lock()
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        assert self._path is not None
        with self._path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                key = (record["digest"], record["prompt_sha256"], record["model"])
                self._entries[key] = record["reply"]

    @staticmethod
    def _key(digest: str, prompt: str, model: str) -> tuple[str, str, str]:
        prompt_sha = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        return (digest, prompt_sha, model)

    def get(self, digest: str, prompt: str, model: str) -> Optional[str]:
        return self._entries.get(self._key(digest, prompt, model))

    def put(self, digest: str, prompt: str, model: str, reply: str) -> None:
        key = self._key(digest, prompt, model)
        with self._lock:
            self._entries[key] = reply
            if self._path is not None:
                record = {
                    "digest": key[0],
                    "prompt_sha256": key[1],
                    "model": key[2],
                    "reply": reply,
                }
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


def ask(
    backend: JudgeBackend,
    image: JudgeImage,
    question: Question,
    cache: Optional[AnswerCache] = None,
) -> JudgeAnswer:
    """Answer one question about one image, via cache when possible.

    Unparseable replies trigger one re-ask with a clarifying suffix; if
    the reply still does not parse, the answer is an abstention.  The
    final reply is cached under the original prompt, so repeat asks are
    network-free.
    """
    prompt = question.prompt_text
    if cache is not None:
        cached = cache.get(image.digest, prompt, backend.model_name)
        if cached is not None:
            parsed = parse_reply(question, cached)
            return parsed if parsed is not None else _abstention(question, cached)

    reply = backend.answer(image, prompt, question)
    parsed = parse_reply(question, reply)
    if parsed is None:
        reply = backend.answer(image, prompt + CLARIFY_SUFFIX, question)
        parsed = parse_reply(question, reply)
        if parsed is None:
            logger.warning(
                "unparseable judge reply after retry; treating as miss: %.80r", reply
            )
    if cache is not None:
        cache.put(image.digest, prompt, backend.model_name, reply)
    return parsed if parsed is not None else _abstention(question, reply)


@dataclass(frozen=True)
class JudgeBackendConfig:
    """Connection settings for a chat-completions judge endpoint."""

    base_url: str
    model_name: str
    api_key_env: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")


class ChatCompletionsBackend:
    """HTTP judge speaking the chat-completions JSON dialect."""

    def __init__(self, config: JudgeBackendConfig):
        self.config = config
        self.model_name = config.model_name

    def answer(self, image: JudgeImage, prompt_text: str, question: Question) -> str:
        content = [
            {"type": "text", "text": prompt_text},
            {
                "type": "image_url",
                "image_url": {
                    "url": "data:image/png;base64,"
                    + base64.b64encode(image.data).decode("ascii")
                },
            },
        ]
        return self._post(content)

    def complete(self, prompt_text: str) -> str:
        """Text-only completion, for prompt-composition use."""
        return self._post([{"type": "text", "text": prompt_text}])

    def _post(self, content: list[dict]) -> str:
        payload = {
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": content}],
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            token = os.environ.get(self.config.api_key_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        url = self.config.base_url.rstrip("/") + "/chat/completions"

        last_error: Optional[str] = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(_BACKOFF_BASE * 2 ** (attempt - 1))
            try:
                response = requests.post(
                    url, json=payload, headers=headers, timeout=self.config.timeout
                )
            except requests.RequestException as exc:
                last_error = str(exc)
                logger.warning("judge request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if response.status_code != 200:
                last_error = f"HTTP {response.status_code}: {response.text[:200]}"
                logger.warning("judge request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            try:
                body = response.json()
                content = body["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last_error = f"malformed response body: {exc}"
                logger.warning("judge request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if isinstance(content, list):
                content = "".join(
                    part.get("text", "") for part in content if isinstance(part, dict)
                )
            return str(content)
        raise BackendError(
            f"judge backend at {url} failed after {self.config.max_retries + 1} attempts: "
            f"{last_error}"
        )


@dataclass
class ScriptedOracle:
    """Deterministic backend that answers from a known scene graph.

    Presence questions are answered by counting the category in the
    world; relation questions pick the choice matching any world edge
    between the two categories, else the last-resort option.
    """

    world: SceneGraph
    model_name: str = "scripted-oracle"
    calls: int = field(default=0, compare=False)

    def answer(self, image: JudgeImage, prompt_text: str, question: Question) -> str:
        self.calls += 1
        if isinstance(question, PresenceQuestion):
            count = self.world.category_counts().get(question.category, 0)
            return "Yes" if count >= question.required_count else "No"
        present = self.world.relations_between(
            question.subject_category, question.object_category
        )
        for index, choice in enumerate(question.choices):
            if choice in present:
                return CHOICE_LABELS[index]
        return CHOICE_LABELS[len(question.choices) - 1]


def scripted_oracle(world: SceneGraph) -> ScriptedOracle:
    """Backend that answers every question truthfully about `world`."""
    return ScriptedOracle(world=world)
