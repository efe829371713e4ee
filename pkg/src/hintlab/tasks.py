"""Synthetic "constraint-lock" tasks.

Each task asks for an exact token string of length ``L`` over a vocabulary of
size ``V``.  The string is not arbitrary: every task set draws a secret
per-position substitution key, and ``answer[p] = key[p][question[p]]``.  A
policy that learns the key for one position/question-symbol pair can reuse it
on any task sharing that pair, so held-out accuracy is meaningful.

Two kinds of guidance are supported:

* heuristic hint: a per-position candidate set (always ``>= 2`` tokens, always
  containing the true token) that narrows the search space without revealing
  the answer;
* answer-prefix hint: the first ``prefix_len`` answer tokens are forced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ConfigError, InputError

TASK_FILE_FORMAT = "hintlab-tasks"
TASK_FILE_VERSION = 1

HintMode = Literal["none", "heuristic", "answer_prefix", "inject"]
Phase = Literal["rollout", "policy"]


@dataclass(frozen=True)
class Task:
    task_id: int
    question: tuple[int, ...]
    answer: tuple[int, ...]
    candidates: tuple[tuple[int, ...], ...]
    vocab: int
    split: str = "train"

    @property
    def length(self) -> int:
        return len(self.answer)

    @property
    def difficulty(self) -> tuple[int, int]:
        return self.length, self.vocab

    def hinted_space(self) -> int:
        return int(np.prod([len(c) for c in self.candidates], dtype=object))


@dataclass(frozen=True)
class HintSpec:
    """Which guidance a rescue rollout receives.

    ``inject`` is not a prompt-level hint: the rescue replaces one failed
    trajectory by the ground-truth answer (an off-policy sample), so it
    renders the plain context.
    """

    mode: HintMode = "none"
    prefix_len: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "heuristic", "answer_prefix", "inject"):
            raise ConfigError(f"unknown hint mode {self.mode!r}")
        if self.prefix_len < 0:
            raise ConfigError("prefix_len must be non-negative")
        if self.mode == "answer_prefix" and self.prefix_len < 1:
            raise ConfigError("answer_prefix mode needs prefix_len >= 1")

    def check(self, length: int) -> None:
        if self.mode == "answer_prefix" and self.prefix_len >= length:
            raise ConfigError(
                f"prefix_len={self.prefix_len} would reveal the whole answer (L={length})"
            )


@dataclass(frozen=True)
class Context:
    """What the policy conditions on when emitting a token string.

    The policy reads ``question`` and ``table`` for its parameter buckets.
    ``candidates`` (heuristic hint) masks the distribution; ``forced_prefix``
    (answer hint) is emitted verbatim ahead of sampled tokens.
    """

    task_id: int
    question: tuple[int, ...]
    candidates: tuple[tuple[int, ...], ...] | None = None
    forced_prefix: tuple[int, ...] = ()
    # Parameter table read by the policy: 0 = hint-free; a hinted prompt that is
    # not collapsed onto the hint-free prompt reads its own table.
    table: int = 0

    @property
    def length(self) -> int:
        return len(self.question)

    @property
    def hinted(self) -> bool:
        return self.candidates is not None or bool(self.forced_prefix)

    @property
    def fingerprint(self) -> str:
        if self.candidates is not None:
            return "heuristic"
        if self.forced_prefix:
            return f"prefix{len(self.forced_prefix)}"
        return "none"


def hint_size(vocab: int, narrowing_factor: float) -> int:
    """Candidate-set size per position for a given narrowing factor."""
    return max(2, min(vocab, int(round(narrowing_factor * vocab))))


def _check_difficulty(length: int, vocab: int, narrowing_factor: float) -> None:
    if length < 1 or vocab < 2:
        raise ConfigError(f"invalid difficulty (L={length}, V={vocab}); need L >= 1, V >= 2")
    if not 0.0 < narrowing_factor <= 1.0:
        raise ConfigError(f"narrowing_factor must lie in (0, 1], got {narrowing_factor}")


def generate_task_set(
    seed: int,
    count: int,
    difficulty: tuple[int, int],
    narrowing_factor: float,
    test_fraction: float = 0.2,
) -> list[Task]:
    """Draw ``count`` tasks with distinct questions from one secret key.

    The last ``round(count * test_fraction)`` task ids form the test split.
    """
    length, vocab = difficulty
    _check_difficulty(length, vocab, narrowing_factor)
    if count < 1:
        raise ConfigError("count must be >= 1")
    if count > vocab**length:
        raise ConfigError(f"cannot draw {count} distinct questions from {vocab}^{length}")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    key = np.stack([rng.permutation(vocab) for _ in range(length)])
    k = hint_size(vocab, narrowing_factor)
    n_test = int(round(count * test_fraction))

    seen: set[tuple[int, ...]] = set()
    tasks = []
    while len(tasks) < count:
        question = tuple(int(x) for x in rng.integers(0, vocab, size=length))
        if question in seen:
            continue
        seen.add(question)
        answer = tuple(int(key[p, question[p]]) for p in range(length))
        candidates = []
        for a in answer:
            others = np.array([v for v in range(vocab) if v != a])
            picks = rng.choice(others, size=k - 1, replace=False)
            candidates.append(tuple(sorted([a, *(int(v) for v in picks)])))
        task_id = len(tasks)
        tasks.append(
            Task(
                task_id=task_id,
                question=question,
                answer=answer,
                candidates=tuple(candidates),
                vocab=vocab,
                split="test" if task_id >= count - n_test else "train",
            )
        )
    return tasks


def split_tasks(tasks: Iterable[Task], split: str) -> list[Task]:
    return [t for t in tasks if t.split == split]


def verify(task: Task, output: Sequence[int]) -> int:
    """Binary verifier: +1 iff ``output`` is exactly the answer."""
    out = tuple(int(x) for x in output)
    return 1 if out == task.answer else 0


HEURISTIC_TABLE = 1
PREFIX_TABLE = 2
N_TABLES = 3


def render_context(task: Task, hint: HintSpec, decoupled: bool, phase: Phase) -> Context:
    """Context for sampling (``rollout``) or for the policy update (``policy``).

    With decoupled prompts the policy phase always sees the hint-free prompt,
    and hinted rollouts read the hint-free parameters (the hint only masks or
    forces).  Without decoupling a hinted prompt is a prompt of its own and
    reads its own parameter table in both phases.
    """
    if phase not in ("rollout", "policy"):
        raise InputError(f"unknown phase {phase!r}")
    plain = Context(task_id=task.task_id, question=task.question)
    if phase == "policy" and decoupled:
        return plain
    if hint.mode == "heuristic":
        table = 0 if decoupled else HEURISTIC_TABLE
        return Context(task.task_id, task.question, candidates=task.candidates, table=table)
    if hint.mode == "answer_prefix":
        hint.check(task.length)
        table = 0 if decoupled else PREFIX_TABLE
        return Context(task.task_id, task.question, forced_prefix=task.answer[: hint.prefix_len], table=table)
    return plain


# Task file: line 1 is a header object, then one task object per line.
#   {"format": "hintlab-tasks", "version": 1, "count": N}
#   {"task_id": 0, "question": [..], "answer": [..], "candidates": [[..], ..], "vocab": V, "split": "train"}


def save_tasks(tasks: Sequence[Task], path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as f:
        header = {"format": TASK_FILE_FORMAT, "version": TASK_FILE_VERSION, "count": len(tasks)}
        f.write(json.dumps(header) + "\n")
        for t in tasks:
            row = {
                "task_id": t.task_id,
                "question": list(t.question),
                "answer": list(t.answer),
                "candidates": [list(c) for c in t.candidates],
                "vocab": t.vocab,
                "split": t.split,
            }
            f.write(json.dumps(row) + "\n")


def load_tasks(path: str | Path) -> list[Task]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise InputError(f"{path}: empty task file")
    header = json.loads(lines[0])
    if header.get("format") != TASK_FILE_FORMAT or header.get("version") != TASK_FILE_VERSION:
        raise InputError(f"{path}: not a v{TASK_FILE_VERSION} task file")
    tasks = []
    for line in lines[1:]:
        if not line.strip():
            continue
        row = json.loads(line)
        tasks.append(
            Task(
                task_id=int(row["task_id"]),
                question=tuple(row["question"]),
                answer=tuple(row["answer"]),
                candidates=tuple(tuple(c) for c in row["candidates"]),
                vocab=int(row["vocab"]),
                split=row["split"],
            )
        )
    if len(tasks) != header["count"]:
        raise InputError(f"{path}: header says {header['count']} tasks, found {len(tasks)}")
    return tasks
