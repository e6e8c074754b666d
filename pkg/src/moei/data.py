"""Instruction-formatted samples, their token layout, batching and file format.

A sample is laid out as::

    BOS INSTR <instruction> INPUT <input> [OPTION <options>] ANSWER <target> EOS

Only the target tokens and the closing EOS are scored by the language-model
losses; everything up to and including ANSWER is the prompt.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError

PAD, BOS, EOS, INSTR, INPUT, OPTION, ANSWER = range(7)
N_SPECIAL = 16
IGNORE_INDEX = -100

DOMAINS = ("EI", "GI")
FACETS = ("perception", "cognition", "expression", "none")
SCHEMA_VERSION = "moei-task/1"
RECORD_FIELDS = ("instruction", "input", "options", "target", "domain", "facet", "task")


@dataclass(frozen=True)
class TaskSample:
    instruction: Tuple[int, ...]
    input: Tuple[int, ...]
    target: Tuple[int, ...]
    domain: str
    facet: str = "none"
    task: str = ""
    options: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        for name in ("instruction", "input", "target"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if self.options is not None:
            object.__setattr__(self, "options", tuple(int(t) for t in self.options))
        if self.domain not in DOMAINS:
            raise ContractError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.facet not in FACETS:
            raise ContractError(f"facet must be one of {FACETS}, got {self.facet!r}")
        if self.domain == "GI" and self.facet != "none":
            raise ContractError("GI samples carry facet 'none'")
        if self.options is not None and self.target not in [(o,) for o in self.options]:
            raise ContractError(f"target {self.target} is not one of the options {self.options}")

    @property
    def prompt(self) -> List[int]:
        toks = [BOS, INSTR, *self.instruction, INPUT, *self.input]
        if self.options is not None:
            toks += [OPTION, *self.options]
        toks.append(ANSWER)
        return toks

    @property
    def sequence(self) -> List[int]:
        return self.prompt + list(self.target) + [EOS]

    def key(self) -> str:
        """String form used for train/eval deduplication."""
        return " ".join(map(str, self.sequence))

    def to_record(self) -> dict:
        rec = {
            "schema": SCHEMA_VERSION,
            "instruction": list(self.instruction),
            "input": list(self.input),
            "target": list(self.target),
            "domain": self.domain,
            "facet": self.facet,
            "task": self.task,
        }
        if self.options is not None:
            rec["options"] = list(self.options)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TaskSample":
        schema = rec.get("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ContractError(f"unsupported task record schema {schema!r}")
        unknown = set(rec) - set(RECORD_FIELDS) - {"schema"}
        if unknown:
            raise ContractError(f"unknown task record fields {sorted(unknown)}")
        return cls(
            instruction=rec["instruction"],
            input=rec["input"],
            target=rec["target"],
            domain=rec["domain"],
            facet=rec.get("facet", "none"),
            task=rec.get("task", ""),
            options=rec.get("options"),
        )


@dataclass
class Batch:
    """Right-padded next-token batch.

    ``inputs[b, t]`` predicts ``targets[b, t]``; non-scored positions hold
    ``IGNORE_INDEX``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    domains: Tuple[str, ...]

    @property
    def token_mask(self) -> np.ndarray:
        return self.inputs != PAD

    def __len__(self) -> int:
        return self.inputs.shape[0]


def collate(samples: Sequence[TaskSample]) -> Batch:
    if not samples:
        raise ContractError("cannot collate an empty batch")
    seqs = [s.sequence for s in samples]
    width = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), width), PAD, dtype=np.int64)
    targets = np.full((len(seqs), width), IGNORE_INDEX, dtype=np.int64)
    for b, (sample, seq) in enumerate(zip(samples, seqs)):
        n = len(seq) - 1
        inputs[b, :n] = seq[:-1]
        start = len(sample.prompt) - 1
        targets[b, start:n] = seq[start + 1 :]
    return Batch(inputs, targets, tuple(s.domain for s in samples))


def save_jsonl(samples: Iterable[TaskSample], path: str) -> None:
    """Write one JSON record per line, atomically."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_jsonl(path: str) -> List[TaskSample]:
    with open(path) as fh:
        return [TaskSample.from_record(json.loads(line)) for line in fh if line.strip()]
