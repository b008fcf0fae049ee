"""Questions, papers and submissions, with their canonical JSON encodings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Tuple


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class Question:
    id: str
    course_id: str
    body: str
    weight: int = 1

    def __post_init__(self):
        if not self.body:
            raise ValueError(f"question {self.id!r} has an empty body")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Question":
        return cls(id=d["id"], course_id=d["course_id"], body=d["body"], weight=int(d.get("weight", 1)))


@dataclass(frozen=True)
class QuestionPaper:
    index: int
    course_id: str
    questions: Tuple[Question, ...]

    def __post_init__(self):
        if not self.questions:
            raise ValueError("a question paper needs at least one question")
        if any(q.course_id != self.course_id for q in self.questions):
            raise ValueError("all questions in a paper must share its course")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "course_id": self.course_id,
            "questions": [q.to_dict() for q in self.questions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionPaper":
        return cls(index=int(d["index"]), course_id=d["course_id"],
                   questions=tuple(Question.from_dict(q) for q in d["questions"]))

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuestionPaper":
        return cls.from_dict(json.loads(data.decode("utf-8")))


@dataclass(frozen=True)
class QuestionSubmission:
    setter_qt: bytes
    questions: Tuple[Question, ...]

    def __post_init__(self):
        if not self.questions:
            raise ValueError("empty submission")
        if len({q.course_id for q in self.questions}) != 1:
            raise ValueError("a submission covers exactly one course")

    @property
    def course_id(self) -> str:
        return self.questions[0].course_id

    def to_bytes(self) -> bytes:
        return canonical_json({
            "setter_qt": self.setter_qt.hex(),
            "questions": [q.to_dict() for q in self.questions],
        })

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuestionSubmission":
        d = json.loads(data.decode("utf-8"))
        return cls(setter_qt=bytes.fromhex(d["setter_qt"]),
                   questions=tuple(Question.from_dict(q) for q in d["questions"]))


def batch_to_bytes(papers: List[QuestionPaper]) -> bytes:
    return canonical_json([p.to_dict() for p in papers])


def batch_from_bytes(data: bytes) -> List[QuestionPaper]:
    return [QuestionPaper.from_dict(d) for d in json.loads(data.decode("utf-8"))]
