"""Question cloud: intake pool, formatting, paper building and hand-over."""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from .model import Question, QuestionPaper, QuestionSubmission, batch_to_bytes
from .netsim import MessageEnvelope, Network
from .submission import HandshakeServer, ProtocolMessage

logger = logging.getLogger(__name__)


class InfeasibleCriteria(ValueError):
    pass


class TransportError(Exception):
    pass


@dataclass(frozen=True)
class FilterCriteria:
    course_id: str
    papers_wanted: int
    questions_per_paper: int
    rng_seed: int = 0
    weight_quota: Optional[Dict[int, int]] = None

    def __post_init__(self):
        if self.papers_wanted < 1:
            raise ValueError("papers_wanted must be >= 1")
        if self.questions_per_paper < 1:
            raise ValueError("questions_per_paper must be >= 1")
        if self.weight_quota is not None:
            if sum(self.weight_quota.values()) != self.questions_per_paper:
                raise ValueError("weight quota must add up to questions_per_paper")


def format_questions(raw: Iterable[Question], seed: int) -> List[Question]:
    """Drop duplicate ids (first wins), normalise whitespace, then shuffle."""
    seen = set()
    out = []
    for q in raw:
        if q.id in seen:
            continue
        seen.add(q.id)
        out.append(Question(q.id, q.course_id, " ".join(q.body.split()), q.weight))
    random.Random(seed).shuffle(out)
    return out


def build_qsps(pool: Sequence[Question], criteria: FilterCriteria) -> List[QuestionPaper]:
    eligible = [q for q in pool if q.course_id == criteria.course_id]
    n = criteria.questions_per_paper
    if criteria.weight_quota:
        by_weight = {w: [q for q in eligible if q.weight == w] for w in criteria.weight_quota}
        short = {w: c - len(by_weight[w]) for w, c in criteria.weight_quota.items() if len(by_weight[w]) < c}
        if short:
            detail = ", ".join(f"weight {w}: {s} short" for w, s in sorted(short.items()))
            raise InfeasibleCriteria(f"course {criteria.course_id}: {detail}")
    elif len(eligible) < n:
        raise InfeasibleCriteria(
            f"course {criteria.course_id}: need {n} questions per paper, pool has {len(eligible)}")

    rng = random.Random(criteria.rng_seed)
    papers = []
    for index in range(criteria.papers_wanted):
        if criteria.weight_quota:
            picked = []
            for w in sorted(criteria.weight_quota):
                picked.extend(rng.sample(by_weight[w], criteria.weight_quota[w]))
            rng.shuffle(picked)
        else:
            picked = rng.sample(eligible, n)
        papers.append(QuestionPaper(index, criteria.course_id, tuple(picked)))
    return papers


@dataclass
class Tombstone:
    course_id: str
    papers: int
    questions: int


class QuestionCloud:
    """Holds the handshake server, the question pool and the outbound queue."""

    def __init__(self, node_id: str, handshake: HandshakeServer, network: Optional[Network] = None):
        self.node_id = node_id
        self.handshake = handshake
        self.network = network
        self.pool: List[Question] = []
        self.queue: List[QuestionPaper] = []
        self.tombstones: List[Tombstone] = []
        self._acked: set = set()
        if network is not None:
            network.register(node_id, self.on_message)

    def intake(self, submission: QuestionSubmission) -> None:
        self.pool.extend(submission.questions)

    def collect_accepted(self) -> None:
        """Move every accepted submission from the handshake server into the pool."""
        while self.handshake.accepted:
            self.intake(self.handshake.accepted.pop(0))

    def prepare(self, criteria: FilterCriteria, format_seed: int) -> List[QuestionPaper]:
        self.collect_accepted()
        self.pool = format_questions(self.pool, format_seed)
        self.queue = build_qsps(self.pool, criteria)
        return self.queue

    def lookup(self, question_id: str) -> Optional[Question]:
        for q in self.pool:
            if q.id == question_id:
                return q
        for paper in self.queue:
            for q in paper.questions:
                if q.id == question_id:
                    return q
        return None

    def on_message(self, env: MessageEnvelope) -> None:
        if env.kind in ("D1", "D3", "D5"):
            reply = self.handshake.handle(ProtocolMessage.from_bytes(env.payload))
            self.collect_accepted()
            if reply is not None:
                self.network.send(self.node_id, env.sender, reply.type, reply.to_bytes())
        elif env.kind == "batch_ack":
            self._acked.add(int(env.payload.decode()))
        else:
            logger.info("question cloud ignoring %s from %s", env.kind, env.sender)

    def handover(self, qsps: List[QuestionPaper], master_id: str) -> None:
        """Ship a batch to the master and erase everything it contained.

        Nothing is erased unless the master acknowledges the batch.
        """
        if not qsps:
            raise ValueError("nothing to hand over")
        env = self.network.send(self.node_id, master_id, "qsp_batch", batch_to_bytes(qsps))
        self.network.run_until_quiescent()
        if env.msg_id not in self._acked:
            raise TransportError(f"batch {env.msg_id} not acknowledged by {master_id}")
        sent_ids = {q.id for p in qsps for q in p.questions}
        self.pool = [q for q in self.pool if q.id not in sent_ids]
        sent = {id(p) for p in qsps}
        self.queue = [p for p in self.queue
                      if id(p) not in sent and not sent_ids.intersection(q.id for q in p.questions)]
        counts = Counter(p.course_id for p in qsps)
        for course, n in sorted(counts.items()):
            self.tombstones.append(Tombstone(course, n, sum(len(p.questions) for p in qsps if p.course_id == course)))
