"""Deterministic in-process message bus standing in for the blockchain cloud.

Virtual time advances in integer ticks.  A message sent at tick ``t`` over a
link with ``delay`` d is delivered at tick ``t + 1 + d``.  Handlers run one at
a time in (due tick, send order) order, so per-link FIFO holds whenever drops
and duplicates are off.  Every send is written to the transcript exactly once,
before any tamper hook touches the payload.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

KINDS = frozenset({
    "D1", "D2", "D3", "D4", "D5", "FAIL",
    "qsp_batch", "batch_ack",
    "chain_shipment", "contract_shipment", "shipment_ack", "shipment_nack",
    "selection_notice", "auth_request", "auth_response", "alert",
})


class NetworkError(Exception):
    pass


class SimulationTimeout(NetworkError):
    def __init__(self, ticks: int, in_flight: List["MessageEnvelope"]):
        self.in_flight = in_flight
        dump = ", ".join(f"{e.msg_id}:{e.sender}->{e.receiver}:{e.kind}" for e in in_flight)
        super().__init__(f"still {len(in_flight)} message(s) in flight after {ticks} ticks: {dump}")


@dataclass(frozen=True)
class MessageEnvelope:
    msg_id: int
    sender: str
    receiver: str
    kind: str
    payload: bytes
    sent_at: int

    def to_json(self) -> dict:
        return {
            "msg_id": self.msg_id,
            "sender": self.sender,
            "receiver": self.receiver,
            "kind": self.kind,
            "payload_hex": self.payload.hex(),
            "sent_at": self.sent_at,
        }


@dataclass
class LinkPolicy:
    delay: int = 0
    drop_prob: float = 0.0
    duplicate_prob: float = 0.0
    tamper_hook: Optional[Callable[[MessageEnvelope], bytes]] = None
    eavesdropper: Optional[Callable[[MessageEnvelope], None]] = None

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        for p in (self.drop_prob, self.duplicate_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


Handler = Callable[[MessageEnvelope], None]


@dataclass
class Network:
    seed: int = 0
    epoch_ms: int = 0
    default_policy: LinkPolicy = field(default_factory=LinkPolicy)

    def __post_init__(self):
        self.tick = 0
        self.rng = random.Random(f"netsim:{self.seed}")
        self._handlers: Dict[str, Handler] = {}
        self._offline: set = set()
        self._links: Dict[Tuple[str, str], LinkPolicy] = {}
        self._queue: list = []
        self._seq = 0
        self._next_id = 1
        self.transcript: List[dict] = []

    # -- topology -----------------------------------------------------------

    def register(self, node_id: str, inbox: Handler) -> None:
        if node_id in self._handlers:
            raise NetworkError(f"node {node_id!r} already registered")
        self._handlers[node_id] = inbox

    def set_online(self, node_id: str, online: bool) -> None:
        if online:
            self._offline.discard(node_id)
        else:
            self._offline.add(node_id)

    def is_online(self, node_id: str) -> bool:
        return node_id in self._handlers and node_id not in self._offline

    def set_link(self, sender: str, receiver: str, policy: LinkPolicy) -> None:
        self._links[(sender, receiver)] = policy

    def clear_link(self, sender: str, receiver: str) -> None:
        self._links.pop((sender, receiver), None)

    def policy(self, sender: str, receiver: str) -> LinkPolicy:
        return self._links.get((sender, receiver), self.default_policy)

    # -- clock --------------------------------------------------------------

    def now(self) -> int:
        """Current virtual time as a millisecond timestamp."""
        return self.epoch_ms + self.tick

    def advance_to(self, tick: int) -> None:
        """Move the clock forward, delivering anything that falls due on the way."""
        if tick < self.tick:
            raise ValueError("cannot move the clock backwards")
        while self._queue and self._queue[0][0] <= tick:
            self._step()
        self.tick = tick

    # -- traffic ------------------------------------------------------------

    def send(self, sender: str, receiver: str, kind: str, payload: bytes) -> MessageEnvelope:
        if sender not in self._handlers:
            raise NetworkError(f"sender {sender!r} not registered")
        if kind not in KINDS:
            raise NetworkError(f"unknown message kind {kind!r}")
        env = MessageEnvelope(self._next_id, sender, receiver, kind, bytes(payload), self.tick)
        self._next_id += 1
        pol = self.policy(sender, receiver)
        record = env.to_json()
        if pol.eavesdropper is not None:
            pol.eavesdropper(env)

        if receiver not in self._handlers:
            record["fate"] = "undeliverable"
            self.transcript.append(record)
            return env
        if pol.drop_prob and self.rng.random() < pol.drop_prob:
            record["fate"] = "dropped"
            self.transcript.append(record)
            return env
        copies = 1
        if pol.duplicate_prob and self.rng.random() < pol.duplicate_prob:
            copies = 2
        delivered = env
        if pol.tamper_hook is not None:
            new_payload = pol.tamper_hook(env)
            if new_payload != env.payload:
                record["tampered"] = True
                delivered = MessageEnvelope(env.msg_id, sender, receiver, kind, bytes(new_payload), env.sent_at)
        record["fate"] = "scheduled" if copies == 1 else "duplicated"
        self.transcript.append(record)
        due = self.tick + 1 + pol.delay
        for _ in range(copies):
            heapq.heappush(self._queue, (due, self._seq, delivered))
            self._seq += 1
        return env

    def in_flight(self) -> List[MessageEnvelope]:
        return [item[2] for item in sorted(self._queue)]

    def _step(self) -> None:
        due, _, env = heapq.heappop(self._queue)
        self.tick = max(self.tick, due)
        if env.receiver in self._offline:
            self.transcript.append({"msg_id": env.msg_id, "receiver": env.receiver, "fate": "lost_offline",
                                    "at": self.tick})
            return
        self._handlers[env.receiver](env)

    def run_until_quiescent(self, max_ticks: int = 100_000) -> int:
        """Deliver until nothing is in flight; returns the number of ticks advanced."""
        start = self.tick
        limit = start + max_ticks
        while self._queue:
            if self._queue[0][0] > limit:
                self.tick = limit
                raise SimulationTimeout(max_ticks, self.in_flight())
            self._step()
        return self.tick - start

    # -- export -------------------------------------------------------------

    def transcript_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.transcript)

    def transcript_digest(self) -> str:
        return hashlib.sha256(self.transcript_jsonl().encode()).hexdigest()

    def sent_by(self, node_id: str, since_msg_id: int = 0) -> List[dict]:
        return [r for r in self.transcript
                if r.get("sender") == node_id and r["msg_id"] > since_msg_id]

    @property
    def last_msg_id(self) -> int:
        return self._next_id - 1
