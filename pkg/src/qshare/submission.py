"""Five-message handshake between a question setter and the question cloud.

::

    setter                                   cloud
      D1 (eta, QT)                 ------>   issue one-time key pair
      D2 (eta+1, public key)       <------
      D3 (eta+2, seal(QT|PW))      ------>   check credentials
      D4 (eta+3, success token)    <------
      D5 (eta+4, seal(enc_sig(Q))) ------>   unwrap, check signature, drop key pair

Messages travel as JSON ``{type, session_id, nonce, body_hex}`` with an
optional ``token_hex`` (the D4 token echoed in D5) and ``reason`` (FAIL).
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence

from . import crypto
from .model import QuestionSubmission

logger = logging.getLogger(__name__)

TOKEN_LEN = 16


class HandshakeError(Exception):
    pass


class UnknownSession(HandshakeError):
    pass


class ForgedSender(HandshakeError):
    pass


class DeadlinePassed(HandshakeError):
    pass


class Phase(str, Enum):
    AWAITING_KEY = "awaiting_key"
    AWAITING_CREDENTIALS = "awaiting_credentials"
    AWAITING_TOKEN = "awaiting_token"
    AWAITING_QUESTIONS = "awaiting_questions"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class Credential:
    qt: bytes
    pw: bytes

    def __post_init__(self):
        if not self.qt or not self.pw:
            raise ValueError("token and password must be non-empty")


@dataclass(frozen=True)
class ProtocolMessage:
    type: str
    session_id: str
    nonce: int
    body: bytes = b""
    token: Optional[bytes] = None
    reason: Optional[str] = None

    def to_bytes(self) -> bytes:
        d = {"type": self.type, "session_id": self.session_id, "nonce": self.nonce, "body_hex": self.body.hex()}
        if self.token is not None:
            d["token_hex"] = self.token.hex()
        if self.reason is not None:
            d["reason"] = self.reason
        return json.dumps(d, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProtocolMessage":
        try:
            d = json.loads(data.decode("utf-8"))
            return cls(
                type=d["type"],
                session_id=d["session_id"],
                nonce=int(d["nonce"]),
                body=bytes.fromhex(d["body_hex"]),
                token=bytes.fromhex(d["token_hex"]) if "token_hex" in d else None,
                reason=d.get("reason"),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise HandshakeError(f"malformed message: {exc}") from exc


def _pack_credentials(cred: Credential) -> bytes:
    return crypto.lp(cred.qt) + crypto.lp(cred.pw)


def _unpack_credentials(data: bytes) -> Credential:
    qt, off = crypto.read_lp(data, 0)
    pw, off = crypto.read_lp(data, off)
    if off != len(data):
        raise ValueError("trailing bytes in credentials")
    return Credential(qt, pw)


# -- setter side -------------------------------------------------------------


@dataclass
class SetterSession:
    """Question-setter end of one handshake."""

    credential: Credential
    rng: random.Random = field(default_factory=random.Random)
    session_id: str = ""
    eta: int = 0
    phase: Phase = Phase.AWAITING_KEY
    public_key: Optional[bytes] = None
    token: Optional[bytes] = None

    def begin(self, eta: Optional[int] = None) -> ProtocolMessage:
        self.eta = self.rng.getrandbits(64) if eta is None else eta
        if not self.session_id:
            self.session_id = self.rng.randbytes(8).hex()
        self.phase = Phase.AWAITING_KEY
        return ProtocolMessage("D1", self.session_id, self.eta, self.credential.qt)

    def _expect(self, msg: ProtocolMessage, kind: str, offset: int, phase: Phase) -> None:
        ok = (msg.type == kind and msg.session_id == self.session_id
              and msg.nonce == self.eta + offset and self.phase == phase)
        if not ok:
            self.phase = Phase.FAILED
            reason = msg.reason if msg.type == "FAIL" else f"unexpected {msg.type}"
            raise HandshakeError(f"session {self.session_id}: {reason}")

    def send_credentials(self, d2: ProtocolMessage) -> ProtocolMessage:
        self._expect(d2, "D2", 1, Phase.AWAITING_KEY)
        self.public_key = d2.body
        box = crypto.asym_encrypt(self.public_key, _pack_credentials(self.credential), self.rng)
        self.phase = Phase.AWAITING_TOKEN
        return ProtocolMessage("D3", self.session_id, self.eta + 2, box.to_bytes())

    def accept_token(self, d4: ProtocolMessage) -> None:
        self._expect(d4, "D4", 3, Phase.AWAITING_TOKEN)
        self.token = d4.body
        self.phase = Phase.AWAITING_QUESTIONS

    def send_questions(self, d4: Optional[ProtocolMessage], submission: QuestionSubmission) -> ProtocolMessage:
        if d4 is not None:
            if self.phase != Phase.AWAITING_TOKEN:
                raise HandshakeError("session not authenticated")
            self.accept_token(d4)
        if self.phase != Phase.AWAITING_QUESTIONS or self.token is None:
            raise HandshakeError("session not authenticated")
        sig = crypto.make_signature(self.credential.qt, self.credential.pw)
        inner = crypto.sym_encrypt([sig], submission.to_bytes(), self.rng)
        box = crypto.asym_encrypt(self.public_key, inner.to_bytes(), self.rng)
        self.phase = Phase.DONE
        return ProtocolMessage("D5", self.session_id, self.eta + 4, box.to_bytes(), token=self.token)


# -- cloud side ----------------------------------------------------------------


@dataclass
class CloudSession:
    session_id: str
    qt: bytes
    eta: int
    phase: Phase
    otak: Optional[crypto.OtakKeyPair] = None
    token: Optional[bytes] = None


class HandshakeServer:
    """Question-cloud end: issues one-time keys and accepts signed submissions.

    Credentials are held only as derived signatures, which double as the
    inner-layer key for D5.
    """

    def __init__(
        self,
        primes: Sequence[int],
        clock: Callable[[], int],
        rng: Optional[random.Random] = None,
        deadline: Optional[int] = None,
    ):
        if not primes:
            raise ValueError("need at least one prime")
        self.primes = list(primes)
        self.clock = clock
        self.rng = rng or random.Random()
        self.deadline = deadline
        self._signatures: Dict[bytes, bytes] = {}
        self.sessions: Dict[str, CloudSession] = {}
        self.accepted: List[QuestionSubmission] = []

    def register_setter(self, qt: bytes, pw: bytes) -> None:
        if qt in self._signatures:
            raise ValueError("questionnaire token already registered")
        self._signatures[qt] = crypto.make_signature(qt, pw)

    def _fail(self, session: Optional[CloudSession], sid: str, nonce: int, reason: str) -> ProtocolMessage:
        if session is not None:
            session.phase = Phase.FAILED
            session.otak = None
        logger.info("session %s failed: %s", sid, reason)
        return ProtocolMessage("FAIL", sid, nonce, reason=reason)

    def issue_otak(self, d1: ProtocolMessage) -> ProtocolMessage:
        if d1.type != "D1" or not d1.body or not d1.session_id:
            return self._fail(None, d1.session_id, d1.nonce, "malformed D1")
        if d1.session_id in self.sessions:
            return self._fail(None, d1.session_id, d1.nonce, "unknown session")
        rho = self.rng.choice(self.primes)
        salt = crypto.new_salt(self.rng)
        otak = crypto.generate_otak(d1.nonce, rho, self.clock(), d1.body, salt)
        self.sessions[d1.session_id] = CloudSession(
            d1.session_id, d1.body, d1.nonce, Phase.AWAITING_CREDENTIALS, otak=otak)
        return ProtocolMessage("D2", d1.session_id, d1.nonce + 1, otak.public_bytes())

    def _session(self, msg: ProtocolMessage, kind: str, offset: int, phase: Phase) -> CloudSession:
        session = self.sessions.get(msg.session_id)
        if session is None or session.otak is None:
            raise UnknownSession("unknown session")
        if msg.type != kind or msg.nonce != session.eta + offset or session.phase != phase:
            self._fail(session, msg.session_id, msg.nonce, f"out-of-order {msg.type}")
            raise HandshakeError(f"out-of-order {msg.type}")
        return session

    def verify_credentials(self, d3: ProtocolMessage) -> ProtocolMessage:
        try:
            session = self._session(d3, "D3", 2, Phase.AWAITING_CREDENTIALS)
        except HandshakeError as exc:
            return ProtocolMessage("FAIL", d3.session_id, d3.nonce, reason=str(exc))
        try:
            cred = _unpack_credentials(crypto.asym_decrypt(session.otak, crypto.SealedBox.from_bytes(d3.body)))
        except (crypto.CryptoError, ValueError):
            return self._fail(session, d3.session_id, d3.nonce, "decryption failed")
        stored = self._signatures.get(cred.qt)
        if cred.qt != session.qt or stored is None or stored != crypto.make_signature(cred.qt, cred.pw):
            return self._fail(session, d3.session_id, d3.nonce, "invalid credentials")
        session.token = crypto.random_bytes(TOKEN_LEN, self.rng)
        session.phase = Phase.AWAITING_QUESTIONS
        return ProtocolMessage("D4", d3.session_id, session.eta + 3, session.token)

    def receive_questions(self, d5: ProtocolMessage) -> QuestionSubmission:
        session = self._session(d5, "D5", 4, Phase.AWAITING_QUESTIONS)
        if d5.token is None or d5.token != session.token:
            self._fail(session, d5.session_id, d5.nonce, "token mismatch")
            raise HandshakeError("token mismatch")
        if self.deadline is not None and self.clock() > self.deadline:
            raise DeadlinePassed("deadline passed")
        try:
            inner = crypto.asym_decrypt(session.otak, crypto.SealedBox.from_bytes(d5.body))
        except (crypto.CryptoError, ValueError) as exc:
            self._fail(session, d5.session_id, d5.nonce, "decryption failed")
            raise HandshakeError("decryption failed") from exc
        sig = self._signatures[session.qt]
        try:
            submission = QuestionSubmission.from_bytes(
                crypto.sym_decrypt([sig], crypto.Ciphertext.from_bytes(inner)))
        except (crypto.CryptoError, ValueError) as exc:
            # the session survives so the genuine setter can still submit
            raise ForgedSender("forged sender") from exc
        if submission.setter_qt != session.qt:
            raise ForgedSender("forged sender")
        session.otak = None
        session.phase = Phase.DONE
        self.accepted.append(submission)
        return submission

    def handle(self, msg: ProtocolMessage) -> Optional[ProtocolMessage]:
        """Dispatch one inbound message; returns the reply, if any."""
        if msg.type == "D1":
            return self.issue_otak(msg)
        if msg.type == "D3":
            return self.verify_credentials(msg)
        if msg.type == "D5":
            try:
                self.receive_questions(msg)
            except HandshakeError as exc:
                return ProtocolMessage("FAIL", msg.session_id, msg.nonce, reason=str(exc))
            return None
        return ProtocolMessage("FAIL", msg.session_id, msg.nonce, reason=f"unexpected {msg.type}")
