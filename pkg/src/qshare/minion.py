"""Minion node: holds the chain and sealed contract, gates and performs decryption.

A request for the selected paper passes three gates in order:

1. local: the selection notice has arrived and its unlock time has passed.
   Failing here sends nothing anywhere.
2. remote: the master confirms the exam is unlocked for this minion.
3. chain: the stored chain still matches what was shipped, and the master
   confirms the specific paper hash.  A refusal at this stage is treated as
   an unauthorized access: the block's header is touched, the chain is
   re-mined, the master is alerted and the minion goes into the alarmed state.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

from . import crypto
from .chain import Chain
from .master import EncryptedSmartContract, SmartContract, phase2_key_parts
from .model import QuestionPaper, canonical_json
from .netsim import MessageEnvelope, Network

logger = logging.getLogger(__name__)


class DecryptionError(Exception):
    pass


class IntegrityError(DecryptionError):
    pass


class TamperedPayload(DecryptionError):
    pass


class UnknownQsp(DecryptionError):
    pass


class ShipmentRejected(Exception):
    pass


class AuthenticationFailed(Exception):
    pass


class AccessDenied(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Status(str, Enum):
    WAITING = "waiting"
    NOTIFIED = "notified"
    UNLOCKED = "unlocked"
    ALARMED = "alarmed"
    PURGED = "purged"


@dataclass(frozen=True)
class SessionToken:
    user_id: str
    token: bytes
    expires_at: int


@dataclass(frozen=True)
class SelectionNotice:
    exam_id: str
    selected_hash: bytes
    contract_key: bytes
    unlock_time: int

    @classmethod
    def from_bytes(cls, data: bytes) -> "SelectionNotice":
        d = json.loads(data)
        return cls(d["exam_id"], bytes.fromhex(d["selected_hash_hex"]),
                   bytes.fromhex(d["contract_key_hex"]), int(d["unlock_time"]))


def decrypt_contract(enc: EncryptedSmartContract, key: bytes) -> SmartContract:
    try:
        plain = crypto.sym_decrypt_with_key(key, enc.ciphertext)
    except (crypto.AuthenticationError, ValueError) as exc:
        raise DecryptionError("contract authentication failed") from exc
    body, embedded = plain[:-crypto.KEY_LEN], plain[-crypto.KEY_LEN:]
    if embedded != key:
        raise IntegrityError("embedded contract key does not match")
    return SmartContract.from_bytes(body)


def _strip(data: bytes, suffix: bytes, what: str) -> bytes:
    if not data.endswith(suffix):
        raise IntegrityError(f"embedded {what} does not match")
    return data[:len(data) - len(suffix)]


def decrypt_qsp(contract: SmartContract, selected_hash: bytes, chain: Chain) -> QuestionPaper:
    """Undo both encryption layers for the paper whose hash is ``selected_hash``."""
    try:
        i = contract.qsp_hashes.index(selected_hash)
    except ValueError:
        raise UnknownQsp("unknown QSP") from None
    if i + 1 >= len(chain.blocks):
        raise UnknownQsp("chain has no block for this QSP")
    payload = chain.blocks[i + 1].payload
    if crypto.sha256(payload) != selected_hash:
        raise TamperedPayload("tampered payload")
    prior = list(contract.qsp_hashes[:i])
    tau = crypto.ts_bytes(contract.tau_c)
    try:
        outer = crypto.sym_decrypt(phase2_key_parts(contract.tau_c, prior, contract.salt),
                                   crypto.Ciphertext.from_bytes(payload))
        if prior:
            outer = _strip(outer, tau + b"".join(prior) + contract.salt, "key material")
        else:
            outer = _strip(outer, tau, "timestamp")
        inner = crypto.sym_decrypt([tau], crypto.Ciphertext.from_bytes(outer))
    except (crypto.AuthenticationError, ValueError) as exc:
        raise DecryptionError(f"cannot decrypt QSP {i}") from exc
    return QuestionPaper.from_bytes(_strip(inner, tau, "timestamp"))


class Minion:
    def __init__(
        self,
        node_id: str,
        network: Network,
        master_id: str,
        rng: Optional[random.Random] = None,
        token_ttl: int = 3_600_000,
    ):
        self.node_id = node_id
        self.network = network
        self.master_id = master_id
        self.clock = network.now
        self.rng = rng or random.Random()
        self.token_ttl = token_ttl
        self.status = Status.WAITING
        self.chain: Optional[Chain] = None
        self.shipped_hashes: List[bytes] = []
        self.enc_contract: Optional[EncryptedSmartContract] = None
        self.selection: Optional[SelectionNotice] = None
        self.decrypted_qsp: Optional[QuestionPaper] = None
        self.audit: List[dict] = []
        self.user_alerts: List[str] = []
        self.stub: Optional[dict] = None
        self.exam_finished = False
        self.online = True
        self._outbox: List[tuple] = []
        self._users: Dict[str, bytes] = {}
        self._sessions: Dict[str, SessionToken] = {}
        self._pending_contract: Optional[bytes] = None
        self._responses: Dict[int, dict] = {}
        self._next_request = 1
        network.register(node_id, self.on_message)

    # bookkeeping ---------------------------------------------------------------

    def log(self, event: str, **detail) -> None:
        self.audit.append({"ts": self.clock(), "event": event, "detail": detail})

    def audit_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.audit)

    def _send(self, kind: str, payload: bytes) -> None:
        if self.online:
            self.network.send(self.node_id, self.master_id, kind, payload)
        else:
            self._outbox.append((kind, payload))

    def set_online(self, online: bool) -> None:
        self.online = online
        self.network.set_online(self.node_id, online)
        if online:
            while self._outbox:
                self.network.send(self.node_id, self.master_id, *self._outbox.pop(0))
            self.network.run_until_quiescent()

    def storage_bytes(self) -> int:
        total = 0
        if self.chain is not None:
            total += len(self.chain.to_bytes())
        if self.enc_contract is not None:
            total += len(self.enc_contract.to_bytes())
        if self.decrypted_qsp is not None:
            total += len(self.decrypted_qsp.to_bytes())
        if self.stub is not None:
            total += len(canonical_json(self.stub))
        return total

    # shipments -----------------------------------------------------------------

    def ingest(self, chain_bytes: bytes, contract_bytes: bytes) -> None:
        if self.status != Status.WAITING:
            raise ShipmentRejected(f"not accepting shipments in state {self.status.value}")
        try:
            chain = Chain.from_bytes(chain_bytes)
            enc = EncryptedSmartContract.from_bytes(contract_bytes)
        except ValueError as exc:
            raise ShipmentRejected(f"unreadable shipment: {exc}") from exc
        broken = chain.validate()
        if broken is not None:
            self.log("shipment_rejected", broken_at=broken)
            raise ShipmentRejected(f"chain broken at block {broken}")
        self.chain = chain
        self.shipped_hashes = chain.hashes()
        self.enc_contract = enc
        self.log("shipment_stored", blocks=len(chain), exam_id=enc.exam_id)

    def chain_intact(self) -> bool:
        return (self.chain is not None and self.chain.is_valid()
                and self.chain.hashes() == self.shipped_hashes)

    def on_selection_notice(self, notice: SelectionNotice) -> None:
        if self.enc_contract is None or notice.exam_id != self.enc_contract.exam_id:
            logger.warning("%s: notice for unknown exam %s ignored", self.node_id, notice.exam_id)
            self.log("notice_ignored", exam_id=notice.exam_id)
            return
        if self.selection == notice:
            return
        if self.status not in (Status.WAITING, Status.NOTIFIED):
            self.log("notice_ignored", exam_id=notice.exam_id, status=self.status.value)
            return
        self.selection = notice
        self.status = Status.NOTIFIED
        self.user_alerts.append(f"exam {notice.exam_id}: paper selected, unlocks at {notice.unlock_time}")
        self.log("selection_notified", exam_id=notice.exam_id, selected_hash=notice.selected_hash.hex())

    def on_message(self, env: MessageEnvelope) -> None:
        if env.kind == "contract_shipment":
            self._pending_contract = env.payload
        elif env.kind == "chain_shipment":
            try:
                if self._pending_contract is None:
                    raise ShipmentRejected("chain arrived without a contract")
                self.ingest(env.payload, self._pending_contract)
            except ShipmentRejected as exc:
                logger.info("%s rejected shipment: %s", self.node_id, exc)
                self._send("shipment_nack", str(exc).encode())
            else:
                self._send("shipment_ack", b"ok")
        elif env.kind == "selection_notice":
            self.on_selection_notice(SelectionNotice.from_bytes(env.payload))
        elif env.kind == "auth_response":
            resp = json.loads(env.payload)
            self._responses[int(resp["request_id"])] = resp
        else:
            logger.info("%s ignoring %s", self.node_id, env.kind)

    # users ---------------------------------------------------------------------

    def register_user(self, user_id: str, pw: bytes) -> None:
        self._users[user_id] = crypto.make_signature(user_id.encode(), pw)

    def login(self, user_id: str, pw: bytes, now: Optional[int] = None) -> SessionToken:
        now = self.clock() if now is None else now
        stored = self._users.get(user_id)
        if stored is None or not pw or stored != crypto.make_signature(user_id.encode(), pw):
            self.log("login_failed", user_id=user_id)
            raise AuthenticationFailed("unknown user or wrong password")
        tok = SessionToken(user_id, crypto.random_bytes(16, self.rng), now + self.token_ttl)
        self._sessions[user_id] = tok
        return tok

    def _check_token(self, token: SessionToken, now: int) -> None:
        current = self._sessions.get(token.user_id)
        if current is None or current.token != token.token:
            raise AccessDenied("unauthenticated")
        if now >= current.expires_at:
            raise AccessDenied("session_expired")

    # serving -------------------------------------------------------------------

    def _ask_master(self, exam_id: str, stage: str, qsp_hash: Optional[bytes] = None) -> dict:
        rid = self._next_request
        self._next_request += 1
        req = {"request_id": rid, "exam_id": exam_id, "stage": stage,
               "qsp_hash_hex": qsp_hash.hex() if qsp_hash else None}
        if not self.online:
            return {"allow": False, "reason": "master_unreachable"}
        self.network.send(self.node_id, self.master_id, "auth_request", canonical_json(req))
        self.network.run_until_quiescent()
        return self._responses.pop(rid, {"allow": False, "reason": "master_unreachable"})

    def request_qsp(self, token: SessionToken, exam_id: str, now: Optional[int] = None,
                    qsp_hash: Optional[bytes] = None) -> QuestionPaper:
        """Serve the selected paper or raise :class:`AccessDenied`.

        ``qsp_hash`` defaults to the hash named in the selection notice.
        """
        now = self.clock() if now is None else now
        if self.status == Status.PURGED:
            raise AccessDenied("purged")
        self._check_token(token, now)

        # local gate: no traffic at all before the unlock time
        if self.selection is None or self.selection.exam_id != exam_id or now < self.selection.unlock_time:
            self.log("request_denied", reason="too_early", user_id=token.user_id)
            raise AccessDenied("too_early")

        answer = self._ask_master(exam_id, "scm")
        if not answer["allow"]:
            self.log("request_denied", reason=answer["reason"], user_id=token.user_id)
            raise AccessDenied(answer["reason"])

        target = self.selection.selected_hash if qsp_hash is None else qsp_hash
        if not self.chain_intact():
            self.log("request_denied", reason="chain_broken", user_id=token.user_id)
            self._raise_alarm("chain_broken", None, target)
            raise AccessDenied("chain_broken")
        answer = self._ask_master(exam_id, "chain", target)
        if not answer["allow"]:
            self.handle_unauthorized({"user_id": token.user_id, "qsp_hash": target}, now)
            raise AccessDenied(answer["reason"])

        if self.decrypted_qsp is None or target != self.selection.selected_hash:
            try:
                contract = decrypt_contract(self.enc_contract, self.selection.contract_key)
                paper = decrypt_qsp(contract, target, self.chain)
            except TamperedPayload:
                raise AccessDenied("tampered_payload") from None
            except DecryptionError:
                raise AccessDenied("decryption_failed") from None
            self.decrypted_qsp = paper
            self.status = Status.UNLOCKED
            self.log("qsp_unlocked", user_id=token.user_id, qsp_hash=target.hex())
        return self.decrypted_qsp

    def block_index_of(self, qsp_hash: bytes) -> Optional[int]:
        """Chain index of the block carrying ``qsp_hash`` (genesis is 0)."""
        for i, block in enumerate(self.chain.blocks[1:], start=1):
            if crypto.sha256(block.payload) == qsp_hash:
                return i
        return None

    def handle_unauthorized(self, request_meta: dict, now: Optional[int] = None) -> None:
        """Touch the targeted block, re-mine, alert the master and stop serving.

        Payload bytes are left intact for forensics.
        """
        now = self.clock() if now is None else now
        qsp_hash = request_meta.get("qsp_hash")
        index = request_meta.get("block_index")
        if index is None:
            index = self.block_index_of(qsp_hash) if qsp_hash else None
        if index is None:
            index = 1 if len(self.chain.blocks) > 1 else 0
        self.chain.touch_unauthorized(index, now, self.rng)
        self.chain.remine()
        self._raise_alarm("unauthorized_access", index, crypto.sha256(self.chain.blocks[index].payload)
                          if index > 0 else None)

    def _raise_alarm(self, event: str, index: Optional[int], qsp_hash: Optional[bytes]) -> None:
        self.status = Status.ALARMED
        self.decrypted_qsp = None
        self.log("alarm", kind=event, block_index=index)
        alert = {"event": event, "block_index": index, "at": self.clock(),
                 "qsp_hash_hex": qsp_hash.hex() if qsp_hash else None}
        self._send("alert", canonical_json(alert))
        if self.online:
            self.network.run_until_quiescent()

    def raw_access(self, block_index: int, now: Optional[int] = None) -> bytes:
        """Direct read of a stored block, bypassing every gate.

        The monitor notices and treats it as an unauthorized access.
        """
        payload = self.chain.blocks[block_index].payload
        self.handle_unauthorized({"block_index": block_index}, now)
        return payload

    def report_compromised(self, qsp_hash: bytes) -> None:
        alert = {"event": "qsp_compromised", "block_index": None, "at": self.clock(),
                 "qsp_hash_hex": qsp_hash.hex()}
        self._send("alert", canonical_json(alert))
        if self.online:
            self.network.run_until_quiescent()

    # end of exam ----------------------------------------------------------------

    def finish_exam(self) -> None:
        self.exam_finished = True

    def purge(self, now: Optional[int] = None) -> None:
        now = self.clock() if now is None else now
        if not self.exam_finished:
            raise RuntimeError("exam not finished; refusing to purge")
        self.stub = {
            "exam_id": self.enc_contract.exam_id if self.enc_contract else None,
            "block_hashes": [h.hex() for h in self.shipped_hashes],
            "selected_hash": self.selection.selected_hash.hex() if self.selection else None,
            "unlock_time": self.selection.unlock_time if self.selection else None,
            "purged_at": now,
        }
        self.chain = None
        self.enc_contract = None
        self.decrypted_qsp = None
        self._pending_contract = None
        self.status = Status.PURGED
        self.log("purged")
