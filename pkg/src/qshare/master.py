"""Master node: two-phase encryption, contract escrow, selection and authorization.

Phase one seals each paper under the batch timestamp.  Phase two seals the
result again: paper 0 under the timestamp alone, paper ``i > 0`` under the
timestamp, the hashes of every earlier phase-two ciphertext (in index order)
and the batch salt.  A change to any paper therefore changes the keys, and
so the ciphertexts, of every later paper.

Selection picks two primes from a 10-entry pool using the last and
second-to-last decimal digits of a timestamp and returns
``((p_last - n) * p_second_last) mod n`` over the ``n`` non-excluded papers.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import crypto
from .chain import Chain, new_chain
from .model import QuestionPaper, batch_from_bytes, canonical_json
from .netsim import MessageEnvelope, Network

logger = logging.getLogger(__name__)

# primes > 10**6, all checked with Miller-Rabin and an external CAS
VETTED_PRIMES: Tuple[int, ...] = (
    7106069, 8432849, 10148891, 10381321, 12027179, 15486511, 17142407, 18190633,
    22200397, 24066347, 33329141, 35204317, 45200479, 55233127, 61814437, 64184069,
    64257143, 81008453, 109383349, 116422487, 117595963, 117618947, 124182011,
    137150743, 142784501, 144118511, 144386779, 148228669, 158867419, 163204087,
    169441247, 172345139, 172513867, 179424793, 179426549, 180955913, 183086999,
)

MIN_POOL_PRIME = 10 ** 6


class SelectionError(ValueError):
    pass


class NotificationTooEarly(RuntimeError):
    pass


# -- encryption pipeline -------------------------------------------------------


@dataclass(frozen=True)
class EncryptedQsp:
    index: int
    phase1: crypto.Ciphertext
    phase2: crypto.Ciphertext
    hash: bytes


@dataclass
class EncryptionBatch:
    tau_c: int
    salt: bytes
    hash_chain: List[bytes]
    qsps: List[EncryptedQsp]

    def __len__(self) -> int:
        return len(self.qsps)


def phase1_encrypt(qsps: Sequence[QuestionPaper], tau_c: int,
                   rng: Optional[random.Random] = None) -> List[crypto.Ciphertext]:
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    if not qsps:
        raise ValueError("no papers to encrypt")
    tau = crypto.ts_bytes(tau_c)
    return [crypto.sym_encrypt([tau], q.to_bytes() + tau, rng) for q in qsps]


def phase2_key_parts(tau_c: int, prior_hashes: Sequence[bytes], salt: bytes) -> List[bytes]:
    """Key material for the phase-two layer of the paper at ``len(prior_hashes)``."""
    tau = crypto.ts_bytes(tau_c)
    if not prior_hashes:
        return [tau]
    return [tau, *prior_hashes, salt]


def phase2_plaintext(phase1: crypto.Ciphertext, tau_c: int, prior_hashes: Sequence[bytes], salt: bytes) -> bytes:
    body = phase1.to_bytes() + crypto.ts_bytes(tau_c)
    if prior_hashes:
        body += b"".join(prior_hashes) + salt
    return body


def phase2_encrypt(phase1: Sequence[crypto.Ciphertext], tau_c: int, salt: bytes,
                   rng: Optional[random.Random] = None) -> EncryptionBatch:
    if len(salt) != crypto.SALT_LEN:
        raise ValueError("salt must be 32 bytes")
    hashes: List[bytes] = []
    out: List[EncryptedQsp] = []
    for i, ct1 in enumerate(phase1):
        parts = phase2_key_parts(tau_c, hashes, salt)
        ct2 = crypto.sym_encrypt(parts, phase2_plaintext(ct1, tau_c, hashes, salt), rng)
        digest = crypto.sha256(ct2.to_bytes())
        out.append(EncryptedQsp(i, ct1, ct2, digest))
        hashes.append(digest)
    return EncryptionBatch(tau_c, salt, hashes, out)


def build_blocks(batch: EncryptionBatch, difficulty: int = 8,
                 rng: Optional[random.Random] = None, creation_time: Optional[int] = None) -> Chain:
    created = batch.tau_c if creation_time is None else creation_time
    chain = new_chain(batch.tau_c, rng, difficulty, created)
    for q in batch.qsps:
        chain.append(q.phase2.to_bytes(), timestamp=batch.tau_c, creation_time=created)
    return chain


# -- smart contract ------------------------------------------------------------


@dataclass(frozen=True)
class SmartContract:
    exam_id: str
    title: str
    qsp_hashes: Tuple[bytes, ...]
    tau_c: int
    salt: bytes
    unlock_time: int

    @property
    def name(self) -> str:
        return f"exam_{self.exam_id}_{self.title}"

    def to_bytes(self) -> bytes:
        return canonical_json({
            "name": self.name,
            "exam_id": self.exam_id,
            "title": self.title,
            "qsp_hashes": [h.hex() for h in self.qsp_hashes],
            "tau_c": self.tau_c,
            "salt": self.salt.hex(),
            "unlock_time": self.unlock_time,
        })

    @classmethod
    def from_bytes(cls, data: bytes) -> "SmartContract":
        d = json.loads(data.decode("utf-8"))
        return cls(
            exam_id=d["exam_id"],
            title=d["title"],
            qsp_hashes=tuple(bytes.fromhex(h) for h in d["qsp_hashes"]),
            tau_c=int(d["tau_c"]),
            salt=bytes.fromhex(d["salt"]),
            unlock_time=int(d["unlock_time"]),
        )


@dataclass(frozen=True)
class EncryptedSmartContract:
    exam_id: str
    ciphertext: crypto.Ciphertext

    def to_bytes(self) -> bytes:
        return crypto.lp(self.exam_id.encode()) + self.ciphertext.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedSmartContract":
        exam_id, off = crypto.read_lp(data, 0)
        return cls(exam_id.decode(), crypto.Ciphertext.from_bytes(data[off:]))


def make_contract(batch: EncryptionBatch, exam_id: str, title: str, unlock_time: int) -> SmartContract:
    if not batch.qsps:
        raise ValueError("batch is empty")
    if unlock_time <= batch.tau_c:
        raise ValueError("unlock_time must come after the batch timestamp")
    return SmartContract(str(exam_id), title, tuple(batch.hash_chain), batch.tau_c, batch.salt, unlock_time)


def contract_key(tau_sm: int, salt_r: bytes) -> bytes:
    return crypto.derive_key([crypto.ts_bytes(tau_sm), salt_r])


def encrypt_contract(sm: SmartContract, tau_sm: int, salt_r: bytes,
                     rng: Optional[random.Random] = None) -> Tuple[EncryptedSmartContract, bytes]:
    """Seal the contract under a key derived from (tau_sm, salt_r); returns it with the key."""
    key = contract_key(tau_sm, salt_r)
    ct = crypto.sym_encrypt_with_key(key, sm.to_bytes() + key, rng)
    return EncryptedSmartContract(sm.exam_id, ct), key


# -- selection -------------------------------------------------------------


@dataclass(frozen=True)
class PrimePool:
    primes: Tuple[int, ...]

    def __post_init__(self):
        if len(self.primes) != 10:
            raise ValueError("prime pool needs exactly 10 primes")
        for p in self.primes:
            if p <= MIN_POOL_PRIME or not crypto.is_probable_prime(p):
                raise ValueError(f"{p} is not a prime above {MIN_POOL_PRIME}")

    def __getitem__(self, digit: int) -> int:
        return self.primes[digit]


def pick_primes(source: Sequence[int] = VETTED_PRIMES, rng: Optional[random.Random] = None,
                count: int = 10) -> PrimePool:
    """Uniform sample without replacement; position in the pool is the digit index."""
    if len(source) < count:
        raise ValueError(f"prime source has {len(source)} entries, need {count}")
    rng = rng or random.SystemRandom()
    return PrimePool(tuple(rng.sample(list(source), count)))


@dataclass(frozen=True)
class SelectionResult:
    tau: int
    d_last: int
    d_second_last: int
    p_l: int
    p_sl: int
    q_fn: int
    selected_index: int
    selected_hash: bytes

    def recompute(self) -> int:
        return ((self.p_l - self.q_fn) * self.p_sl) % self.q_fn

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "d_last": self.d_last,
            "d_second_last": self.d_second_last,
            "p_l": self.p_l,
            "p_sl": self.p_sl,
            "q_fn": self.q_fn,
            "selected_index": self.selected_index,
            "selected_hash": self.selected_hash.hex(),
        }


def selection_index(pool: PrimePool, tau: int, q_fn: int) -> int:
    p_l = pool[tau % 10]
    p_sl = pool[(tau // 10) % 10]
    return ((p_l - q_fn) * p_sl) % q_fn


def select_qsp(pool: PrimePool, tau: int, filtered: Sequence[bytes]) -> SelectionResult:
    if not filtered:
        raise SelectionError("no eligible QSP")
    if tau < 0:
        raise SelectionError("timestamp must be non-negative")
    q_fn = len(filtered)
    d_l, d_sl = tau % 10, (tau // 10) % 10
    idx = selection_index(pool, tau, q_fn)
    return SelectionResult(tau, d_l, d_sl, pool[d_l], pool[d_sl], q_fn, idx, bytes(filtered[idx]))


def filter_qsps(all_hashes: Sequence[bytes], excluded: Iterable[bytes]) -> List[bytes]:
    excluded = set(excluded)
    missing = excluded.difference(all_hashes)
    if missing:
        raise ValueError(f"{len(missing)} excluded hash(es) not in the registry")
    return [h for h in all_hashes if h not in excluded]


# -- node --------------------------------------------------------------------


class MinionStatus(str, Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"
    EXCLUDED = "excluded"


@dataclass
class MinionRecord:
    minion_id: str
    status: MinionStatus = MinionStatus.ACTIVE


@dataclass
class ExamState:
    exam_id: str
    title: str
    unlock_time: int
    chain_bytes: bytes
    enc_contract: EncryptedSmartContract
    key: bytes
    hashes: List[bytes]
    selection: Optional[SelectionResult] = None
    notified: bool = False


@dataclass(frozen=True)
class AuthDecision:
    allow: bool
    reason: str = ""


class Master:
    """Sole writer of the chain; serves selection notices and authorizations."""

    MAX_SHIPMENT_ATTEMPTS = 3

    def __init__(
        self,
        node_id: str,
        network: Network,
        rng: Optional[random.Random] = None,
        difficulty: int = 8,
        prime_pool: Optional[PrimePool] = None,
        notify_time: int = 0,
    ):
        self.node_id = node_id
        self.network = network
        self.clock: Callable[[], int] = network.now
        self.rng = rng or random.Random()
        self.difficulty = difficulty
        self.prime_pool = prime_pool or pick_primes(VETTED_PRIMES, self.rng)
        self.notify_time = notify_time
        self.minions: Dict[str, MinionRecord] = {}
        self.excluded_hashes: set = set()
        self.intake: List[List[QuestionPaper]] = []
        self.exam: Optional[ExamState] = None
        self.alerts: List[dict] = []
        self._acks: Dict[str, str] = {}
        network.register(node_id, self.on_message)

    # registry ----------------------------------------------------------------

    def register_minion(self, minion_id: str) -> None:
        self.minions[minion_id] = MinionRecord(minion_id)

    def active_minions(self) -> List[str]:
        return [m for m, r in self.minions.items() if r.status == MinionStatus.ACTIVE]

    def exclude_minion(self, minion_id: str) -> None:
        if minion_id in self.minions:
            self.minions[minion_id].status = MinionStatus.EXCLUDED

    @property
    def registry(self) -> List[bytes]:
        return list(self.exam.hashes) if self.exam else []

    def exclude_qsp(self, qsp_hash: bytes) -> None:
        if qsp_hash not in self.registry:
            raise KeyError("unknown QSP hash")
        self.excluded_hashes.add(qsp_hash)

    # preparation -------------------------------------------------------------

    def prepare_exam(self, papers: Sequence[QuestionPaper], exam_id: str, title: str, unlock_time: int) -> ExamState:
        """Encrypt a batch, build its chain and seal the contract.  Plaintext is not kept."""
        tau_c = self.clock()
        salt = crypto.new_salt(self.rng)
        p1 = phase1_encrypt(papers, tau_c, self.rng)
        batch = phase2_encrypt(p1, tau_c, salt, self.rng)
        chain = build_blocks(batch, self.difficulty, self.rng, creation_time=tau_c)
        sm = make_contract(batch, exam_id, title, unlock_time)
        tau_sm = self.clock()
        enc, key = encrypt_contract(sm, tau_sm, crypto.new_salt(self.rng), self.rng)
        self.exam = ExamState(str(exam_id), title, unlock_time, chain.to_bytes(), enc, key, list(batch.hash_chain))
        self.excluded_hashes = set()
        return self.exam

    def distribute(self) -> Dict[str, bool]:
        """Ship chain and contract to every active minion; failures mark them inactive."""
        report = {}
        for minion_id in list(self.minions):
            if self.minions[minion_id].status == MinionStatus.EXCLUDED:
                continue
            report[minion_id] = self._ship(minion_id)
            self.minions[minion_id].status = MinionStatus.ACTIVE if report[minion_id] else MinionStatus.INACTIVE
        return report

    def retry_inactive(self) -> Dict[str, bool]:
        report = {}
        for minion_id, rec in self.minions.items():
            if rec.status == MinionStatus.INACTIVE:
                report[minion_id] = self._ship(minion_id)
                if report[minion_id]:
                    rec.status = MinionStatus.ACTIVE
        return report

    def _ship(self, minion_id: str) -> bool:
        exam = self.exam
        for _ in range(self.MAX_SHIPMENT_ATTEMPTS):
            self._acks.pop(minion_id, None)
            self.network.send(self.node_id, minion_id, "contract_shipment", exam.enc_contract.to_bytes())
            self.network.send(self.node_id, minion_id, "chain_shipment", exam.chain_bytes)
            self.network.run_until_quiescent()
            outcome = self._acks.get(minion_id)
            if outcome == "ack":
                return True
            if outcome is None:
                return False
        return False

    # selection ---------------------------------------------------------------

    def filtered(self) -> List[bytes]:
        return filter_qsps(self.registry, self.excluded_hashes)

    def select(self, tau: Optional[int] = None) -> SelectionResult:
        tau = self.clock() if tau is None else tau
        self.exam.selection = select_qsp(self.prime_pool, tau, self.filtered())
        return self.exam.selection

    def notify_selection(self) -> List[str]:
        now = self.clock()
        if now < self.notify_time:
            raise NotificationTooEarly(f"notification allowed from {self.notify_time}, now {now}")
        exam = self.exam
        if exam.selection is None:
            self.select()
        notice = canonical_json({
            "exam_id": exam.exam_id,
            "selected_hash_hex": exam.selection.selected_hash.hex(),
            "contract_key_hex": exam.key.hex(),
            "unlock_time": exam.unlock_time,
        })
        targets = self.active_minions()
        for minion_id in targets:
            self.network.send(self.node_id, minion_id, "selection_notice", notice)
        exam.notified = True
        self.network.run_until_quiescent()
        return targets

    def authorize(self, minion_id: str, exam_id: str, now: int, qsp_hash: Optional[bytes] = None) -> AuthDecision:
        rec = self.minions.get(minion_id)
        if rec is None or rec.status == MinionStatus.EXCLUDED:
            return AuthDecision(False, "minion_excluded")
        exam = self.exam
        if exam is None or exam.exam_id != exam_id or not exam.notified or exam.selection is None:
            return AuthDecision(False, "not_selected")
        if qsp_hash is not None and qsp_hash != exam.selection.selected_hash:
            return AuthDecision(False, "not_selected")
        if now < exam.unlock_time:
            return AuthDecision(False, "too_early")
        return AuthDecision(True)

    # inbox -------------------------------------------------------------------

    def on_message(self, env: MessageEnvelope) -> None:
        if env.kind == "qsp_batch":
            self.intake.append(batch_from_bytes(env.payload))
            self.network.send(self.node_id, env.sender, "batch_ack", str(env.msg_id).encode())
        elif env.kind == "shipment_ack":
            self._acks[env.sender] = "ack"
        elif env.kind == "shipment_nack":
            self._acks[env.sender] = "nack"
        elif env.kind == "auth_request":
            req = json.loads(env.payload)
            qsp_hash = bytes.fromhex(req["qsp_hash_hex"]) if req.get("qsp_hash_hex") else None
            decision = self.authorize(env.sender, req["exam_id"], self.clock(), qsp_hash)
            reply = canonical_json({"request_id": req["request_id"], "allow": decision.allow,
                                    "reason": decision.reason})
            self.network.send(self.node_id, env.sender, "auth_response", reply)
        elif env.kind == "alert":
            alert = json.loads(env.payload)
            self.alerts.append(alert)
            if alert.get("event") in ("unauthorized_access", "chain_broken"):
                self.exclude_minion(env.sender)
            qsp_hex = alert.get("qsp_hash_hex")
            if qsp_hex and self.exam and bytes.fromhex(qsp_hex) in self.exam.hashes:
                self.excluded_hashes.add(bytes.fromhex(qsp_hex))
        else:
            logger.info("master ignoring %s from %s", env.kind, env.sender)
