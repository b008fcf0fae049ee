"""End-to-end exam cycle over the simulated network, with optional attacks.

All times in a :class:`ScenarioConfig` are virtual ticks; node clocks read
``epoch_ms + tick``.  Every random choice comes from generators seeded off
``config.seed``, so equal configs give byte-identical transcripts and reports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from . import crypto
from .master import VETTED_PRIMES, Master, MinionStatus, PrimePool, pick_primes
from .minion import AccessDenied, Minion, Status
from .model import Question, QuestionSubmission
from .netsim import LinkPolicy, MessageEnvelope, Network
from .qcloud import FilterCriteria, QuestionCloud
from .submission import Credential, HandshakeServer, ProtocolMessage, SetterSession

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("eavesdrop", "premature_access", "block_tamper", "forged_sender", "compromise_qsp")
QC_ID = "qc"
MASTER_ID = "master"


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    exam_id: str = "101"
    title: str = "final"
    n_minions: int = 3
    n_qsps: int = 50
    n_setters: int = 2
    difficulty: int = 8
    unlock_time: int = 1200
    notify_time: int = 1000
    seed: int = 0
    attacks: List[Dict[str, Any]] = field(default_factory=list)
    course_id: str = "CSE-101"
    questions_per_setter: int = 10
    questions_per_paper: int = 5
    epoch_ms: int = 1_515_552_555_000
    submission_deadline: Optional[int] = None
    token_ttl: int = 3_600_000
    prime_pool: Optional[List[int]] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def validate(self) -> None:
        problems = []
        for name in ("n_minions", "n_qsps", "n_setters", "questions_per_setter", "questions_per_paper"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                problems.append(f"{name} must be an integer >= 1 (got {v!r})")
        if not isinstance(self.difficulty, int) or not 0 <= self.difficulty <= 24:
            problems.append("difficulty must be an integer in [0, 24]")
        if self.notify_time > self.unlock_time:
            problems.append("notify_time must not be after unlock_time")
        if self.notify_time < 0:
            problems.append("notify_time must be >= 0")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            problems.append("seed must be a 64-bit unsigned integer")
        if self.n_setters * self.questions_per_setter < self.questions_per_paper:
            problems.append("not enough submitted questions to fill one paper")
        if self.prime_pool is not None and len(self.prime_pool) != 10:
            problems.append("prime_pool must list exactly 10 primes")
        for a in self.attacks:
            if not isinstance(a, dict) or a.get("kind") not in ATTACK_KINDS:
                problems.append(f"unknown attack {a!r}; kinds are {', '.join(ATTACK_KINDS)}")
        if problems:
            raise ConfigError("; ".join(problems))

    def attack(self, kind: str) -> Optional[dict]:
        for a in self.attacks:
            if a.get("kind") == kind:
                return dict(a.get("params") or {})
        return None


class SetterNode:
    """Network adapter that drives one :class:`SetterSession` from its inbox."""

    def __init__(self, node_id: str, network: Network, session: SetterSession,
                 submission: QuestionSubmission, hold_questions: bool = False):
        self.node_id = node_id
        self.network = network
        self.session = session
        self.submission = submission
        self.hold_questions = hold_questions
        self.failures: List[str] = []
        self.held_d4: Optional[ProtocolMessage] = None
        network.register(node_id, self.on_message)

    def start(self) -> None:
        self._send(self.session.begin())

    def _send(self, msg: ProtocolMessage) -> None:
        self.network.send(self.node_id, QC_ID, msg.type, msg.to_bytes())

    def on_message(self, env: MessageEnvelope) -> None:
        msg = ProtocolMessage.from_bytes(env.payload)
        if msg.type == "FAIL":
            self.failures.append(msg.reason or "failed")
        elif msg.type == "D2":
            self._send(self.session.send_credentials(msg))
        elif msg.type == "D4":
            if self.hold_questions:
                self.session.accept_token(msg)
                self.held_d4 = msg
            else:
                self._send(self.session.send_questions(msg, self.submission))

    def release(self) -> None:
        self._send(self.session.send_questions(None, self.submission))


class _Adversary:
    def __init__(self, network: Network, node_id: str = "adversary"):
        self.node_id = node_id
        self.captured: List[MessageEnvelope] = []
        self.replies: List[ProtocolMessage] = []
        network.register(node_id, self.on_message)

    def sink(self, env: MessageEnvelope) -> None:
        self.captured.append(env)

    def on_message(self, env: MessageEnvelope) -> None:
        self.replies.append(ProtocolMessage.from_bytes(env.payload))

    def messages(self, kind: str) -> List[ProtocolMessage]:
        return [ProtocolMessage.from_bytes(e.payload) for e in self.captured if e.kind == kind]


def _rng(seed: int, name: str) -> random.Random:
    return random.Random(f"{seed}:{name}")


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class ScenarioResult:
    report: dict
    network: Network
    master: Master
    minions: List[Minion]
    qc: QuestionCloud

    @property
    def ok(self) -> bool:
        return self.report["ok"]


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    cfg.validate()
    seed = cfg.seed
    net = Network(seed=seed, epoch_ms=cfg.epoch_ms)
    checks: Dict[str, bool] = {}
    attacks: List[dict] = []
    at = lambda tick: cfg.epoch_ms + tick  # noqa: E731

    # -- nodes ----------------------------------------------------------------
    deadline = at(cfg.submission_deadline) if cfg.submission_deadline is not None else None
    server = HandshakeServer(VETTED_PRIMES, net.now, _rng(seed, "qc"), deadline)
    qc = QuestionCloud(QC_ID, server, net)
    pool = PrimePool(tuple(cfg.prime_pool)) if cfg.prime_pool else pick_primes(VETTED_PRIMES, _rng(seed, "primes"))
    master = Master(MASTER_ID, net, _rng(seed, "master"), cfg.difficulty, pool, notify_time=at(cfg.notify_time))
    minions = []
    for i in range(cfg.n_minions):
        m = Minion(f"minion-{i}", net, MASTER_ID, _rng(seed, f"minion-{i}"), token_ttl=cfg.token_ttl)
        m.register_user(f"proctor-{i}", f"pw-{i}".encode())
        master.register_minion(m.node_id)
        minions.append(m)

    eaves = cfg.attack("eavesdrop")
    forged = cfg.attack("forged_sender")
    adversary = _Adversary(net) if (eaves is not None or forged is not None) else None

    # -- submission -----------------------------------------------------------
    setter_rng = _rng(seed, "setters")
    setters = []
    credentials = []
    for s in range(cfg.n_setters):
        cred = Credential(f"QT-{s}".encode(), setter_rng.randbytes(12).hex().encode())
        server.register_setter(cred.qt, cred.pw)
        credentials.append(cred)
        questions = tuple(
            Question(f"s{s}-q{j}", cfg.course_id, f"Question {j} from setter {s}:  explain topic {setter_rng.randrange(1000)}.",
                     weight=setter_rng.randint(1, 3))
            for j in range(cfg.questions_per_setter))
        session = SetterSession(cred, _rng(seed, f"setter-{s}"))
        node = SetterNode(f"setter-{s}", net, session, QuestionSubmission(cred.qt, questions),
                          hold_questions=(forged is not None and s == 0))
        setters.append(node)
    if adversary is not None:
        net.set_link("setter-0", QC_ID, LinkPolicy(eavesdropper=adversary.sink))
        net.set_link(QC_ID, "setter-0", LinkPolicy(eavesdropper=adversary.sink))
    for node in setters:
        node.start()
    net.run_until_quiescent()

    if forged is not None:
        attacks.append(_forged_sender(net, adversary, setters[0], forged))
    checks["submission_all_accepted"] = all(not n.failures for n in setters) and all(
        n.session.phase.value == "done" for n in setters)
    if eaves is not None:
        attacks.append(_eavesdrop(adversary, credentials[0], eaves))

    # -- question cloud -------------------------------------------------------
    criteria = FilterCriteria(cfg.course_id, cfg.n_qsps, cfg.questions_per_paper, rng_seed=seed)
    papers = qc.prepare(criteria, format_seed=seed)
    plaintexts = [p.to_bytes() for p in papers]
    qc.handover(papers, MASTER_ID)
    checks["handover_erased"] = all(qc.lookup(q.id) is None for p in papers for q in p.questions)

    # -- master -----------------------------------------------------------------
    exam = master.prepare_exam(master.intake[-1], cfg.exam_id, cfg.title, at(cfg.unlock_time))
    tamper = cfg.attack("block_tamper")
    if tamper is not None:
        _arm_transit_tamper(net, minions[int(tamper.get("minion", 0)) % len(minions)].node_id)
    delivery = master.distribute()
    checks["distribution_complete"] = all(delivery.values())
    if tamper is not None:
        attacks.append(_block_tamper_verdict(net, minions[int(tamper.get("minion", 0)) % len(minions)]))

    premature = cfg.attack("premature_access")
    if premature is not None:
        attacks.append(_premature_access(net, master, minions, premature))
    compromise = cfg.attack("compromise_qsp")
    compromised_hash = None
    if compromise is not None:
        idx = int(compromise.get("index", 0)) % len(exam.hashes)
        compromised_hash = exam.hashes[idx]
        reporter = next(m for m in reversed(minions)
                        if master.minions[m.node_id].status == MinionStatus.ACTIVE)
        reporter.report_compromised(compromised_hash)

    # -- selection ----------------------------------------------------------------
    if net.tick > cfg.notify_time:
        checks["timeline"] = False
        logger.error("setup finished at tick %d, after notify_time %d", net.tick, cfg.notify_time)
    else:
        checks["timeline"] = True
    net.advance_to(max(net.tick, cfg.notify_time))
    selection = master.select()
    notified = master.notify_selection()
    sel_index = exam.hashes.index(selection.selected_hash)
    checks["selection_recomputes"] = selection.recompute() == selection.selected_index
    if compromised_hash is not None:
        attacks.append({
            "kind": "compromise_qsp",
            "excluded_hash": compromised_hash.hex(),
            "selected_hash": selection.selected_hash.hex(),
            "repelled": compromised_hash in master.excluded_hashes and selection.selected_hash != compromised_hash,
        })

    # -- unlock -------------------------------------------------------------------
    net.advance_to(max(net.tick, cfg.unlock_time))
    unlock = {}
    expected = _digest(plaintexts[sel_index])
    for i, m in enumerate(minions):
        token = m.login(f"proctor-{i}", f"pw-{i}".encode())
        try:
            paper = m.request_qsp(token, cfg.exam_id)
        except AccessDenied as exc:
            unlock[m.node_id] = {"outcome": "denied", "reason": exc.reason, "qsp_digest": None}
        else:
            unlock[m.node_id] = {"outcome": "granted", "reason": "", "qsp_digest": _digest(paper.to_bytes())}
    active = [m.node_id for m in minions if master.minions[m.node_id].status == MinionStatus.ACTIVE]
    checks["active_minions_match_plaintext"] = bool(active) and all(
        unlock[mid]["qsp_digest"] == expected for mid in active)
    # an excluded minion gets no notice, so it is usually stopped at its own time gate
    checks["excluded_minions_denied"] = all(
        unlock[m.node_id]["outcome"] == "denied"
        for m in minions if master.minions[m.node_id].status == MinionStatus.EXCLUDED)

    # -- purge ----------------------------------------------------------------------
    purge = {}
    for m in minions:
        before = m.storage_bytes()
        m.finish_exam()
        m.purge()
        purge[m.node_id] = {"before": before, "after": m.storage_bytes()}
    checks["purge_shrinks_storage"] = all(v["after"] < v["before"] for v in purge.values())

    for a in attacks:
        checks[f"attack_{a['kind']}_repelled"] = bool(a["repelled"])

    report = {
        "scenario": asdict(cfg),
        "phases": {
            "submission": {"setters": len(setters), "accepted_setters": sum(
                n.session.phase.value == "done" and not n.failures for n in setters)},
            "qcloud": {"papers": len(papers), "tombstones": [asdict(t) for t in qc.tombstones]},
            "master": {"qsp_hashes": [h.hex() for h in exam.hashes],
                       "chain_sha256": _digest(exam.chain_bytes)},
            "distribution": delivery,
            "selection": selection.to_json() | {"registry_index": sel_index},
            "notified": notified,
            "unlock": unlock,
            "purge": purge,
        },
        "prime_pool": list(pool.primes),
        "expected_qsp_digest": expected,
        "minions": {m.node_id: {"status": m.status.value, "master_view": master.minions[m.node_id].status.value}
                    for m in minions},
        "attacks": attacks,
        "checks": checks,
        "transcript_sha256": net.transcript_digest(),
        "ok": all(checks.values()),
    }
    return ScenarioResult(report, net, master, minions, qc)


# -- attacks ---------------------------------------------------------------------


def _forged_sender(net: Network, adv: _Adversary, victim: SetterNode, params: dict) -> dict:
    """Inject a D5 built from eavesdropped public values but the wrong signature."""
    d2 = adv.messages("D2")[-1]
    d4 = adv.messages("D4")[-1]
    fake = QuestionSubmission(victim.submission.setter_qt,
                              (Question("forged-1", victim.submission.course_id, "Leaked answer key?"),))
    rng = random.Random(f"forger:{net.seed}")
    wrong_sig = rng.randbytes(32)
    inner = crypto.sym_encrypt([wrong_sig], fake.to_bytes(), rng)
    box = crypto.asym_encrypt(d2.body, inner.to_bytes(), rng)
    forged = ProtocolMessage("D5", d4.session_id, d4.nonce + 1, box.to_bytes(), token=d4.body)
    net.send(adv.node_id, QC_ID, "D5", forged.to_bytes())
    net.run_until_quiescent()
    rejected = any(r.type == "FAIL" and r.reason == "forged sender" for r in adv.replies)
    victim.release()
    net.run_until_quiescent()
    genuine_ok = victim.session.phase.value == "done" and not victim.failures
    return {"kind": "forged_sender", "forged_rejected": rejected, "genuine_accepted": genuine_ok,
            "repelled": rejected and genuine_ok}


def _eavesdrop(adv: _Adversary, cred: Credential, params: dict) -> dict:
    trials = int(params.get("trials", 100))
    rng = random.Random(f"eavesdropper:{trials}")
    bodies = [crypto.SealedBox.from_bytes(m.body) for m in adv.messages("D3") + adv.messages("D5")]
    failures = 0
    attempts = 0
    for box in bodies:
        for _ in range(trials):
            attempts += 1
            guess = rng.randrange(1, crypto.CURVE_ORDER)
            try:
                crypto.asym_decrypt(guess, box)
            except crypto.AuthenticationError:
                failures += 1
    leaked = any(cred.pw in e.payload or cred.pw.hex().encode() in e.payload for e in adv.captured)
    return {"kind": "eavesdrop", "captured": len(adv.captured), "attempts": attempts,
            "auth_failures": failures, "password_visible": leaked,
            "repelled": bool(bodies) and failures == attempts and not leaked}


def _arm_transit_tamper(net: Network, minion_id: str) -> None:
    state = {"armed": True}

    def flip(env: MessageEnvelope) -> bytes:
        if env.kind != "chain_shipment" or not state["armed"]:
            return env.payload
        state["armed"] = False
        data = bytearray(env.payload)
        data[len(data) - 40] ^= 0x01  # inside the last block's payload
        return bytes(data)

    net.set_link(MASTER_ID, minion_id, LinkPolicy(tamper_hook=flip))


def _block_tamper_verdict(net: Network, minion: Minion) -> dict:
    net.clear_link(MASTER_ID, minion.node_id)
    rejected = any(e["event"] == "shipment_rejected" for e in minion.audit)
    stored = minion.chain_intact()
    return {"kind": "block_tamper", "minion": minion.node_id, "rejected_in_transit": rejected,
            "stored_chain_valid": stored, "repelled": rejected and stored}


def _premature_access(net: Network, master: Master, minions: List[Minion], params: dict) -> dict:
    m = minions[int(params.get("minion", 0)) % len(minions)]
    block = int(params.get("block", 1))
    i = minions.index(m)
    token = m.login(f"proctor-{i}", f"pw-{i}".encode())
    mark = net.last_msg_id
    try:
        m.request_qsp(token, master.exam.exam_id)
        denied = None
    except AccessDenied as exc:
        denied = exc.reason
    chain_msgs = len(net.sent_by(m.node_id, mark))

    shipped = list(m.shipped_hashes)
    m.set_online(False)
    stolen = m.raw_access(block)
    m.set_online(True)
    after = m.chain.hashes()
    changed = all(after[j] != shipped[j] for j in range(block, len(shipped)))
    unchanged_before = all(after[j] == shipped[j] for j in range(block))
    try:
        crypto.sym_decrypt_with_key(crypto.random_bytes(32, random.Random(f"thief:{net.seed}")),
                                    crypto.Ciphertext.from_bytes(stolen))
        copy_useless = False
    except crypto.AuthenticationError:
        copy_useless = True
    excluded = master.minions[m.node_id].status == MinionStatus.EXCLUDED
    return {
        "kind": "premature_access", "minion": m.node_id, "denial": denied,
        "chain_bound_messages": chain_msgs, "alarmed": m.status == Status.ALARMED,
        "master_excluded": excluded, "hashes_changed_from_block": changed and unchanged_before,
        "stolen_copy_useless": copy_useless,
        "repelled": (denied == "too_early" and chain_msgs == 0 and m.status == Status.ALARMED
                     and excluded and changed and copy_useless),
    }
