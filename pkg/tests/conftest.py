import random

import pytest

from qshare.model import Question, QuestionPaper

PAPER_POOL = (179426549, 24066347, 179424793, 15486511, 1000003, 1000033, 1000037, 1000039, 1000081, 17142407)
FIRST_TEN_ABOVE_MILLION = (1000003, 1000033, 1000037, 1000039, 1000081,
                           1000099, 1000117, 1000121, 1000133, 1000151)


@pytest.fixture
def rng():
    return random.Random(1234)


def make_papers(n, per_paper=3, course="CSE-101"):
    return [
        QuestionPaper(i, course, tuple(
            Question(f"p{i}-q{j}", course, f"Paper {i} question {j}: derive the bound.", weight=1 + j % 3)
            for j in range(per_paper)))
        for i in range(n)
    ]


@pytest.fixture
def papers():
    return make_papers(10)


EPOCH = 1_515_552_555_000


class Deployment:
    """A master, some minions and an encrypted exam, ready to distribute."""

    def __init__(self, n_minions=3, n_papers=10, difficulty=0, unlock_tick=500, notify_tick=100,
                 seed=0, pool=PAPER_POOL, per_paper=3):
        from qshare.master import Master, PrimePool
        from qshare.minion import Minion
        from qshare.netsim import Network

        self.net = Network(seed=seed, epoch_ms=EPOCH)
        self.master = Master("master", self.net, random.Random(seed), difficulty, PrimePool(tuple(pool)),
                             notify_time=EPOCH + notify_tick)
        self.minions = []
        for i in range(n_minions):
            m = Minion(f"m{i}", self.net, "master", random.Random(100 + i))
            m.register_user("proctor", b"pw")
            self.master.register_minion(m.node_id)
            self.minions.append(m)
        self.papers = make_papers(n_papers, per_paper)
        self.unlock = EPOCH + unlock_tick
        self.unlock_tick = unlock_tick
        self.notify_tick = notify_tick
        self.exam = self.master.prepare_exam(self.papers, "101", "final", self.unlock)

    def distribute(self):
        return self.master.distribute()

    def notify(self):
        self.net.advance_to(max(self.net.tick, self.notify_tick))
        self.master.select()
        return self.master.notify_selection()

    def selected_plaintext(self):
        idx = self.exam.hashes.index(self.exam.selection.selected_hash)
        return self.papers[idx].to_bytes()

    def token(self, minion):
        return minion.login("proctor", b"pw")


@pytest.fixture
def deployment():
    return Deployment()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
