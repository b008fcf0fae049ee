"""Single-writer hash-linked chain holding one encrypted paper per block.

Blocks are mined with a leading-zero-bit proof of work.  The alarm path
(:meth:`Chain.touch_unauthorized`) rewrites a header's access time and nonce
without re-mining, which leaves the stored hash stale and breaks the chain on
purpose; :meth:`Chain.remine` then restores a valid chain whose hashes differ
from the originals from that block onward.

File layout::

    b"QBC1" | difficulty (1 byte) | block*
    block  = header (64 bytes) | u32 payload length | payload | stored hash (32)
    header = prev_hash (32) | timestamp | last_access_time | creation_time | nonce   (u64 BE each)
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional

from . import crypto

MAGIC = b"QBC1"
ZERO_HASH = bytes(32)
HEADER_LEN = 32 + 4 * 8
_U64 = struct.Struct(">QQQQ")
_MAX_NONCE = 2 ** 64 - 1


class ChainBroken(Exception):
    pass


@dataclass(frozen=True)
class BlockHeader:
    prev_hash: bytes
    timestamp: int
    last_access_time: int
    creation_time: int
    nonce: int = 0

    def to_bytes(self) -> bytes:
        return self.prev_hash + _U64.pack(self.timestamp, self.last_access_time, self.creation_time, self.nonce)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockHeader":
        if len(data) != HEADER_LEN:
            raise ValueError("header must be %d bytes" % HEADER_LEN)
        ts, last, created, nonce = _U64.unpack(data[32:])
        return cls(data[:32], ts, last, created, nonce)


def block_digest(header: BlockHeader, payload: bytes) -> bytes:
    return crypto.sha256(header.to_bytes() + crypto.lp(payload))


def leading_zero_bits(digest: bytes) -> int:
    n = int.from_bytes(digest, "big")
    return len(digest) * 8 - n.bit_length()


def meets_difficulty(digest: bytes, difficulty: int) -> bool:
    return leading_zero_bits(digest) >= difficulty


def mine(header: BlockHeader, payload: bytes, difficulty: int) -> tuple[BlockHeader, bytes]:
    """Increment the nonce from zero until the digest meets ``difficulty``."""
    nonce = 0
    while True:
        h = replace(header, nonce=nonce)
        digest = block_digest(h, payload)
        if meets_difficulty(digest, difficulty):
            return h, digest
        nonce += 1


@dataclass
class Block:
    header: BlockHeader
    payload: bytes
    hash: bytes

    def recompute(self) -> bytes:
        return block_digest(self.header, self.payload)

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + crypto.lp(self.payload) + self.hash


@dataclass
class Chain:
    blocks: List[Block] = field(default_factory=list)
    difficulty: int = 8

    def __len__(self) -> int:
        return len(self.blocks)

    def hashes(self) -> List[bytes]:
        return [b.hash for b in self.blocks]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def validate(self) -> Optional[int]:
        """Index of the first broken block, or ``None`` if the chain is intact."""
        for i, block in enumerate(self.blocks):
            expected_prev = ZERO_HASH if i == 0 else self.blocks[i - 1].hash
            if block.header.prev_hash != expected_prev:
                return i
            if block.recompute() != block.hash:
                return i
            if not meets_difficulty(block.hash, self.difficulty):
                return i
        return None

    def is_valid(self) -> bool:
        return self.validate() is None

    def append(self, payload: bytes, timestamp: int, creation_time: int) -> Block:
        if not self.blocks:
            raise ChainBroken("chain has no genesis block")
        if not self.is_valid():
            raise ChainBroken("chain broken")
        header = BlockHeader(
            prev_hash=self.tip.hash,
            timestamp=timestamp,
            last_access_time=creation_time,
            creation_time=creation_time,
        )
        header, digest = mine(header, payload, self.difficulty)
        block = Block(header, bytes(payload), digest)
        self.blocks.append(block)
        return block

    def touch_unauthorized(self, index: int, now: int, rng: Optional[random.Random] = None) -> None:
        """Record an unauthorized access on block ``index`` and leave the chain broken."""
        if not 0 <= index < len(self.blocks):
            raise IndexError("block index out of range")
        block = self.blocks[index]
        nonce = block.header.nonce
        while nonce == block.header.nonce:
            nonce = int.from_bytes(crypto.random_bytes(8, rng), "big")
        block.header = replace(block.header, last_access_time=now, nonce=nonce)

    def remine(self) -> None:
        start = self.validate()
        if start is None:
            return
        for i in range(start, len(self.blocks)):
            block = self.blocks[i]
            prev = ZERO_HASH if i == 0 else self.blocks[i - 1].hash
            header = replace(block.header, prev_hash=prev)
            block.header, block.hash = mine(header, block.payload, self.difficulty)

    def to_bytes(self) -> bytes:
        if not 0 <= self.difficulty <= 255:
            raise ValueError("difficulty out of range")
        return MAGIC + bytes([self.difficulty]) + b"".join(b.to_bytes() for b in self.blocks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Chain":
        if data[:4] != MAGIC or len(data) < 5:
            raise ValueError("not a chain file")
        difficulty = data[4]
        blocks = []
        off = 5
        while off < len(data):
            header = BlockHeader.from_bytes(data[off:off + HEADER_LEN])
            payload, off = crypto.read_lp(data, off + HEADER_LEN)
            digest = data[off:off + 32]
            if len(digest) != 32:
                raise ValueError("truncated block hash")
            off += 32
            blocks.append(Block(header, payload, digest))
        return cls(blocks=blocks, difficulty=difficulty)

    def copy(self) -> "Chain":
        return Chain.from_bytes(self.to_bytes())


def make_genesis(
    tau_c: int,
    rng: Optional[random.Random] = None,
    difficulty: int = 8,
    creation_time: Optional[int] = None,
) -> Block:
    """Genesis block: 32 random bytes sealed under the batch timestamp."""
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    created = tau_c if creation_time is None else creation_time
    payload = crypto.sym_encrypt([crypto.ts_bytes(tau_c)], crypto.random_bytes(32, rng), rng).to_bytes()
    header = BlockHeader(ZERO_HASH, tau_c, created, created)
    header, digest = mine(header, payload, difficulty)
    return Block(header, payload, digest)


def new_chain(
    tau_c: int,
    rng: Optional[random.Random] = None,
    difficulty: int = 8,
    creation_time: Optional[int] = None,
) -> Chain:
    return Chain([make_genesis(tau_c, rng, difficulty, creation_time)], difficulty)
