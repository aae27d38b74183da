"""
Bounded token-grid memory banks and their compression policies.

A ``MemoryBank`` stores an ordered list of token grids (P positions × C
channels). The visual bank holds one position-embedded frame per timestep; a
query bank holds the N query vectors that entered a Q-Former block. When a
bank grows past its capacity M, the bank's ``CompressionPolicy`` reduces it by
exactly one entry:

- ``mbc_token``: per spatial position, average the most similar pair of
  temporally adjacent tokens
- ``mbc_frame``: one merge index chosen from whole-frame similarity
- ``fifo``: drop the earliest entry
- ``none``: never compress (unbounded)

Every position of every entry carries the sorted tuple of original timesteps
merged into it (its provenance) and a merge count (its weight).
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor, add, concat_rows, scale, slice_rows
from .utils import safe_open_text

logger = logging.getLogger(__name__)

POLICY_KINDS = ("mbc_token", "mbc_frame", "fifo", "none")
TIE_BREAKS = ("earliest", "latest")
COSINE_EPS = 1e-12

_POLICY_ALIASES = {
    "mbc": "mbc_token",
    "mbc-token": "mbc_token",
    "mbc-frame": "mbc_frame",
    "token": "mbc_token",
    "frame": "mbc_frame",
}

# Guards against using the oracle as a production path.
ORACLE_MAX_ENTRIES = 12
ORACLE_MAX_POSITIONS = 4
ORACLE_MAX_CHANNELS = 6


class BankError(ValueError):
    """Raised on bank dimension mismatches and precondition violations."""


@dataclass(frozen=True)
class CompressionPolicy:
    """How a bank restores its capacity after an append."""

    kind: str = "mbc_token"
    tie_break: str = "earliest"

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(
                f"Unknown policy kind: {self.kind} (expected one of {POLICY_KINDS})"
            )
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"Unknown tie break: {self.tie_break}")

    @classmethod
    def from_name(cls, name: str, tie_break: str = "earliest") -> "CompressionPolicy":
        """Build a policy from a CLI-style name such as ``mbc`` or ``fifo``."""
        key = name.strip().lower()
        return cls(_POLICY_ALIASES.get(key, key), tie_break)

    @property
    def compresses(self) -> bool:
        return self.kind != "none"


@dataclass(frozen=True)
class TokenGrid:
    """One timestep's tokens with a per-position merge count."""

    tokens: Tensor
    weights: Tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.tokens.shape) != 2:
            raise BankError(f"TokenGrid tokens must be P×C, got {self.tokens.shape}")
        if len(self.weights) != self.tokens.shape[0]:
            raise BankError(
                f"TokenGrid has {len(self.weights)} weights for "
                f"{self.tokens.shape[0]} positions"
            )
        if any(w < 1 for w in self.weights):
            raise BankError(f"TokenGrid weights must be >= 1, got {self.weights}")

    @classmethod
    def fresh(cls, tokens: Tensor) -> "TokenGrid":
        """A newly ingested grid: every weight is 1."""
        return cls(tokens, (1,) * tokens.shape[0])

    @property
    def num_positions(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class _Slot:
    token: Tensor  # 1×C
    weight: int
    provenance: Tuple[int, ...]


class MemoryBank:
    """
    Ordered, bounded store of token grids.

    Internally each spatial position owns its own temporal sequence of slots
    ("column"). Token-level compression shortens every column by exactly one
    slot, so all columns always have the same length and the bank stays a
    rectangular len×P grid.

    A bank is owned by a single stream; concurrent appends are not supported.
    """

    def __init__(
        self,
        capacity: int,
        num_positions: int,
        channels: int,
        policy: CompressionPolicy = CompressionPolicy(),
        name: str = "bank",
    ):
        if capacity < 1 or num_positions < 1 or channels < 1:
            raise BankError(
                f"Invalid bank dimensions: capacity={capacity}, "
                f"P={num_positions}, C={channels}"
            )
        self.capacity = capacity
        self.num_positions = num_positions
        self.channels = channels
        self.policy = policy
        self.name = name
        self.timesteps_seen = 0
        self._columns: List[List[_Slot]] = [[] for _ in range(num_positions)]

    def __len__(self) -> int:
        return len(self._columns[0])

    def __repr__(self) -> str:
        return (
            f"MemoryBank({self.name}, len={len(self)}, M={self.capacity}, "
            f"policy={self.policy.kind})"
        )

    @property
    def kv_rows(self) -> int:
        """Rows this bank contributes as attention keys/values."""
        return len(self) * self.num_positions

    @property
    def resident_floats(self) -> int:
        return self.kv_rows * self.channels

    def append(self, grid: TokenGrid) -> None:
        """
        Append a fresh grid, then compress once if the bank exceeds capacity.

        Args:
            grid: Grid of shape P×C with all weights equal to 1
        """
        if grid.tokens.shape != (self.num_positions, self.channels):
            raise BankError(
                f"{self.name}: grid shape {grid.tokens.shape} does not match bank "
                f"{(self.num_positions, self.channels)}"
            )
        if any(w != 1 for w in grid.weights):
            raise BankError(f"{self.name}: appended grids must have all weights 1")

        self.timesteps_seen += 1
        t = self.timesteps_seen
        for i, column in enumerate(self._columns):
            column.append(_Slot(slice_rows(grid.tokens, i, i + 1), 1, (t,)))

        if len(self) > self.capacity and self.policy.compresses:
            _COMPRESSORS[self.policy.kind](self)
            logger.debug(
                "%s: compressed to %d entries at t=%d", self.name, len(self), t
            )

    @property
    def entries(self) -> List[TokenGrid]:
        """Current entries as token grids in temporal order."""
        return [
            TokenGrid(
                concat_rows([column[j].token for column in self._columns]),
                tuple(column[j].weight for column in self._columns),
            )
            for j in range(len(self))
        ]

    @property
    def provenance(self) -> List[List[Tuple[int, ...]]]:
        """Provenance indexed as ``[entry][position]``."""
        return [
            [column[j].provenance for column in self._columns] for j in range(len(self))
        ]

    @property
    def weights(self) -> List[List[int]]:
        return [
            [column[j].weight for column in self._columns] for j in range(len(self))
        ]

    def token_array(self) -> np.ndarray:
        """Bank values as a ``len×P×C`` array (untraced copy)."""
        if len(self) == 0:
            return np.zeros((0, self.num_positions, self.channels))
        return np.stack(
            [
                np.vstack([column[j].token.data for column in self._columns])
                for j in range(len(self))
            ]
        )

    def flatten(self) -> Tensor:
        """Concatenate entries in temporal-then-spatial order (``len·P × C``)."""
        if len(self) == 0:
            raise BankError(f"{self.name}: cannot flatten an empty bank")
        return concat_rows(
            [column[j].token for j in range(len(self)) for column in self._columns]
        )

    def check_invariants(self) -> None:
        """
        Verify weights and provenance bookkeeping.

        For every position the provenance tuples must be contiguous, ascending
        and together cover exactly 1..t (or its tail for FIFO banks), and each
        weight must equal the size of its provenance.
        """
        if self.policy.compresses and len(self) > self.capacity:
            raise BankError(f"{self.name}: length {len(self)} exceeds {self.capacity}")
        for i, column in enumerate(self._columns):
            expected_next = column[0].provenance[0] if column else None
            for slot in column:
                prov = slot.provenance
                if slot.weight != len(prov):
                    raise BankError(
                        f"{self.name}: weight {slot.weight} != provenance size "
                        f"{len(prov)} at position {i}"
                    )
                if list(prov) != list(range(prov[0], prov[0] + len(prov))):
                    raise BankError(f"{self.name}: non-contiguous provenance {prov}")
                if prov[0] != expected_next:
                    raise BankError(
                        f"{self.name}: provenance out of order at position {i}: "
                        f"{prov} after {expected_next}"
                    )
                expected_next = prov[-1] + 1
            if column and column[-1].provenance[-1] != self.timesteps_seen:
                raise BankError(f"{self.name}: provenance misses the latest timestep")
            if self.policy.kind != "fifo" and column and column[0].provenance[0] != 1:
                raise BankError(f"{self.name}: provenance does not start at 1")

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready dump; floats are written with exact round-trip repr."""
        return {
            "name": self.name,
            "capacity": self.capacity,
            "policy": self.policy.kind,
            "tie_break": self.policy.tie_break,
            "timesteps_seen": self.timesteps_seen,
            "entries": [
                {
                    "tokens": grid.tokens.tolist(),
                    "weights": list(grid.weights),
                    "provenance": [list(p) for p in prov],
                }
                for grid, prov in zip(self.entries, self.provenance)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MemoryBank":
        entries = data["entries"]
        if not entries:
            raise BankError("Bank dump has no entries; dimensions are unknown")
        first = np.asarray(entries[0]["tokens"], dtype=np.float64)
        bank = cls(
            int(data["capacity"]),
            first.shape[0],
            first.shape[1],
            CompressionPolicy(
                data.get("policy", "mbc_token"), data.get("tie_break", "earliest")
            ),
            data.get("name", "bank"),
        )
        bank.timesteps_seen = int(data["timesteps_seen"])
        for entry in entries:
            tokens = np.asarray(entry["tokens"], dtype=np.float64)
            for i, column in enumerate(bank._columns):
                column.append(
                    _Slot(
                        Tensor(tokens[i : i + 1]),
                        int(entry["weights"][i]),
                        tuple(int(t) for t in entry["provenance"][i]),
                    )
                )
        bank.check_invariants()
        return bank

    def dump_json(self, path: Union[str, Path]) -> None:
        with safe_open_text(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def _adjacent_cosine(rows: np.ndarray) -> np.ndarray:
    """Cosine similarity between consecutive rows; zero-norm rows score 0."""
    a, b = rows[:-1], rows[1:]
    dot = (a * b).sum(axis=1)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    out = np.zeros(len(dot))
    ok = (na > COSINE_EPS) & (nb > COSINE_EPS)
    out[ok] = dot[ok] / (na[ok] * nb[ok])
    return out


def _select(similarities: np.ndarray, tie_break: str) -> int:
    if tie_break == "latest":
        return len(similarities) - 1 - int(np.argmax(similarities[::-1]))
    return int(np.argmax(similarities))


def _merge(column: List[_Slot], k: int) -> None:
    left, right = column[k], column[k + 1]
    column[k : k + 2] = [
        _Slot(
            scale(add(left.token, right.token), 0.5),
            left.weight + right.weight,
            left.provenance + right.provenance,
        )
    ]


def _require_overflow(bank: MemoryBank, operation: str) -> None:
    if len(bank) != bank.capacity + 1:
        raise BankError(
            f"{operation} requires exactly M+1={bank.capacity + 1} entries, "
            f"{bank.name} has {len(bank)}"
        )


def mbc_similarities(bank: MemoryBank) -> Tensor:
    """Cosine similarity of temporally adjacent tokens, shape ``(len-1)×P``."""
    if len(bank) < 2:
        raise BankError(f"{bank.name}: similarities need at least 2 entries")
    columns = [
        _adjacent_cosine(np.vstack([slot.token.data for slot in column]))
        for column in bank._columns
    ]
    return Tensor(np.stack(columns, axis=1))


def mbc_compress_token_level(bank: MemoryBank) -> None:
    """Merge the most similar adjacent pair independently at every position."""
    _require_overflow(bank, "mbc_compress_token_level")
    similarities = mbc_similarities(bank).data
    for i, column in enumerate(bank._columns):
        _merge(column, _select(similarities[:, i], bank.policy.tie_break))


def mbc_compress_frame_level(bank: MemoryBank) -> None:
    """Merge one adjacent pair of whole frames chosen by flattened-grid similarity."""
    _require_overflow(bank, "mbc_compress_frame_level")
    frames = bank.token_array().reshape(len(bank), -1)
    k = _select(_adjacent_cosine(frames), bank.policy.tie_break)
    for column in bank._columns:
        _merge(column, k)


def fifo_evict(bank: MemoryBank) -> None:
    """Drop the entry with the earliest provenance."""
    _require_overflow(bank, "fifo_evict")
    for column in bank._columns:
        del column[0]


_COMPRESSORS: Dict[str, Callable[[MemoryBank], None]] = {
    "mbc_token": mbc_compress_token_level,
    "mbc_frame": mbc_compress_frame_level,
    "fifo": fifo_evict,
}


@dataclass
class OracleBank:
    """Result of ``oracle_compress``: plain nested lists, ``[entry][position]``."""

    tokens: List[List[List[float]]]
    weights: List[List[int]]
    provenance: List[List[Tuple[int, ...]]]


def oracle_compress(
    entries: Sequence[TokenGrid], capacity: int, level: str = "token"
) -> OracleBank:
    """
    Exhaustive-scan reference for memory bank compression.

    Ingests ``entries`` one at a time into an empty bank of capacity
    ``capacity``; whenever the bank holds capacity+1 entries the adjacent pair
    with the highest cosine similarity (earliest on ties) is replaced by its
    plain average. Written with Python lists only so it shares no code with
    the production path.

    Args:
        entries: Fresh grids in temporal order (at most 12, P ≤ 4, C ≤ 6)
        capacity: Bank capacity M
        level: ``token`` (per-position merge index) or ``frame``

    Returns:
        OracleBank with the final tokens, weights and provenance
    """
    if level not in ("token", "frame"):
        raise ValueError(f"Unknown compression level: {level}")
    if len(entries) > ORACLE_MAX_ENTRIES:
        raise BankError(
            f"oracle_compress supports at most {ORACLE_MAX_ENTRIES} entries"
        )
    if entries and (
        entries[0].num_positions > ORACLE_MAX_POSITIONS
        or entries[0].channels > ORACLE_MAX_CHANNELS
    ):
        raise BankError(
            f"oracle_compress supports P <= {ORACLE_MAX_POSITIONS} and "
            f"C <= {ORACLE_MAX_CHANNELS}"
        )

    # bank[j][i] = [vector, weight, provenance]
    bank: List[List[List[Any]]] = []
    for t, grid in enumerate(entries, start=1):
        rows = grid.tokens.tolist()
        bank.append([[list(row), 1, (t,)] for row in rows])
        if len(bank) <= capacity:
            continue
        num_positions = len(rows)
        if level == "frame":
            best_k, best_s = 0, None
            for k in range(len(bank) - 1):
                x = [v for i in range(num_positions) for v in bank[k][i][0]]
                y = [v for i in range(num_positions) for v in bank[k + 1][i][0]]
                s = _oracle_cosine(x, y)
                if best_s is None or s > best_s:
                    best_k, best_s = k, s
            picks = [best_k] * num_positions
        else:
            picks = []
            for i in range(num_positions):
                best_k, best_s = 0, None
                for k in range(len(bank) - 1):
                    s = _oracle_cosine(bank[k][i][0], bank[k + 1][i][0])
                    if best_s is None or s > best_s:
                        best_k, best_s = k, s
                picks.append(best_k)

        # Rebuild each position's column with its pair merged.
        new_columns = []
        for i, k in enumerate(picks):
            column = [bank[j][i] for j in range(len(bank))]
            left, right = column[k], column[k + 1]
            merged = [
                [(a + b) / 2 for a, b in zip(left[0], right[0])],
                left[1] + right[1],
                left[2] + right[2],
            ]
            new_columns.append(column[:k] + [merged] + column[k + 2 :])
        bank = [
            [new_columns[i][j] for i in range(num_positions)]
            for j in range(len(bank) - 1)
        ]

    return OracleBank(
        tokens=[[slot[0] for slot in entry] for entry in bank],
        weights=[[slot[1] for slot in entry] for entry in bank],
        provenance=[[slot[2] for slot in entry] for entry in bank],
    )


def _oracle_cosine(x: Sequence[float], y: Sequence[float]) -> float:
    dot = 0.0
    nx = 0.0
    ny = 0.0
    for a, b in zip(x, y):
        dot += a * b
        nx += a * a
        ny += b * b
    nx, ny = math.sqrt(nx), math.sqrt(ny)
    if nx <= COSINE_EPS or ny <= COSINE_EPS:
        return 0.0
    return dot / (nx * ny)
