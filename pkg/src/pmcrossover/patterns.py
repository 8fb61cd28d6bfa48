"""Missingness patterns of the paired 2x2 crossover and their grouping.

Positions are always stored in (1A, 1B, 2A, 2B) order.  The pattern tables
are written in *period* order (subject 1 period 1, subject 1 period 2,
subject 2 period 1, subject 2 period 2), which coincides with position order
for the AB sequence and swaps treatments within each subject for BA.
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

POSITIONS = ("1A", "1B", "2A", "2B")
N_PATTERNS = 15


class NoObservations(ValueError):
    """Raised when a record has all four positions missing."""


class Sequence(enum.IntEnum):
    AB = 1
    BA = 2

    @classmethod
    def parse(cls, value) -> "Sequence":
        if isinstance(value, Sequence):
            return value
        text = str(value).strip().upper()
        if text in ("1", "AB", "SEQ1"):
            return cls.AB
        if text in ("2", "BA", "SEQ2"):
            return cls.BA
        raise ValueError(f"unknown sequence {value!r}")


# period-order masks, one row per pattern; numbering is fixed, not computed
PATTERN_TABLE: tuple[tuple[bool, bool, bool, bool], ...] = tuple(
    tuple(ch == "X" for ch in row)
    for row in (
        "XXXX",  # 0
        "XXX?",  # 1
        "X?XX",  # 2
        "X?X?",  # 3
        "XX??",  # 4
        "??XX",  # 5
        "X???",  # 6
        "??X?",  # 7
        "???X",  # 8
        "?X??",  # 9
        "?XXX",  # 10
        "XX?X",  # 11
        "?X?X",  # 12
        "?XX?",  # 13
        "X??X",  # 14
    )
)
_PATTERN_OF_PERIOD_MASK = {mask: p for p, mask in enumerate(PATTERN_TABLE)}

# a pattern is monotone within subject if no subject is missing period 1
# while observed in period 2
MONOTONE = tuple(p <= 7 for p in range(N_PATTERNS))

# BA lists treatment B first within each subject
_BA_SWAP = (1, 0, 3, 2)


def _to_period_order(mask, sequence: Sequence) -> tuple[bool, ...]:
    mask = tuple(bool(m) for m in mask)
    if sequence == Sequence.BA:
        return tuple(mask[i] for i in _BA_SWAP)
    return mask


def position_mask(p: int, sequence: Sequence = Sequence.AB) -> tuple[bool, ...]:
    """Observed flags in (1A, 1B, 2A, 2B) order for pattern ``p``."""
    # the swap is its own inverse
    return _to_period_order(PATTERN_TABLE[p], Sequence(sequence))


def classify(mask: Iterable[bool], sequence: Sequence = Sequence.AB) -> int:
    """Pattern number of a position mask (1A, 1B, 2A, 2B) observed in ``sequence``."""
    mask = tuple(bool(m) for m in mask)
    if len(mask) != 4:
        raise ValueError(f"mask must have 4 entries, got {len(mask)}")
    if not any(mask):
        raise NoObservations("all four positions are missing")
    return _PATTERN_OF_PERIOD_MASK[_to_period_order(mask, Sequence(sequence))]


def observed_positions(p: int, sequence: Sequence = Sequence.AB) -> np.ndarray:
    return np.flatnonzero(position_mask(p, sequence))


def selection_matrix(p: int, sequence: Sequence = Sequence.AB) -> np.ndarray:
    """Rows of the 4x4 identity kept for the observed positions, ascending."""
    return np.eye(4)[observed_positions(p, sequence)]


DEFAULT_GROUPS: dict[str, tuple[int, ...]] = {
    "C": (0, 10, 11, 12),
    "D": (1, 2, 3, 6, 7, 13, 14),
    "P": (4, 5, 8, 9),
}


@dataclass(frozen=True)
class GroupingScheme:
    """Total map from pattern number to group label.

    ``labels`` fixes the group order used everywhere downstream; the last
    label is the one eliminated by the simplex constraint in inference.
    """

    group_of_pattern: Mapping[int, str]
    labels: tuple[str, ...] = ()
    min_pairs_per_group: int = 3
    name: str = "custom"

    def __post_init__(self):
        missing = set(range(N_PATTERNS)) - set(self.group_of_pattern)
        extra = set(self.group_of_pattern) - set(range(N_PATTERNS))
        if missing or extra:
            raise ValueError(
                f"grouping must cover patterns 0..14 exactly "
                f"(missing {sorted(missing)}, unknown {sorted(extra)})"
            )
        seen = list(dict.fromkeys(self.group_of_pattern[p] for p in range(N_PATTERNS)))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(seen))
        elif set(self.labels) != set(seen):
            raise ValueError(f"labels {self.labels} do not match groups {seen}")
        object.__setattr__(self, "group_of_pattern", dict(self.group_of_pattern))

    @classmethod
    def from_groups(cls, groups: Mapping[str, Iterable[int]], **kw) -> "GroupingScheme":
        mapping: dict[int, str] = {}
        for label, pats in groups.items():
            for p in pats:
                p = int(p)
                if p in mapping:
                    raise ValueError(f"pattern {p} assigned to both {mapping[p]} and {label}")
                mapping[p] = str(label)
        return cls(mapping, labels=tuple(str(k) for k in groups), **kw)

    @classmethod
    def default(cls) -> "GroupingScheme":
        return cls.from_groups(DEFAULT_GROUPS, name="default")

    @classmethod
    def merged_dp(cls) -> "GroupingScheme":
        return cls.from_groups(
            {"C": DEFAULT_GROUPS["C"], "D+P": DEFAULT_GROUPS["D"] + DEFAULT_GROUPS["P"]},
            name="merged-dp",
        )

    @classmethod
    def naive(cls) -> "GroupingScheme":
        return cls.from_groups({"ALL": range(N_PATTERNS)}, name="naive")

    @classmethod
    def named(cls, name: str) -> "GroupingScheme":
        try:
            return {"default": cls.default, "merged-dp": cls.merged_dp, "naive": cls.naive}[name]()
        except KeyError:
            raise ValueError(f"unknown grouping {name!r}") from None

    def groups(self) -> dict[str, tuple[int, ...]]:
        return {
            g: tuple(p for p in range(N_PATTERNS) if self.group_of_pattern[p] == g)
            for g in self.labels
        }


def assign_group(p: int, scheme: GroupingScheme | None = None) -> str:
    scheme = scheme or GroupingScheme.default()
    return scheme.group_of_pattern[p]


@dataclass
class PatternCounts:
    by_pattern_sequence: dict[tuple[int, Sequence], int]
    by_sequence: dict[Sequence, int]
    by_group: dict[str, int]
    total: int
    labels: tuple[str, ...] = field(default=())

    def by_pattern(self) -> dict[int, int]:
        return {
            p: sum(self.by_pattern_sequence[(p, s)] for s in Sequence)
            for p in range(N_PATTERNS)
        }


def tabulate(records, scheme: GroupingScheme | None = None) -> PatternCounts:
    """Counts per (pattern, sequence), per sequence, per group and overall."""
    scheme = scheme or GroupingScheme.default()
    cells = Counter((r.pattern, r.sequence) for r in records)
    by_ps = {(p, s): cells.get((p, s), 0) for p in range(N_PATTERNS) for s in Sequence}
    by_seq = {s: sum(by_ps[(p, s)] for p in range(N_PATTERNS)) for s in Sequence}
    by_group = dict.fromkeys(scheme.labels, 0)
    for (p, _), n in by_ps.items():
        by_group[scheme.group_of_pattern[p]] += n
    return PatternCounts(by_ps, by_seq, by_group, sum(by_seq.values()), scheme.labels)


def pattern_table(scheme: GroupingScheme | None = None) -> list[dict]:
    """One row per (pattern, sequence) with both mask orderings and group label."""
    scheme = scheme or GroupingScheme.default()
    rows = []
    for p in range(N_PATTERNS):
        for s in Sequence:
            rows.append(
                {
                    "pattern": p,
                    "sequence": int(s),
                    "period_mask": "".join("X" if m else "?" for m in PATTERN_TABLE[p]),
                    "position_mask": "".join("X" if m else "?" for m in position_mask(p, s)),
                    "monotone": MONOTONE[p],
                    "group": scheme.group_of_pattern[p],
                }
            )
    return rows
