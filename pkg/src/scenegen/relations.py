"""Deterministic grammar for relation phrases ("2.6 meters to the right",
"in front of", "between A and B", ...).

Axis convention: front = +x, back = -x, left = +y, right = -y; all
magnitudes in millimetres. Anything the grammar does not recognize parses
to UNRECOGNIZED rather than raising, so free-form text can always flow
through the pipeline.
"""

from __future__ import annotations

import enum
import math
import random
import re
from dataclasses import dataclass
from typing import Optional, Tuple

from .model import round_mm

ASSIGN_RANGE_MM = (1000, 5000)  # self-chosen distances: >1 m and <5 m
OFFSET_TOLERANCE_MM = 50
ANGLE_TOLERANCE_DEG = 5.0
BETWEEN_TOLERANCE_MM = 500


class RelationKind(enum.Enum):
    OFFSET = "offset"
    FACING = "facing"
    DISTANCE = "distance_only"
    ADJACENCY = "adjacency"
    PARALLEL = "parallel"
    BETWEEN = "between"
    UNRECOGNIZED = "unrecognized"


@dataclass(frozen=True)
class AxisTerm:
    """One signed axis component; magnitude None means "direction stated,
    distance left to us"."""

    sign: int
    magnitude_mm: Optional[int] = None


@dataclass(frozen=True)
class RelationAST:
    kind: RelationKind
    x: Optional[AxisTerm] = None
    y: Optional[AxisTerm] = None
    distance_mm: Optional[int] = None
    anchor_a: Optional[str] = None
    anchor_b: Optional[str] = None

    @property
    def dx(self) -> Optional[int]:
        if self.x is None or self.x.magnitude_mm is None:
            return None
        return self.x.sign * self.x.magnitude_mm

    @property
    def dy(self) -> Optional[int]:
        if self.y is None or self.y.magnitude_mm is None:
            return None
        return self.y.sign * self.y.magnitude_mm


# direction word -> (axis, sign)
_DIRECTION_WORDS = {
    "front": ("x", 1),
    "forward": ("x", 1),
    "ahead": ("x", 1),
    "back": ("x", -1),
    "backward": ("x", -1),
    "behind": ("x", -1),
    "rear": ("x", -1),
    "left": ("y", 1),
    "right": ("y", -1),
}

_UNIT_MM = {
    "mm": 1,
    "millimeter": 1,
    "millimeters": 1,
    "millimetre": 1,
    "millimetres": 1,
    "m": 1000,
    "meter": 1000,
    "meters": 1000,
    "metre": 1000,
    "metres": 1000,
}

_QTY = r"(\d+(?:\.\d+)?)"
_UNIT = r"(mm|millimeters?|millimetres?|meters?|metres?|m)\b"
# "2.6 meters", "2m", "1500mm", "3-meter"
_QTY_UNIT_RE = re.compile(_QTY + r"\s*-?\s*" + _UNIT)

# a quantity+unit followed by a direction phrase, or a bare direction phrase
_OFFSET_RE = re.compile(
    r"(?:" + _QTY + r"\s*-?\s*" + _UNIT + r"\s*)?"
    r"(?:to\s+the\s+|in\s+|at\s+the\s+|on\s+the\s+)?"
    r"\b(front|forward|ahead|back|backwards?|behind|rear|left|right)\b",
    re.IGNORECASE,
)

_FACING_RE = re.compile(r"\b(facing|faces|face|oriented\s+towards?|orientated\s+towards?|pointing\s+(?:at|towards?))\b", re.IGNORECASE)
_ADJACENCY_RE = re.compile(r"\b(next\s+to|near(?:by)?|beside|adjacent(?:\s+to)?|close\s+to|alongside)\b", re.IGNORECASE)
_PARALLEL_RE = re.compile(r"\bparallel\b", re.IGNORECASE)
_BETWEEN_RE = re.compile(r"\bbetween\s+(.+?)\s+and\s+(.+?)(?:[.,;]|$)", re.IGNORECASE)
_DISTANCE_CUE_RE = re.compile(r"\b(from|away|apart|distance|interval|spaced?|separated)\b", re.IGNORECASE)


def _to_mm(qty: str, unit: str) -> int:
    return round_mm(float(qty) * _UNIT_MM[unit.lower()])


def parse_relation(relation_text: str) -> RelationAST:
    """Parse a relation phrase; unknown phrasing yields UNRECOGNIZED."""
    text = relation_text.strip()
    if not text:
        return RelationAST(RelationKind.UNRECOGNIZED)

    m = _BETWEEN_RE.search(text)
    if m:
        return RelationAST(
            RelationKind.BETWEEN,
            anchor_a=m.group(1).strip(),
            anchor_b=m.group(2).strip(),
        )
    if _PARALLEL_RE.search(text):
        return RelationAST(RelationKind.PARALLEL)
    if _FACING_RE.search(text):
        return RelationAST(RelationKind.FACING)

    terms: dict = {}
    for m in _OFFSET_RE.finditer(text):
        qty, unit, word = m.group(1), m.group(2), m.group(3).lower()
        word = "backward" if word == "backwards" else word
        axis, sign = _DIRECTION_WORDS[word]
        magnitude = _to_mm(qty, unit) if qty else None
        if magnitude is not None and magnitude <= 0:
            continue
        if axis not in terms:
            terms[axis] = AxisTerm(sign, magnitude)
    if terms:
        return RelationAST(RelationKind.OFFSET, x=terms.get("x"), y=terms.get("y"))

    if _ADJACENCY_RE.search(text):
        return RelationAST(RelationKind.ADJACENCY)

    qty_match = _QTY_UNIT_RE.search(text)
    if qty_match and _DISTANCE_CUE_RE.search(text):
        mm = _to_mm(qty_match.group(1), qty_match.group(2))
        if mm >= 0:
            return RelationAST(RelationKind.DISTANCE, distance_mm=mm)

    return RelationAST(RelationKind.UNRECOGNIZED)


def _sample_magnitude(rng: random.Random) -> int:
    lo, hi = ASSIGN_RANGE_MM
    return rng.randrange(lo, hi + 1, 100)


def relation_to_delta(ast: RelationAST, rng: random.Random) -> Optional[Tuple[int, int]]:
    """Rewrite a relation into a (dx, dy) coordinate difference of the
    subject relative to the object, sampling free magnitudes from ``rng``.

    Returns None for relations that constrain direction rather than
    position (facing, parallel), for between (resolved against two
    anchors during assignment), and for unrecognized text.
    """
    if ast.kind == RelationKind.OFFSET:
        dx = dy = 0
        if ast.x is not None:
            dx = ast.x.sign * (ast.x.magnitude_mm if ast.x.magnitude_mm is not None else _sample_magnitude(rng))
        if ast.y is not None:
            dy = ast.y.sign * (ast.y.magnitude_mm if ast.y.magnitude_mm is not None else _sample_magnitude(rng))
        return dx, dy
    if ast.kind == RelationKind.DISTANCE:
        ax, ay = [(1, 0), (0, 1), (-1, 0), (0, -1)][rng.randrange(4)]
        return ax * ast.distance_mm, ay * ast.distance_mm
    if ast.kind == RelationKind.ADJACENCY:
        magnitude = _sample_magnitude(rng)
        ax, ay = [(1, 0), (0, 1), (-1, 0), (0, -1)][rng.randrange(4)]
        return ax * magnitude, ay * magnitude
    return None


_DIR_TEXT_RE = re.compile(
    r"\b(front|forward|back|backwards?|behind|rear|left|right)\b", re.IGNORECASE
)
_DEGREES_RE = re.compile(r"(-?\d+(?:\.\d+)?)\s*(?:degrees?|deg\b|°)", re.IGNORECASE)

_WORD_DEGREES = {
    "front": 0.0,
    "forward": 0.0,
    "back": 180.0,
    "backward": 180.0,
    "backwards": 180.0,
    "behind": 180.0,
    "rear": 180.0,
    "left": 90.0,
    "right": 270.0,
}


def parse_direction_text(text: str) -> Optional[float]:
    """Best-effort direction from free text: '90 degrees', 'facing left', '0'."""
    stripped = text.strip()
    if not stripped:
        return None
    m = _DEGREES_RE.search(stripped)
    if m:
        return float(m.group(1))
    try:
        return float(stripped)
    except ValueError:
        pass
    m = _DIR_TEXT_RE.search(stripped)
    if m:
        return _WORD_DEGREES[m.group(1).lower()]
    return None


def angular_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in degrees."""
    d = math.fmod(abs(a - b), 360.0)
    return min(d, 360.0 - d)
