"""Core domain types: objects, placements, layout facts, scenes.

Everything here is an immutable value; instances can be shared freely
between threads. Coordinates are integer millimetres on the ground plane
(z is always 0), directions are degrees counterclockwise from the +x
axis, normalized to [0, 360).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

MIN_OBJECT_DISTANCE_MM = 1000
DEFAULT_BOUNDS_MM = (-5000, 5000)
GUARDING_NAME = "Guarding"

#: Canonical object names and their model paths. The names double as the
#: permission list used by the retrieval stage.
DEFAULT_LIBRARY_ENTRIES = [
    ("Kuka Robot KR125", "Welding/Kuka Robot KR125.cojt"),
    ("Kuka Robot KR350", "Welding/Kuka Robot KR350.cojt"),
    ("ABB Robot IRB6600", "Welding/ABB Robot IRB6600.cojt"),
    ("YASKAWA Robot ma01800", "Welding/YASKAWA Robot ma01800.cojt"),
    ("Welding Table", "Welding/Welding Table.cojt"),
    ("Turntable", "Welding/Turntable.cojt"),
    ("Cabinet", "Welding/Cabinet.cojt"),
    ("ValveStand", "Welding/ValveStand.cojt"),
    ("Conveyor", "Welding/Conveyor.cojt"),
    ("Guarding", "Welding/Guarding.cojt"),
]


class SceneModelError(ValueError):
    """Invalid domain value (bad direction, unknown library name, ...)."""


def round_mm(value: float) -> int:
    """Round a millimetre value half away from zero to an integer."""
    if not math.isfinite(value):
        raise SceneModelError(f"non-finite millimetre value: {value!r}")
    return int(math.floor(abs(value) + 0.5)) * (1 if value >= 0 else -1)


def normalize_direction(deg: float) -> float:
    """Normalize an angle in degrees to [0, 360)."""
    if not math.isfinite(deg):
        raise SceneModelError(f"non-finite direction: {deg!r}")
    out = math.fmod(deg, 360.0)
    if out < 0:
        out += 360.0
    # fmod of values like -1e-15 can land exactly on 360.0 after the add
    if out >= 360.0:
        out -= 360.0
    return out


@dataclass(frozen=True)
class Coordinate:
    """A ground-plane point in integer millimetres; z is fixed to 0."""

    x: int
    y: int
    z: int = 0

    def __post_init__(self) -> None:
        if self.z != 0:
            raise SceneModelError(f"z must be 0, got {self.z}")
        for v in (self.x, self.y):
            if not isinstance(v, int):
                raise SceneModelError(f"coordinates must be integers, got {v!r}")

    @classmethod
    def of(cls, x: float, y: float) -> "Coordinate":
        return cls(round_mm(x), round_mm(y), 0)

    def offset(self, dx: int, dy: int) -> "Coordinate":
        return Coordinate(self.x + dx, self.y + dy, 0)

    def as_list(self) -> list:
        return [self.x, self.y, 0]


def euclidean_distance(a: Coordinate, b: Coordinate) -> float:
    """Euclidean distance between two coordinates, in millimetres."""
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class Direction:
    """Facing angle in degrees CCW from +x (front), normalized to [0, 360)."""

    degrees: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "degrees", normalize_direction(self.degrees))

    FRONT = 0.0
    LEFT = 90.0
    BACK = 180.0
    RIGHT = 270.0


@dataclass(frozen=True)
class ObjectLibrary:
    """The catalogue placements draw from; names are the permission list."""

    entries: tuple = tuple(DEFAULT_LIBRARY_ENTRIES)

    def __post_init__(self) -> None:
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise SceneModelError("library names must be unique")

    @property
    def names(self) -> list:
        return [name for name, _ in self.entries]

    def model_path(self, name: str) -> str:
        for entry_name, path in self.entries:
            if entry_name == name:
                return path
        raise SceneModelError(f"unknown library object: {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(entry_name == name for entry_name, _ in self.entries)


DEFAULT_LIBRARY = ObjectLibrary()


@dataclass(frozen=True)
class ObjectInstance:
    """One placed-object identity: a library kind plus a per-scene display name."""

    id: str
    library_name: str
    display_name: str

    @classmethod
    def numbered(cls, library_name: str, index: int, total: int) -> "ObjectInstance":
        """Display-name convention: duplicates get ' <k>' suffixes from 1."""
        display = library_name if total <= 1 else f"{library_name} {index}"
        return cls(id=f"obj-{index}-{library_name}", library_name=library_name, display_name=display)


@dataclass(frozen=True)
class NamedAnchor:
    """A non-object reference point the description talks about."""

    name: str
    coord: Optional[Coordinate] = None


Reference = Union[ObjectInstance, NamedAnchor]


def ref_name(ref: Reference) -> str:
    return ref.display_name if isinstance(ref, ObjectInstance) else ref.name


@dataclass(frozen=True)
class Placement:
    """An object's assigned coordinate and direction."""

    object: ObjectInstance
    coord: Coordinate
    dir: Direction = Direction(0.0)


@dataclass(frozen=True)
class PositionRecord:
    """A positional fact stated directly by the description.

    ``location``/``direction`` each hold either a parsed value or the raw
    text when it could not be made numeric; at least one must be present.
    """

    object_or_anchor: Reference
    location: Union[Coordinate, str, None] = None
    direction: Union[Direction, str, None] = None

    def __post_init__(self) -> None:
        if self.location is None and self.direction is None:
            raise SceneModelError("position record needs a location or a direction")

    @property
    def pinned_coord(self) -> Optional[Coordinate]:
        return self.location if isinstance(self.location, Coordinate) else None


@dataclass(frozen=True)
class RelationRecord:
    """A pairwise spatial relationship, kept as the description's own text."""

    subject: Reference
    object: Reference
    relation_text: str

    def __post_init__(self) -> None:
        if ref_name(self.subject) == ref_name(self.object):
            raise SceneModelError(f"relation relates {ref_name(self.subject)!r} to itself")

    def pair_key(self) -> frozenset:
        return frozenset((ref_name(self.subject), ref_name(self.object)))


@dataclass(frozen=True)
class DeltaRecord:
    """A relation rewritten as a coordinate difference: subject - object."""

    subject: Reference
    object: Reference
    dx: int
    dy: int

    def __post_init__(self) -> None:
        for v in (self.dx, self.dy):
            if not isinstance(v, int):
                raise SceneModelError(f"delta components must be integer mm, got {v!r}")


@dataclass(frozen=True)
class Scene:
    """A fully placed scene bound to its source description."""

    objects: tuple
    placements: tuple
    source_description: str = ""

    def __post_init__(self) -> None:
        placed = {p.object.id for p in self.placements}
        declared = {o.id for o in self.objects}
        if placed != declared:
            raise SceneModelError("placements must cover declared objects exactly")
        names = [o.display_name for o in self.objects]
        if len(set(names)) != len(names):
            raise SceneModelError("display names must be unique within a scene")

    def placement_of(self, display_name: str) -> Placement:
        for p in self.placements:
            if p.object.display_name == display_name:
                return p
        raise KeyError(display_name)


def pair_is_exempt(a: Placement, b: Placement, pinned_names: Iterable[str] = ()) -> bool:
    """Minimum-distance exemptions: Guarding pairs, and pairs whose
    coordinates were both explicitly pinned by the description."""
    if a.object.library_name == GUARDING_NAME or b.object.library_name == GUARDING_NAME:
        return True
    pinned = set(pinned_names)
    return a.object.display_name in pinned and b.object.display_name in pinned


def min_distance_violations(
    placements: Sequence[Placement],
    pinned_names: Iterable[str] = (),
    min_dist: float = MIN_OBJECT_DISTANCE_MM,
) -> list:
    """All-pairs scan for object pairs closer than ``min_dist``.

    Returns (placement_a, placement_b, distance) tuples for every
    non-exempt pair below the threshold.
    """
    pinned = set(pinned_names)
    out = []
    for i, a in enumerate(placements):
        for b in placements[i + 1:]:
            if pair_is_exempt(a, b, pinned):
                continue
            d = euclidean_distance(a.coord, b.coord)
            if d < min_dist:
                out.append((a, b, d))
    return out
