"""Deterministic placement core: delta rewriting, coordinate propagation,
free allocation, and verification.

All functions here are pure given their inputs (and rng, where one is
taken); the LLM-facing refinement loop lives in :mod:`scenegen.refine`.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .model import (
    Coordinate,
    DeltaRecord,
    Direction,
    GUARDING_NAME,
    MIN_OBJECT_DISTANCE_MM,
    DEFAULT_BOUNDS_MM,
    ObjectInstance,
    Placement,
    PositionRecord,
    RelationRecord,
    euclidean_distance,
    normalize_direction,
    ref_name,
    round_mm,
)
from .relations import (
    ANGLE_TOLERANCE_DEG,
    BETWEEN_TOLERANCE_MM,
    OFFSET_TOLERANCE_MM,
    RelationAST,
    RelationKind,
    angular_difference,
    parse_relation,
    relation_to_delta,
)

GRID_PITCH_MM = 500
ADJACENCY_RANGE_MM = (1000, 5000)


class EngineError(Exception):
    pass


class DegenerateGeometryError(EngineError):
    """Orientation requested between two identical coordinates."""


class AllocationInfeasibleError(EngineError):
    def __init__(self, blockers: Sequence[str]):
        self.blockers = list(blockers)
        super().__init__(f"no feasible grid cell for: {', '.join(self.blockers)}")


class ViolationKind(enum.Enum):
    CONSTRAINT = "constraint"
    CONFLICT = "conflict"
    OVERLAP = "overlap"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    detail: str
    names: Tuple[str, ...]
    measured_value: Optional[float] = None


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    violations: Tuple[Violation, ...]

    @classmethod
    def from_violations(cls, violations: Iterable[Violation]) -> "VerificationReport":
        vs = tuple(violations)
        return cls(ok=not vs, violations=vs)

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [
                {
                    "kind": v.kind.value,
                    "detail": v.detail,
                    "names": list(v.names),
                    "measured_value": v.measured_value,
                }
                for v in self.violations
            ],
        }


@dataclass
class PropagationResult:
    coords: Dict[str, Coordinate]
    paths: Dict[str, str]
    discrepancies: List[Tuple[str, Coordinate, str, Coordinate, str]] = field(default_factory=list)


def compute_orientation(subject_coord: Coordinate, target_coord: Coordinate) -> Direction:
    """Direction that makes an object at ``subject_coord`` face the target."""
    dx = target_coord.x - subject_coord.x
    dy = target_coord.y - subject_coord.y
    if dx == 0 and dy == 0:
        raise DegenerateGeometryError("cannot orient between identical coordinates")
    return Direction(normalize_direction(math.degrees(math.atan2(dy, dx))))


def exact_delta(ast: RelationAST) -> Optional[Tuple[int, int]]:
    """The (dx, dy) a relation fully determines, or None if any part is free."""
    if ast.kind != RelationKind.OFFSET:
        return None
    dx = dy = 0
    if ast.x is not None:
        if ast.x.magnitude_mm is None:
            return None
        dx = ast.x.sign * ast.x.magnitude_mm
    if ast.y is not None:
        if ast.y.magnitude_mm is None:
            return None
        dy = ast.y.sign * ast.y.magnitude_mm
    return dx, dy


def relations_to_deltas(
    relations: Sequence[RelationRecord], rng: random.Random
) -> List[DeltaRecord]:
    """Step 1 of assignment: rewrite relations into coordinate differences."""
    deltas = []
    for rec in relations:
        ast = parse_relation(rec.relation_text)
        d = relation_to_delta(ast, rng)
        if d is not None:
            deltas.append(DeltaRecord(rec.subject, rec.object, d[0], d[1]))
    return deltas


def pinned_coordinates(positions: Sequence[PositionRecord]) -> Dict[str, Coordinate]:
    out: Dict[str, Coordinate] = {}
    for rec in positions:
        coord = rec.pinned_coord
        if coord is not None:
            out.setdefault(ref_name(rec.object_or_anchor), coord)
    return out


def propagate_coordinates(
    known: Dict[str, Coordinate], deltas: Sequence[DeltaRecord]
) -> PropagationResult:
    """Step 2/3 closure: walk the delta graph outward from known coordinates.

    Subject = object + delta and object = subject - delta are both applied;
    a coordinate once set is never overwritten, and any re-derivation that
    disagrees by more than the offset tolerance on either axis is recorded
    as a discrepancy (surfaced by verification as a conflict).
    """
    coords = dict(known)
    paths = {name: "stated directly" for name in known}
    result = PropagationResult(coords=coords, paths=paths)

    changed = True
    while changed:
        changed = False
        for rec in deltas:
            s, o = ref_name(rec.subject), ref_name(rec.object)
            derivations = []
            if o in coords:
                derivations.append((s, coords[o].offset(rec.dx, rec.dy), f"{o} + [{rec.dx}, {rec.dy}, 0]"))
            if s in coords:
                derivations.append((o, coords[s].offset(-rec.dx, -rec.dy), f"{s} - [{rec.dx}, {rec.dy}, 0]"))
            for name, coord, path in derivations:
                if name not in coords:
                    coords[name] = coord
                    paths[name] = path
                    changed = True
                else:
                    existing = coords[name]
                    if (
                        abs(existing.x - coord.x) > OFFSET_TOLERANCE_MM
                        or abs(existing.y - coord.y) > OFFSET_TOLERANCE_MM
                    ):
                        entry = (name, existing, paths[name], coord, path)
                        if entry not in result.discrepancies:
                            result.discrepancies.append(entry)
    return result


def _grid_cells(bounds: Tuple[int, int], pitch: int) -> List[Tuple[int, int]]:
    lo, hi = bounds
    axis = list(range(lo, hi + 1, pitch))
    return [(x, y) for y in axis for x in axis]


def allocate_free(
    coords: Dict[str, Coordinate],
    free_names: Sequence[str],
    guarding_names: Iterable[str] = (),
    bounds: Tuple[int, int] = DEFAULT_BOUNDS_MM,
    min_dist: float = MIN_OBJECT_DISTANCE_MM,
    rng: Optional[random.Random] = None,
) -> Dict[str, Coordinate]:
    """Step 4: place the remaining objects on a 500 mm grid.

    Candidate cells are scanned outward from the centroid of the already
    placed objects (row-major among equidistant cells); each free object
    takes the first cell at least ``min_dist`` from every non-exempt
    object placed so far. Guarding centers neither block nor get blocked.
    The scan itself is fully deterministic; ``rng`` is accepted so callers
    can thread the run seed through uniformly.
    """
    guarding = set(guarding_names)
    placed = dict(coords)
    if placed:
        cx = sum(c.x for c in placed.values()) / len(placed)
        cy = sum(c.y for c in placed.values()) / len(placed)
    else:
        cx = cy = 0.0

    cells = _grid_cells(bounds, GRID_PITCH_MM)
    cells.sort(key=lambda cell: ((cell[0] - cx) ** 2 + (cell[1] - cy) ** 2, cell[1], cell[0]))

    out: Dict[str, Coordinate] = {}
    blockers = []
    for name in free_names:
        exempt_self = name in guarding
        chosen = None
        for x, y in cells:
            candidate = Coordinate(x, y)
            conflict = False
            for other, other_coord in placed.items():
                if exempt_self or other in guarding:
                    continue
                if euclidean_distance(candidate, other_coord) < min_dist:
                    conflict = True
                    break
            if not conflict:
                chosen = candidate
                break
        if chosen is None:
            blockers.append(name)
            continue
        placed[name] = chosen
        out[name] = chosen
    if blockers:
        raise AllocationInfeasibleError(blockers)
    return out


def _resolve_reference_name(name: str, coords: Dict[str, Coordinate]) -> Optional[str]:
    if name in coords:
        return name
    lowered = name.lower()
    for key in coords:
        if key.lower() == lowered:
            return key
    # "the Turntable" / trailing punctuation
    for key in coords:
        if key.lower() in lowered:
            return key
    return None


def _between_candidates(mid: Tuple[float, float]) -> List[Coordinate]:
    mx, my = mid
    ring = [(0, 0)]
    for r in (250, 500):
        ring.extend([(r, 0), (-r, 0), (0, r), (0, -r)])
    d = round_mm(500 / math.sqrt(2))
    ring.extend([(d, d), (d, -d), (-d, d), (-d, -d)])
    return [Coordinate(round_mm(mx + ox), round_mm(my + oy)) for ox, oy in ring]


@dataclass
class AssignmentSteps:
    """Intermediate products of the deterministic assignment, one per
    prompt step: rewritten deltas, propagated coordinates, and the final
    full placement set."""

    deltas: List[DeltaRecord]
    derived: Dict[str, Coordinate]
    discrepancies: List[Tuple[str, Coordinate, str, Coordinate, str]]
    placements: List[Placement]
    allocation_failed: List[str] = field(default_factory=list)


def assign_placements(
    positions: Sequence[PositionRecord],
    relations: Sequence[RelationRecord],
    objects: Sequence[ObjectInstance],
    rng: random.Random,
    bounds: Tuple[int, int] = DEFAULT_BOUNDS_MM,
    min_dist: float = MIN_OBJECT_DISTANCE_MM,
) -> AssignmentSteps:
    """Full deterministic assignment: deltas, propagation, between
    resolution, free allocation, then directions.

    Objects that cannot be allocated within bounds are parked near the
    centroid and reported in ``allocation_failed`` so verification (not an
    exception) carries the bad news, mirroring how a model would still
    answer with some placement.
    """
    name_to_obj = {o.display_name: o for o in objects}
    guarding = {o.display_name for o in objects if o.library_name == GUARDING_NAME}
    pinned = pinned_coordinates(positions)

    def has_free_magnitude() -> bool:
        for rec in relations:
            ast = parse_relation(rec.relation_text)
            if ast.kind in (RelationKind.DISTANCE, RelationKind.ADJACENCY):
                return True
            if ast.kind == RelationKind.OFFSET and exact_delta(ast) is None:
                return True
        return False

    def derived_collisions(coords: Dict[str, Coordinate]) -> int:
        names = [n for n in coords if n in name_to_obj]
        count = 0
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if a in guarding or b in guarding:
                    continue
                if a in pinned and b in pinned:
                    continue
                if euclidean_distance(coords[a], coords[b]) < min_dist:
                    count += 1
        return count

    # re-draw sampled magnitudes a few times to dodge pile-ups among the
    # derived coordinates; exact deltas are unaffected
    resampling = has_free_magnitude()
    best: Optional[Tuple[int, List[DeltaRecord], PropagationResult]] = None
    for _ in range(8 if resampling else 1):
        candidate_deltas = relations_to_deltas(relations, rng)
        candidate_prop = propagate_coordinates(dict(pinned), candidate_deltas)
        badness = derived_collisions(candidate_prop.coords) + len(candidate_prop.discrepancies)
        if best is None or badness < best[0]:
            best = (badness, candidate_deltas, candidate_prop)
        if badness == 0:
            break
    assert best is not None
    deltas, prop = best[1], best[2]
    coords = prop.coords
    derived_snapshot = dict(coords)

    def resolve_between() -> bool:
        progressed = False
        for rec in relations:
            ast = parse_relation(rec.relation_text)
            if ast.kind != RelationKind.BETWEEN:
                continue
            subject = ref_name(rec.subject)
            if subject in coords:
                continue
            a = _resolve_reference_name(ast.anchor_a, coords)
            b = _resolve_reference_name(ast.anchor_b, coords)
            if a is None or b is None:
                continue
            mid = ((coords[a].x + coords[b].x) / 2.0, (coords[a].y + coords[b].y) / 2.0)
            chosen = None
            for candidate in _between_candidates(mid):
                ok = True
                for other, other_coord in coords.items():
                    if subject in guarding or other in guarding:
                        continue
                    if euclidean_distance(candidate, other_coord) < min_dist:
                        ok = False
                        break
                if ok:
                    chosen = candidate
                    break
            coords[subject] = chosen if chosen is not None else Coordinate(round_mm(mid[0]), round_mm(mid[1]))
            progressed = True
        return progressed

    resolve_between()

    between_subjects = {
        ref_name(rec.subject)
        for rec in relations
        if parse_relation(rec.relation_text).kind == RelationKind.BETWEEN
    }
    free = [name for name in name_to_obj if name not in coords and name not in between_subjects]
    allocation_failed: List[str] = []
    try:
        coords.update(allocate_free(coords, free, guarding, bounds, min_dist, rng))
    except AllocationInfeasibleError as err:
        allocation_failed = list(err.blockers)
        # park the rest; verification will flag the overlaps
        for i, name in enumerate(err.blockers):
            coords[name] = Coordinate(GRID_PITCH_MM * i, 0)

    resolve_between()
    still_missing = [name for name in name_to_obj if name not in coords]
    if still_missing:
        coords.update(allocate_free(coords, still_missing, guarding, bounds, min_dist, rng))

    directions: Dict[str, float] = {}
    for rec in positions:
        name = ref_name(rec.object_or_anchor)
        if isinstance(rec.direction, Direction):
            directions.setdefault(name, rec.direction.degrees)
        elif isinstance(rec.direction, str):
            from .relations import parse_direction_text

            deg = parse_direction_text(rec.direction)
            if deg is not None:
                directions.setdefault(name, normalize_direction(deg))

    for rec in relations:
        ast = parse_relation(rec.relation_text)
        subject, target = ref_name(rec.subject), ref_name(rec.object)
        if ast.kind == RelationKind.FACING and subject in coords and target in coords:
            if coords[subject] != coords[target]:
                directions.setdefault(subject, compute_orientation(coords[subject], coords[target]).degrees)
        elif ast.kind == RelationKind.PARALLEL:
            if subject in directions and target not in directions:
                directions[target] = directions[subject]
            elif target in directions and subject not in directions:
                directions[subject] = directions[target]

    placements = [
        Placement(obj, coords[name], Direction(directions.get(name, 0.0)))
        for name, obj in name_to_obj.items()
    ]
    return AssignmentSteps(
        deltas=deltas,
        derived=derived_snapshot,
        discrepancies=prop.discrepancies,
        placements=placements,
        allocation_failed=allocation_failed,
    )


def _coordinate_lookup(
    placements: Sequence[Placement], positions: Sequence[PositionRecord]
) -> Dict[str, Coordinate]:
    coords = {p.object.display_name: p.coord for p in placements}
    for rec in positions:
        name = ref_name(rec.object_or_anchor)
        if name not in coords and rec.pinned_coord is not None:
            coords[name] = rec.pinned_coord
    return coords


def verify(
    placements: Sequence[Placement],
    positions: Sequence[PositionRecord],
    relations: Sequence[RelationRecord],
    min_dist: float = MIN_OBJECT_DISTANCE_MM,
) -> VerificationReport:
    """Check a full placement set against the extracted layout facts.

    Three violation families: constraint (a stated position, offset sign,
    distance, angle, or between requirement is not met), conflict (a
    coordinate derivable from the description disagrees with the assigned
    or another derived one), and overlap (non-exempt pair closer than the
    minimum distance).
    """
    violations: List[Violation] = []
    coords = _coordinate_lookup(placements, positions)
    dirs = {p.object.display_name: p.dir.degrees for p in placements}
    placement_names = {p.object.display_name for p in placements}
    pinned = pinned_coordinates(positions)

    # (a) pinned positions hold exactly
    for rec in positions:
        name = ref_name(rec.object_or_anchor)
        if name not in placement_names:
            continue
        target = rec.pinned_coord
        actual = coords[name]
        if target is not None and (actual.x, actual.y) != (target.x, target.y):
            violations.append(
                Violation(
                    ViolationKind.CONSTRAINT,
                    f"{name} must sit at {target.as_list()} but is at {actual.as_list()}",
                    (name,),
                )
            )
        want_dir: Optional[float] = None
        if isinstance(rec.direction, Direction):
            want_dir = rec.direction.degrees
        elif isinstance(rec.direction, str):
            from .relations import parse_direction_text

            want_dir = parse_direction_text(rec.direction)
        if want_dir is not None and name in dirs:
            diff = angular_difference(dirs[name], normalize_direction(want_dir))
            if diff > ANGLE_TOLERANCE_DEG:
                violations.append(
                    Violation(
                        ViolationKind.CONSTRAINT,
                        f"{name} must face {normalize_direction(want_dir):g} degrees "
                        f"but faces {dirs[name]:g}",
                        (name,),
                        measured_value=diff,
                    )
                )

    # conflicts: re-derive coordinates from pinned roots over exact deltas
    exact_deltas: List[DeltaRecord] = []
    for rec in relations:
        d = exact_delta(parse_relation(rec.relation_text))
        if d is not None:
            exact_deltas.append(DeltaRecord(rec.subject, rec.object, d[0], d[1]))
    prop = propagate_coordinates(pinned, exact_deltas)
    for name, c1, p1, c2, p2 in prop.discrepancies:
        violations.append(
            Violation(
                ViolationKind.CONFLICT,
                f"{name} computes to {c1.as_list()} via {p1} but {c2.as_list()} via {p2}",
                (name,),
            )
        )
    derived_names: Set[str] = set(prop.coords)
    for name, derived in prop.coords.items():
        if name not in placement_names or name in pinned:
            continue  # pinned mismatches already reported as constraints
        actual = coords[name]
        if (
            abs(actual.x - derived.x) > OFFSET_TOLERANCE_MM
            or abs(actual.y - derived.y) > OFFSET_TOLERANCE_MM
        ):
            violations.append(
                Violation(
                    ViolationKind.CONFLICT,
                    f"{name} computes to {derived.as_list()} via {prop.paths[name]}, "
                    f"which contradicts the assigned {actual.as_list()}",
                    (name,),
                )
            )

    # (b)-(c) remaining relation constraints
    for rec in relations:
        ast = parse_relation(rec.relation_text)
        s, o = ref_name(rec.subject), ref_name(rec.object)
        if s not in coords or o not in coords:
            continue
        sc, oc = coords[s], coords[o]
        measured_dx, measured_dy = sc.x - oc.x, sc.y - oc.y
        dist = euclidean_distance(sc, oc)

        if ast.kind == RelationKind.OFFSET:
            if exact_delta(ast) is not None and s in derived_names and o in derived_names:
                continue  # consistency already enforced through derivation
            for axis, term, measured in (("x", ast.x, measured_dx), ("y", ast.y, measured_dy)):
                if term is None:
                    if abs(measured) > OFFSET_TOLERANCE_MM:
                        violations.append(
                            Violation(
                                ViolationKind.CONSTRAINT,
                                f"{s} should be offset from {o} only along the other axis; "
                                f"{axis} differs by {measured} mm",
                                (s, o),
                                measured_value=float(measured),
                            )
                        )
                elif term.magnitude_mm is None:
                    if term.sign * measured < MIN_OBJECT_DISTANCE_MM - OFFSET_TOLERANCE_MM:
                        word = {("x", 1): "in front of", ("x", -1): "behind",
                                ("y", 1): "left of", ("y", -1): "right of"}[(axis, term.sign)]
                        violations.append(
                            Violation(
                                ViolationKind.CONSTRAINT,
                                f"{s} should be {word} {o} ({axis}-axis), measured {measured} mm",
                                (s, o),
                                measured_value=float(measured),
                            )
                        )
                else:
                    want = term.sign * term.magnitude_mm
                    if abs(measured - want) > OFFSET_TOLERANCE_MM:
                        violations.append(
                            Violation(
                                ViolationKind.CONSTRAINT,
                                f"{s} should be {want:+d} mm from {o} on {axis}, measured {measured:+d}",
                                (s, o),
                                measured_value=float(measured),
                            )
                        )
        elif ast.kind == RelationKind.DISTANCE:
            if abs(dist - ast.distance_mm) > OFFSET_TOLERANCE_MM:
                violations.append(
                    Violation(
                        ViolationKind.CONSTRAINT,
                        f"{s} should be {ast.distance_mm} mm from {o}, measured {dist:.1f}",
                        (s, o),
                        measured_value=dist,
                    )
                )
        elif ast.kind == RelationKind.ADJACENCY:
            lo, hi = ADJACENCY_RANGE_MM
            if not (lo - OFFSET_TOLERANCE_MM <= dist <= hi + OFFSET_TOLERANCE_MM):
                violations.append(
                    Violation(
                        ViolationKind.CONSTRAINT,
                        f"{s} should be near {o} ({lo}-{hi} mm), measured {dist:.1f}",
                        (s, o),
                        measured_value=dist,
                    )
                )
        elif ast.kind == RelationKind.FACING:
            if s in dirs and sc != oc:
                want = compute_orientation(sc, oc).degrees
                diff = angular_difference(dirs[s], want)
                if diff > ANGLE_TOLERANCE_DEG:
                    violations.append(
                        Violation(
                            ViolationKind.CONSTRAINT,
                            f"{s} should face {o} ({want:.1f} degrees), faces {dirs[s]:g}",
                            (s, o),
                            measured_value=diff,
                        )
                    )
        elif ast.kind == RelationKind.PARALLEL:
            if s in dirs and o in dirs:
                diff = angular_difference(dirs[s], dirs[o])
                diff = min(diff, abs(180.0 - diff))
                if diff > ANGLE_TOLERANCE_DEG:
                    violations.append(
                        Violation(
                            ViolationKind.CONSTRAINT,
                            f"{s} and {o} should be parallel, directions differ by {diff:.1f} degrees",
                            (s, o),
                            measured_value=diff,
                        )
                    )
        elif ast.kind == RelationKind.BETWEEN:
            a = _resolve_reference_name(ast.anchor_a, coords)
            b = _resolve_reference_name(ast.anchor_b, coords)
            if a is not None and b is not None:
                mid = Coordinate(
                    round_mm((coords[a].x + coords[b].x) / 2.0),
                    round_mm((coords[a].y + coords[b].y) / 2.0),
                )
                off = euclidean_distance(sc, mid)
                if off > BETWEEN_TOLERANCE_MM:
                    violations.append(
                        Violation(
                            ViolationKind.CONSTRAINT,
                            f"{s} should sit between {a} and {b}; it is {off:.0f} mm off the midpoint",
                            (s, a, b),
                            measured_value=off,
                        )
                    )

    # (d) all-pairs overlap rule
    guarding = {p.object.display_name for p in placements if p.object.library_name == GUARDING_NAME}
    placements_list = list(placements)
    for i, pa in enumerate(placements_list):
        for pb in placements_list[i + 1:]:
            na, nb = pa.object.display_name, pb.object.display_name
            if na in guarding or nb in guarding:
                continue
            if na in pinned and nb in pinned:
                continue
            d = euclidean_distance(pa.coord, pb.coord)
            if d < min_dist:
                violations.append(
                    Violation(
                        ViolationKind.OVERLAP,
                        f"{na} and {nb} are {d:.1f} mm apart (minimum {min_dist:.0f})",
                        (na, nb),
                        measured_value=d,
                    )
                )

    return VerificationReport.from_violations(violations)


def render_feedback(report: VerificationReport, placements: Sequence[Placement]) -> str:
    """Turn a failed report into the error text the feedback prompt carries."""
    lines = ["Relations: " + "; ".join(
        f"{p.object.display_name} at {p.coord.as_list()} facing {p.dir.degrees:g} degrees"
        for p in placements
    )]
    lines.append("")
    lines.append("Analysis: The following problems were found:")
    for v in report.violations:
        lines.append(f"- {v.kind.value}: {v.detail}")
    return "\n".join(lines)
