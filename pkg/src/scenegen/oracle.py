"""Exhaustive feasibility oracle for small placement instances.

Used by tests as an independent referee for the deterministic assignment
path: it enumerates candidate coordinates per object (grid cells plus
points forced by exact offsets, distances, and between-midpoints), walks
them depth-first with pruning, and accepts only assignments that pass
:func:`scenegen.engine.verify`.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .model import (
    Coordinate,
    DEFAULT_BOUNDS_MM,
    Direction,
    GUARDING_NAME,
    MIN_OBJECT_DISTANCE_MM,
    ObjectInstance,
    Placement,
    PositionRecord,
    RelationRecord,
    euclidean_distance,
    normalize_direction,
    ref_name,
    round_mm,
)
from .engine import (
    EngineError,
    _between_candidates,
    _resolve_reference_name,
    compute_orientation,
    exact_delta,
    pinned_coordinates,
    verify,
)
from .relations import (
    ANGLE_TOLERANCE_DEG,
    BETWEEN_TOLERANCE_MM,
    OFFSET_TOLERANCE_MM,
    RelationKind,
    angular_difference,
    parse_relation,
)
from .engine import ADJACENCY_RANGE_MM

MAX_FREE_OBJECTS = 4
DEFAULT_CANDIDATE_CAP = 10_000_000

_JITTER = [(0, 0), (50, 0), (-50, 0), (0, 50), (0, -50), (50, 50), (50, -50), (-50, 50), (-50, -50)]


class OracleCapacityError(EngineError):
    pass


def _grid(bounds: Tuple[int, int], pitch: int) -> List[Coordinate]:
    lo, hi = bounds
    axis = list(range(lo, hi + 1, pitch))
    return [Coordinate(x, y) for y in axis for x in axis]


def _jittered(base: Coordinate, bounds: Tuple[int, int]) -> List[Coordinate]:
    lo, hi = bounds
    out = []
    for ox, oy in _JITTER:
        x, y = base.x + ox, base.y + oy
        if lo <= x <= hi and lo <= y <= hi:
            out.append(Coordinate(x, y))
    return out or [base]


def _ring_points(center: Coordinate, radius: int, bounds: Tuple[int, int]) -> List[Coordinate]:
    diag = round_mm(radius / math.sqrt(2))
    offsets = [
        (radius, 0), (-radius, 0), (0, radius), (0, -radius),
        (diag, diag), (diag, -diag), (-diag, diag), (-diag, -diag),
    ]
    lo, hi = bounds
    out = []
    for ox, oy in offsets:
        x, y = center.x + ox, center.y + oy
        if lo <= x <= hi and lo <= y <= hi:
            out.append(Coordinate(x, y))
    return out


def brute_force_feasible(
    positions: Sequence[PositionRecord],
    relations: Sequence[RelationRecord],
    objects: Sequence[ObjectInstance],
    grid_pitch: int = 2000,
    bounds: Tuple[int, int] = DEFAULT_BOUNDS_MM,
    candidate_cap: int = DEFAULT_CANDIDATE_CAP,
    min_dist: float = MIN_OBJECT_DISTANCE_MM,
) -> Optional[List[Placement]]:
    """Search for any full placement passing verification.

    Returns the first verified assignment in deterministic scan order, or
    None when the instance is infeasible at this grid resolution. Raises
    OracleCapacityError for more than four unpinned objects or when the
    estimated search space exceeds ``candidate_cap``.
    """
    pinned = pinned_coordinates(positions)
    names = [o.display_name for o in objects]
    name_to_obj = {o.display_name: o for o in objects}
    free_count = sum(1 for n in names if n not in pinned)
    if free_count > MAX_FREE_OBJECTS:
        raise OracleCapacityError(f"{free_count} unpinned objects exceed the oracle limit of {MAX_FREE_OBJECTS}")

    parsed = [(rec, parse_relation(rec.relation_text)) for rec in relations]
    guarding = {n for n in names if name_to_obj[n].library_name == GUARDING_NAME}

    # order: pinned, then objects reachable through exact deltas, then the rest
    order: List[str] = [n for n in names if n in pinned]
    ordered: Set[str] = set(order)
    progressed = True
    while progressed:
        progressed = False
        for rec, ast in parsed:
            d = exact_delta(ast)
            if d is None:
                continue
            s, o = ref_name(rec.subject), ref_name(rec.object)
            for known, new in ((o, s), (s, o)):
                if known in ordered and new not in ordered and new in name_to_obj:
                    order.append(new)
                    ordered.add(new)
                    progressed = True
    for n in names:
        if n not in ordered:
            order.append(n)
            ordered.add(n)

    grid = _grid(bounds, grid_pitch)

    def candidates_for(name: str, assigned: Dict[str, Coordinate]) -> List[Coordinate]:
        if name in pinned:
            return [pinned[name]]
        forced: List[Coordinate] = []
        guided: List[Coordinate] = []
        has_exact = False
        for rec, ast in parsed:
            s, o = ref_name(rec.subject), ref_name(rec.object)
            d = exact_delta(ast)
            if d is not None:
                if s == name and o in assigned:
                    has_exact = True
                    forced.extend(_jittered(assigned[o].offset(d[0], d[1]), bounds))
                elif o == name and s in assigned:
                    has_exact = True
                    forced.extend(_jittered(assigned[s].offset(-d[0], -d[1]), bounds))
            elif ast.kind == RelationKind.DISTANCE:
                other = o if s == name else (s if o == name else None)
                if other in assigned and ast.distance_mm:
                    guided.extend(_ring_points(assigned[other], ast.distance_mm, bounds))
            elif ast.kind == RelationKind.ADJACENCY:
                other = o if s == name else (s if o == name else None)
                if other in assigned:
                    for radius in range(ADJACENCY_RANGE_MM[0], ADJACENCY_RANGE_MM[1] + 1, 1000):
                        guided.extend(_ring_points(assigned[other], radius, bounds))
            elif ast.kind == RelationKind.BETWEEN and s == name:
                a = _resolve_reference_name(ast.anchor_a, assigned)
                b = _resolve_reference_name(ast.anchor_b, assigned)
                if a is not None and b is not None:
                    mid = ((assigned[a].x + assigned[b].x) / 2.0, (assigned[a].y + assigned[b].y) / 2.0)
                    guided.extend(_between_candidates(mid))
        if has_exact:
            return forced
        seen: Set[Tuple[int, int]] = set()
        out: List[Coordinate] = []
        for c in guided + grid:
            key = (c.x, c.y)
            if key not in seen:
                seen.add(key)
                out.append(c)
        return out

    # capacity estimate: product of per-object candidate counts, assuming
    # exact-delta objects contribute a constant factor
    estimate = 1
    known_so_far = set(pinned)
    for name in order:
        if name in pinned:
            continue
        bound_by_delta = False
        for rec, ast in parsed:
            if exact_delta(ast) is None:
                continue
            s, o = ref_name(rec.subject), ref_name(rec.object)
            if (s == name and o in known_so_far) or (o == name and s in known_so_far):
                bound_by_delta = True
                break
        estimate *= len(_JITTER) * 2 if bound_by_delta else len(grid) + 64
        known_so_far.add(name)
        if estimate > candidate_cap:
            raise OracleCapacityError(f"estimated search space {estimate} exceeds cap {candidate_cap}")

    def partial_ok(name: str, coord: Coordinate, assigned: Dict[str, Coordinate]) -> bool:
        for other, other_coord in assigned.items():
            if other == name:
                continue
            if name in guarding or other in guarding:
                continue
            if name in pinned and other in pinned:
                continue
            if other in name_to_obj and euclidean_distance(coord, other_coord) < min_dist:
                return False
        probe = dict(assigned)
        probe[name] = coord
        for rec, ast in parsed:
            s, o = ref_name(rec.subject), ref_name(rec.object)
            if name not in (s, o) and ast.kind != RelationKind.BETWEEN:
                continue
            if s not in probe or o not in probe:
                continue
            sc, oc = probe[s], probe[o]
            dx, dy = sc.x - oc.x, sc.y - oc.y
            dist = euclidean_distance(sc, oc)
            if ast.kind == RelationKind.OFFSET:
                d = exact_delta(ast)
                if d is not None:
                    if abs(dx - d[0]) > OFFSET_TOLERANCE_MM or abs(dy - d[1]) > OFFSET_TOLERANCE_MM:
                        return False
                else:
                    for term, measured in ((ast.x, dx), (ast.y, dy)):
                        if term is None:
                            if abs(measured) > OFFSET_TOLERANCE_MM:
                                return False
                        elif term.magnitude_mm is None:
                            if term.sign * measured < MIN_OBJECT_DISTANCE_MM - OFFSET_TOLERANCE_MM:
                                return False
            elif ast.kind == RelationKind.DISTANCE:
                if abs(dist - ast.distance_mm) > OFFSET_TOLERANCE_MM:
                    return False
            elif ast.kind == RelationKind.ADJACENCY:
                lo, hi = ADJACENCY_RANGE_MM
                if not (lo - OFFSET_TOLERANCE_MM <= dist <= hi + OFFSET_TOLERANCE_MM):
                    return False
            elif ast.kind == RelationKind.BETWEEN:
                a = _resolve_reference_name(ast.anchor_a, probe)
                b = _resolve_reference_name(ast.anchor_b, probe)
                if a is not None and b is not None and s in probe:
                    mid = Coordinate(
                        round_mm((probe[a].x + probe[b].x) / 2.0),
                        round_mm((probe[a].y + probe[b].y) / 2.0),
                    )
                    if euclidean_distance(probe[s], mid) > BETWEEN_TOLERANCE_MM:
                        return False
        return True

    def assign_directions(coords: Dict[str, Coordinate]) -> List[Placement]:
        from .relations import parse_direction_text

        dirs: Dict[str, float] = {}
        for rec in positions:
            n = ref_name(rec.object_or_anchor)
            if n not in name_to_obj:
                continue
            if isinstance(rec.direction, Direction):
                dirs.setdefault(n, rec.direction.degrees)
            elif isinstance(rec.direction, str):
                deg = parse_direction_text(rec.direction)
                if deg is not None:
                    dirs.setdefault(n, normalize_direction(deg))
        for rec, ast in parsed:
            s, o = ref_name(rec.subject), ref_name(rec.object)
            if ast.kind == RelationKind.FACING and s in coords and o in coords and coords[s] != coords[o]:
                dirs.setdefault(s, compute_orientation(coords[s], coords[o]).degrees)
            elif ast.kind == RelationKind.PARALLEL:
                if s in dirs and o not in dirs:
                    dirs[o] = dirs[s]
                elif o in dirs and s not in dirs:
                    dirs[s] = dirs[o]
        return [Placement(name_to_obj[n], coords[n], Direction(dirs.get(n, 0.0))) for n in names]

    def search(index: int, assigned: Dict[str, Coordinate]) -> Optional[List[Placement]]:
        if index == len(order):
            placements = assign_directions(assigned)
            report = verify(placements, positions, relations, min_dist=min_dist)
            return placements if report.ok else None
        name = order[index]
        for coord in candidates_for(name, assigned):
            if not partial_ok(name, coord, assigned):
                continue
            assigned[name] = coord
            found = search(index + 1, assigned)
            if found is not None:
                return found
            del assigned[name]
        return None

    return search(0, {})
