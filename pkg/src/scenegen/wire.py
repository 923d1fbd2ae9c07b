"""JSON shapes used inside prompts and model answers.

Positions/relations/placements travel as small JSON arrays whose
coordinate values are strings like "[1500, 2500, 0]" (matching observed
model output); parsers here accept both the string-embedded and native
array forms.
"""

from __future__ import annotations

import json
import re
from typing import List, Optional, Sequence, Union

from .model import Coordinate, Direction, Placement, PositionRecord, RelationRecord, ref_name, round_mm
from .relations import parse_direction_text


class WireFormatError(ValueError):
    """A JSON payload did not carry the expected shape."""


_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def parse_coordinate_value(value: Union[str, Sequence]) -> Coordinate:
    """Accept "[1500, 2500, 0]", "[-1234mm,-2001mm,0]", or [1500, 2500, 0]."""
    if isinstance(value, str):
        numbers = _NUMBER_RE.findall(value)
        if len(numbers) < 2:
            raise WireFormatError(f"not a coordinate: {value!r}")
        xs = [float(n) for n in numbers[:2]]
        return Coordinate(round_mm(xs[0]), round_mm(xs[1]), 0)
    if isinstance(value, (list, tuple)) and len(value) >= 2:
        return Coordinate(round_mm(float(value[0])), round_mm(float(value[1])), 0)
    raise WireFormatError(f"not a coordinate: {value!r}")


def parse_orientation_value(value) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return float(value)
    return parse_direction_text(str(value))


def format_coordinate(coord: Coordinate) -> str:
    return f"[{coord.x}, {coord.y}, 0]"


def format_orientation(degrees: float) -> str:
    if abs(degrees - round(degrees)) < 1e-9:
        return str(int(round(degrees)))
    return f"{degrees:.1f}"


def render_positions_json(records: Sequence[PositionRecord]) -> str:
    items = []
    for rec in records:
        item: dict = {"name": ref_name(rec.object_or_anchor)}
        if isinstance(rec.location, Coordinate):
            item["position"] = format_coordinate(rec.location)
        elif isinstance(rec.location, str):
            item["position"] = rec.location
        if isinstance(rec.direction, Direction):
            item["orientation"] = format_orientation(rec.direction.degrees)
        elif isinstance(rec.direction, str):
            item["orientation"] = rec.direction
        items.append(item)
    return json.dumps(items, indent=4)


def render_relations_json(records: Sequence[RelationRecord]) -> str:
    items = [
        {
            "object 1": ref_name(rec.subject),
            "relation": rec.relation_text,
            "object 2": ref_name(rec.object),
        }
        for rec in records
    ]
    return json.dumps(items, indent=4)


def render_placements_json(placements: Sequence[Placement]) -> str:
    items = [
        {
            "name": p.object.display_name,
            "position": format_coordinate(p.coord),
            "orientation": format_orientation(p.dir.degrees),
        }
        for p in placements
    ]
    return json.dumps(items, indent=4)


def parse_placement_items(payload) -> List[dict]:
    """Normalize a positions payload into dicts with name/coord/orientation."""
    if not isinstance(payload, list):
        raise WireFormatError(f"expected a JSON array of positions, got {type(payload).__name__}")
    out = []
    for item in payload:
        if not isinstance(item, dict) or "name" not in item:
            raise WireFormatError(f"bad position entry: {item!r}")
        coord = None
        if item.get("position") not in (None, ""):
            try:
                coord = parse_coordinate_value(item["position"])
            except WireFormatError:
                coord = None
        orientation = parse_orientation_value(item.get("orientation"))
        out.append({"name": str(item["name"]), "coord": coord, "orientation": orientation,
                    "raw_position": item.get("position"), "raw_orientation": item.get("orientation")})
    return out
