"""Deterministic rule-based backend: a drop-in replacement for a hosted
model that computes each stage's answer over the relation grammar.

It reads task inputs from the request bindings when available and can
also recover them from rendered prompt text, so it works behind a plain
chat-completion wire. A weak variant injects seeded placement errors to
produce negative training material.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from typing import Dict, List, Optional, Sequence, Tuple

from . import analysis as nl
from .codegen import emit_csharp_deterministic
from .engine import (
    AssignmentSteps,
    VerificationReport,
    assign_placements,
    exact_delta,
    pinned_coordinates,
    propagate_coordinates,
    verify,
)
from .gateway import Message, PromptRequest, TemplateId
from .model import (
    Coordinate,
    DeltaRecord,
    Direction,
    GUARDING_NAME,
    DEFAULT_LIBRARY,
    NamedAnchor,
    ObjectInstance,
    Placement,
    PositionRecord,
    RelationRecord,
    ref_name,
)
from .relations import RelationKind, parse_relation
from .rng import derive_rng
from .wire import (
    format_coordinate,
    format_orientation,
    parse_placement_items,
    render_placements_json,
)

DEFAULT_ERROR_RATE = 0.35
_FALLBACK_ANSWER = "Error: No"

METHOD_ORDER = (
    "object_addition_replacement",
    "location_specification",
    "relation_specification",
    "quantity_modification",
    "fuzzy_expressions",
    "rephrasing",
)

METHOD_INSTRUCTIONS: Dict[str, str] = {
    "object_addition_replacement":
        "Introduce new objects or substitute one or more objects in the description "
        "with 2 to 4 objects randomly picked from the object library.",
    "location_specification":
        "Specify the locations of the objects in the description with reasonable "
        "coordinate values greater than -5000 and less than 5000. The distance "
        "between objects should be greater than 1 meter.",
    "relation_specification":
        "Specify the relations between two objects mentioned in the description. "
        "The relation may include distance, direction, or orientation. The distance "
        "between objects should be greater than 1 meter and less than 5 meters.",
    "quantity_modification":
        "Adjust the quantity of an object to a value between 3 and 10 if it is not "
        "assigned a placement or relations.",
    "fuzzy_expressions":
        "Replace precise numerical relations between two objects with ambiguous or "
        "qualitative expressions.",
    "rephrasing":
        "Restate the description using alternative wording while retaining its meaning.",
}

_FENCE_RE = re.compile(r"```(?:[a-zA-Z#]*)\n(.*?)```", re.DOTALL)
_OBJECT_LINE_RE = re.compile(r"are(?:\s+as\s+follows)?:\s*(\[.*?\])\s*$", re.MULTILINE)

_WIRE_ANCHORS: List[Tuple[TemplateId, str]] = [
    (TemplateId.PLACEMENT_FEEDBACK, "Your position allocation contains the following error"),
    (TemplateId.CODE_GENERATION, "You should write C# code"),
    (TemplateId.PLACEMENT_ASSIGNMENT, "Rewrite every relative position into the increment"),
    (TemplateId.PLACEMENT_VERIFICATION, "The allocated positions of objects are as follows"),
    (TemplateId.LAYOUT_EXTRACTION, "Only list coordinates directly provided"),
    (TemplateId.OBJECT_RETRIEVAL, "The original description is as follows"),
    (TemplateId.EVOLVE_REWRITE, "Apply the following rewriting method"),
    (TemplateId.DESCRIPTION_VALIDATION, "check whether the description itself is valid"),
]


def objects_from_names(names: Sequence[str]) -> List[ObjectInstance]:
    return [
        ObjectInstance(id=f"obj-{i + 1}", library_name=nl.library_name_for_display(n), display_name=n)
        for i, n in enumerate(names)
    ]


def records_from_bindings(bindings: Dict[str, str]):
    """Reconstruct objects, position records, and relation records from the
    JSON payloads embedded in an assignment prompt."""
    names = json.loads(bindings["objects"])
    objects = objects_from_names(names)
    by_display = {o.display_name.lower(): o for o in objects}

    positions: List[PositionRecord] = []
    anchors: Dict[str, NamedAnchor] = {}
    for item in parse_placement_items(json.loads(bindings.get("positions", "[]"))):
        ref = by_display.get(item["name"].lower())
        if ref is None:
            anchor = NamedAnchor(item["name"], item["coord"])
            anchors[item["name"].lower()] = anchor
            ref = anchor
        location = item["coord"] if item["coord"] is not None else (
            str(item["raw_position"]) if item["raw_position"] not in (None, "") else None
        )
        direction = None
        if item["orientation"] is not None:
            direction = Direction(item["orientation"])
        elif item["raw_orientation"] not in (None, ""):
            direction = str(item["raw_orientation"])
        if location is None and direction is None:
            continue
        positions.append(PositionRecord(ref, location=location, direction=direction))

    relations: List[RelationRecord] = []
    for item in json.loads(bindings.get("relations", "[]")):
        if not isinstance(item, dict):
            continue
        s_name = str(item.get("object 1", "")).strip()
        o_name = str(item.get("object 2", "")).strip()
        text = str(item.get("relation", "")).strip()
        if not s_name or not o_name or s_name.lower() == o_name.lower():
            continue
        s_ref = by_display.get(s_name.lower()) or anchors.get(s_name.lower()) or NamedAnchor(s_name)
        o_ref = by_display.get(o_name.lower()) or anchors.get(o_name.lower()) or NamedAnchor(o_name)
        relations.append(RelationRecord(s_ref, o_ref, text))
    return objects, positions, relations


# --- answer renderers --------------------------------------------------------

def _positions_payload(placements: Sequence[Placement], only: Optional[set] = None) -> str:
    items = []
    for p in placements:
        if only is not None and p.object.display_name not in only:
            continue
        items.append({
            "name": p.object.display_name,
            "position": format_coordinate(p.coord),
            "orientation": format_orientation(p.dir.degrees),
        })
    return json.dumps(items, indent=4)


def render_assignment_answer(steps: AssignmentSteps, placements: Sequence[Placement]) -> str:
    delta_items = [
        {
            "object 1": ref_name(d.subject),
            "relation": f"[{d.dx}, {d.dy}, 0]",
            "object 2": ref_name(d.object),
        }
        for d in steps.deltas
    ]
    derived_names = set(steps.derived)
    lines = [
        "#Step 1: Rewrite Relative Position#",
        "Analysis: Each relative position is rewritten as a signed coordinate "
        "increment along the stated axes, with front as +x, back as -x, left as +y, "
        "and right as -y. Distances the description leaves open are chosen between "
        "1000 and 5000 mm.",
        "New Relative Positions:",
        json.dumps(delta_items, indent=4),
        "",
        "#Step 2: Calculate Coordinates#",
        "Analysis: Starting from the declared coordinates, each increment is "
        "applied to derive the coordinates of connected objects.",
        "Positions:",
        _positions_payload(placements, only=derived_names),
        "",
        "#Step 3: Assign Positions#",
        "Analysis: The remaining objects are placed on free positions at least "
        "1000 mm away from every other non-Guarding object, inside [-5000, 5000]. "
        "Orientations follow the stated facings, defaulting to 0 degrees.",
        "Positions:",
        _positions_payload(placements),
    ]
    return "\n".join(lines)


def render_verification_answer(placements: Sequence[Placement], report: VerificationReport) -> str:
    relation_bits = "; ".join(
        f"{p.object.display_name} at {p.coord.as_list()} facing {p.dir.degrees:g} degrees"
        for p in placements
    ) or "no objects are placed"
    if report.ok:
        analysis = ("All stated coordinates are honored, derived relative positions "
                    "match the allocations, and every non-exempt pair keeps at least "
                    "1000 mm of separation.")
    else:
        analysis = "The following problems were found: " + " ".join(
            f"[{v.kind.value}] {v.detail}." for v in report.violations
        )
    return (
        f"Relations: {relation_bits}\n\n"
        f"Analysis: {analysis}\n\n"
        f"Error: {'Yes' if not report.ok else 'No'}"
    )


def render_retrieval_answer(step1: Sequence[str], step2: Sequence[str], new_description: str) -> str:
    return "\n".join([
        "#Step 1: Find all objects#",
        "Analysis: Listing every object the description asks for, once per instance; "
        "stations, workstations, and scenes are not objects.",
        f"Objects: {json.dumps(list(step1))}",
        "",
        "#Step 2: Fix object names#",
        "Analysis: Each object is mapped to its counterpart in the permission list; "
        "generic kinds become specific library entries.",
        f"Objects: {json.dumps(list(step2))}",
        "",
        "#Step 3: Rewrite description#",
        "Analysis: The description is restated with canonical object names, keeping "
        "all positional, directional, and orientational information.",
        f"New Description: {new_description}",
    ])


def render_extraction_answer(
    objects: Sequence[str], positions_json: str, relations_json: str
) -> str:
    return "\n".join([
        "#Step 1: Identify Objects#",
        "Analysis: Every instance from the object list that the description places "
        "in the scene, with numeric suffixes telling duplicates apart.",
        "Objects:",
        json.dumps(list(objects), indent=4),
        "",
        "#Step 2: Absolute Positions#",
        "Analysis: Only coordinates and orientations stated literally in the "
        "description are listed; nothing is computed here.",
        "Positions:",
        positions_json,
        "",
        "#Step 3: Relative Positions#",
        "Analysis: Each pairwise relative position, listed once per pair.",
        "Relative Positions:",
        relations_json,
    ])


# --- scripted rewriting (Evol-Instruct stand-in) ------------------------------

_LIBRARY_KINDS = [name for name, _ in DEFAULT_LIBRARY.entries]


def _article(name: str) -> str:
    return "an" if name[0].lower() in "aeiou" else "a"


def _pluralize(surface: str) -> str:
    return surface if surface.lower().endswith("s") else surface + "s"


def scripted_rewrite(description: str, method: str, rng: random.Random) -> str:
    """Apply one of the six rewriting methods mechanically, honoring each
    method's numeric ranges."""
    analysis = nl.analyze(description)
    if method == "object_addition_replacement":
        mentions = [m for m in nl.scan_mentions(description) if m.instance_indices or m.canonical]
        if mentions and rng.random() < 0.5:
            mention = mentions[rng.randrange(len(mentions))]
            others = [k for k in _LIBRARY_KINDS if k != mention.canonical]
            replacement = others[rng.randrange(len(others))]
            surface = _pluralize(replacement) if mention.surface.lower().endswith("s") else replacement
            return description[:mention.start] + surface + description[mention.end:]
        k = rng.randint(2, 4)
        picks = rng.sample(_LIBRARY_KINDS, k)
        listed = ", ".join(f"{_article(p)} {p}" for p in picks[:-1])
        joined = f"{listed} and {_article(picks[-1])} {picks[-1]}" if len(picks) > 1 else f"{_article(picks[0])} {picks[0]}"
        return description.rstrip() + f" The scene also includes {joined}."

    if method == "location_specification":
        pinned = [f.coord for f in analysis.positions if f.coord is not None]
        target = _last_of_kind_without_coord(analysis)
        if target is None:
            return scripted_rewrite(description, "object_addition_replacement", rng)
        for _ in range(30):
            x = rng.randrange(-4900, 4901, 100)
            y = rng.randrange(-4900, 4901, 100)
            candidate = Coordinate(x, y)
            from .model import euclidean_distance

            if all(euclidean_distance(candidate, c) >= 1000 for c in pinned):
                return description.rstrip() + f" The {target} is at [{x}, {y}, 0]."
        return description.rstrip() + f" The {target} is at [0, 0, 0]."

    if method == "relation_specification":
        kinds = _last_instances_by_kind(analysis)
        related = {
            frozenset((analysis.instances[r.subject].display, analysis.instances[r.object].display))
            for r in analysis.relations
        }
        d = rng.randrange(11, 50) / 10.0
        word = ("in front of", "behind", "to the left of", "to the right of")[rng.randrange(4)]
        options = [
            (a, b) for i, a in enumerate(kinds) for b in kinds[i + 1:]
            if frozenset((a, b)) not in related
        ]
        if options:
            a, b = options[rng.randrange(len(options))]
            return description.rstrip() + f" The {a} is {d:.1f} meters {word} the {b}."
        if kinds:
            other = [k for k in _LIBRARY_KINDS if k not in kinds]
            new_kind = other[rng.randrange(len(other))] if other else "Cabinet"
            return description.rstrip() + f" {_article(new_kind).capitalize()} {new_kind} is {d:.1f} meters {word} the {kinds[-1]}."
        return scripted_rewrite(description, "object_addition_replacement", rng)

    if method == "quantity_modification":
        n = rng.randint(3, 10)
        facts = {f.instance for f in analysis.positions}
        for r in analysis.relations:
            facts.add(r.subject)
            facts.add(r.object)
        for mention in nl.scan_mentions(description):
            if not mention.instance_indices or mention.fuzzy_count:
                continue
            if any(i in facts for i in mention.instance_indices):
                continue
            if mention.count != 1 or mention.definite or mention.ordinal:
                continue
            prefix_start = _quantity_prefix_start(description, mention.start)
            return (
                description[:prefix_start]
                + f"{n} {_pluralize(mention.surface)}"
                + description[mention.end:]
            )
        kind = _LIBRARY_KINDS[rng.randrange(len(_LIBRARY_KINDS))]
        return description.rstrip() + f" Add {n} {_pluralize(kind)}."

    if method == "fuzzy_expressions":
        numeric = [
            r for r in analysis.relations
            if r.span is not None and _has_magnitude(r.text)
        ]
        if numeric:
            rel = numeric[rng.randrange(len(numeric))]
            start, end = rel.span
            softener = (" is next to ", " is near ", " is beside ")[rng.randrange(3)]
            return description[:start] + softener + description[end:]
        return scripted_rewrite(description, "rephrasing", rng)

    if method == "rephrasing":
        substitutions = [
            ("Position a", "Place a"), ("Position the", "Place the"),
            ("position a", "place a"), (" is at ", " is located at "),
            (" next to ", " beside "), ("Create", "Set up"),
            ("Give me", "Provide"), ("meters", "metres"),
        ]
        out = description
        applied = False
        for old, new in substitutions:
            if old in out:
                out = out.replace(old, new)
                applied = True
        if not applied:
            out = "Please prepare the following setup: " + out
        return out

    raise ValueError(f"unknown rewriting method: {method!r}")


def _has_magnitude(text: str) -> bool:
    ast = parse_relation(text)
    if ast.kind == RelationKind.DISTANCE:
        return True
    if ast.kind == RelationKind.OFFSET:
        return (ast.x is not None and ast.x.magnitude_mm is not None) or (
            ast.y is not None and ast.y.magnitude_mm is not None
        )
    return False


def _last_of_kind_without_coord(analysis: nl.SceneAnalysis) -> Optional[str]:
    with_coord = {f.instance for f in analysis.positions if f.coord is not None}
    last_by_kind: Dict[str, int] = {}
    for idx, info in enumerate(analysis.instances):
        last_by_kind[info.canonical] = idx
    for kind, idx in last_by_kind.items():
        if idx not in with_coord:
            return analysis.instances[idx].display
    return None


def _last_instances_by_kind(analysis: nl.SceneAnalysis) -> List[str]:
    last_by_kind: Dict[str, int] = {}
    for idx, info in enumerate(analysis.instances):
        last_by_kind[info.canonical] = idx
    return [analysis.instances[idx].display for idx in last_by_kind.values()]


def _quantity_prefix_start(text: str, mention_start: int) -> int:
    lookback = text[max(0, mention_start - 40):mention_start]
    m = re.search(r"(?:\b(?:a|an|one)\s+)$", lookback, re.IGNORECASE)
    if m:
        return mention_start - len(m.group(0))
    return mention_start


# --- the backend --------------------------------------------------------------

class ScriptedBackend:
    """Computes every stage's answer deterministically from the request."""

    def __init__(self, seed: int = 0, weak: bool = False, error_rate: float = DEFAULT_ERROR_RATE):
        self.seed = seed
        self.weak = weak
        self.error_rate = error_rate
        self.name = "scripted-weak" if weak else "scripted"
        self._primed: List[Tuple[TemplateId, str]] = []

    def prime(self, template_id: TemplateId, text: str) -> None:
        """Queue a canned reply consumed by the next matching request."""
        self._primed.append((template_id, text))

    # -- plumbing

    def _rng(self, template_id: TemplateId, bindings: Dict[str, str], messages: Sequence[Message]) -> random.Random:
        digest = hashlib.sha256(
            json.dumps(bindings, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()[:16]
        rounds = sum(1 for m in messages if m.role == "assistant")
        return derive_rng(self.seed, f"{template_id.value}:{digest}:{rounds}")

    def complete(self, request: Optional[PromptRequest], messages: Sequence[Message]) -> str:
        template_id, bindings = self._resolve(request, messages)
        if template_id is None:
            return _FALLBACK_ANSWER
        for i, (primed_id, text) in enumerate(self._primed):
            if primed_id == template_id:
                del self._primed[i]
                return text
        rng = self._rng(template_id, bindings, messages)

        if template_id == TemplateId.OBJECT_RETRIEVAL:
            return self._retrieval(bindings)
        if template_id == TemplateId.LAYOUT_EXTRACTION:
            return self._extraction(bindings)
        if template_id == TemplateId.PLACEMENT_ASSIGNMENT:
            return self._assignment(bindings, rng, weak=self.weak)
        if template_id == TemplateId.PLACEMENT_FEEDBACK:
            origin = self._original_assignment(messages)
            if origin is None:
                return _FALLBACK_ANSWER
            return self._assignment(origin, rng, weak=False)
        if template_id == TemplateId.PLACEMENT_VERIFICATION:
            return self._verification(bindings)
        if template_id == TemplateId.DESCRIPTION_VALIDATION:
            return self._validation(bindings, rng)
        if template_id == TemplateId.CODE_GENERATION:
            return self._code(bindings)
        if template_id == TemplateId.EVOLVE_REWRITE:
            return self._rewrite(bindings, rng)
        return _FALLBACK_ANSWER

    def _resolve(self, request: Optional[PromptRequest], messages: Sequence[Message]):
        if request is not None:
            if not isinstance(request.template_id, TemplateId):
                return None, {}
            return request.template_id, dict(request.bindings)
        prompt = messages[-1].content if messages else ""
        for template_id, anchor in _WIRE_ANCHORS:
            if anchor in prompt:
                return template_id, self._recover_bindings(template_id, prompt)
        return None, {}

    def _recover_bindings(self, template_id: TemplateId, prompt: str) -> Dict[str, str]:
        fences = [m.group(1).strip("\n") for m in _FENCE_RE.finditer(prompt)]
        first = fences[0] if fences else ""
        if template_id == TemplateId.OBJECT_RETRIEVAL:
            return {"prompt": first}
        if template_id == TemplateId.LAYOUT_EXTRACTION:
            m = _OBJECT_LINE_RE.search(prompt)
            return {"prompt": first, "objects": m.group(1) if m else "[]"}
        if template_id == TemplateId.PLACEMENT_ASSIGNMENT:
            m = _OBJECT_LINE_RE.search(prompt)
            return {
                "prompt": first,
                "objects": m.group(1) if m else "[]",
                "positions": fences[1] if len(fences) > 1 else "[]",
                "relations": fences[2] if len(fences) > 2 else "[]",
            }
        if template_id == TemplateId.PLACEMENT_VERIFICATION:
            return {"prompt": first, "placements": fences[1] if len(fences) > 1 else "[]"}
        if template_id == TemplateId.PLACEMENT_FEEDBACK:
            return {"feedback": first}
        if template_id == TemplateId.CODE_GENERATION:
            m = _OBJECT_LINE_RE.search(prompt)
            return {
                "prompt": first,
                "objects": m.group(1) if m else "[]",
                "placements": fences[1] if len(fences) > 1 else "[]",
            }
        if template_id == TemplateId.EVOLVE_REWRITE:
            method = ""
            m = re.search(r"Apply the following rewriting method:\s*\n(.+?)\nThe rewritten", prompt, re.DOTALL)
            instruction = m.group(1).strip() if m else ""
            for name, text in METHOD_INSTRUCTIONS.items():
                if instruction and instruction == text:
                    method = name
                    break
            return {"description": first, "method_instruction": instruction, "method": method}
        if template_id == TemplateId.DESCRIPTION_VALIDATION:
            return {"description": first}
        return {}

    def _original_assignment(self, messages: Sequence[Message]) -> Optional[Dict[str, str]]:
        for message in messages:
            if message.request is not None and message.request.template_id == TemplateId.PLACEMENT_ASSIGNMENT:
                return dict(message.request.bindings)
        for message in messages:
            if message.role == "user" and "Rewrite every relative position into the increment" in message.content:
                return self._recover_bindings(TemplateId.PLACEMENT_ASSIGNMENT, message.content)
        return None

    # -- stage computations

    def _retrieval(self, bindings: Dict[str, str]) -> str:
        description = bindings.get("prompt", "")
        analysis = nl.analyze(description)
        if not analysis.instances:
            description2 = description.rstrip() + (
                " The scene also includes a Welding Table, a Kuka Robot KR125 and a Conveyor."
            )
            analysis = nl.analyze(description2)
        mentions = nl.scan_mentions(description)
        step1: List[str] = []
        for m in mentions:
            if m.canonical is None:
                continue
            step1.extend([m.surface.strip()] * max(1, m.count if not m.fuzzy_count else 1))
        step2 = [info.canonical for info in analysis.instances]
        return render_retrieval_answer(step1, step2, nl.rewrite_description(analysis))

    def _extraction(self, bindings: Dict[str, str]) -> str:
        s = bindings.get("prompt", "")
        objects = json.loads(bindings.get("objects", "[]"))
        analysis = nl.analyze(s, known_names=objects)
        listed = analysis.display_names()
        for name in objects:
            if name not in listed:
                listed.append(name)
        position_items = []
        facing_subjects = {
            analysis.instances[r.subject].display
            for r in analysis.relations
            if parse_relation(r.text).kind == RelationKind.FACING
        }
        for fact in analysis.positions:
            display = analysis.instances[fact.instance].display
            item = {"name": display}
            if fact.coord is not None:
                item["position"] = format_coordinate(fact.coord)
            if fact.direction_deg is not None:
                item["orientation"] = format_orientation(fact.direction_deg)
            elif fact.coord is not None and display not in facing_subjects:
                item["orientation"] = "0"
            position_items.append(item)
        relation_items = [
            {
                "object 1": analysis.instances[r.subject].display,
                "relation": r.text,
                "object 2": analysis.instances[r.object].display,
            }
            for r in analysis.relations
        ]
        return render_extraction_answer(
            listed, json.dumps(position_items, indent=4), json.dumps(relation_items, indent=4)
        )

    def _assignment(self, bindings: Dict[str, str], rng: random.Random, weak: bool) -> str:
        objects, positions, relations = records_from_bindings(bindings)
        steps = assign_placements(positions, relations, objects, rng)
        placements = list(steps.placements)
        if weak and rng.random() < self.error_rate:
            injected = inject_placement_error(placements, positions, relations, rng)
            if injected is not None:
                placements = injected
        return render_assignment_answer(steps, placements)

    def _verification(self, bindings: Dict[str, str]) -> str:
        description = bindings.get("prompt", "")
        items = parse_placement_items(json.loads(bindings.get("placements", "[]")))
        names = [item["name"] for item in items]
        objects = objects_from_names(names)
        placements = [
            Placement(
                obj,
                item["coord"] if item["coord"] is not None else Coordinate(0, 0),
                Direction(item["orientation"] if item["orientation"] is not None else 0.0),
            )
            for obj, item in zip(objects, items)
        ]
        analysis = nl.analyze(description, known_names=names)
        positions, relations, _ = nl.build_layout(analysis, objects)
        report = verify(placements, positions, relations)
        return render_verification_answer(placements, report)

    def _validation(self, bindings: Dict[str, str], rng: random.Random) -> str:
        description = bindings.get("description", "")
        analysis = nl.analyze(description)
        objects = nl.build_objects(analysis)
        positions, relations, _ = nl.build_layout(analysis, objects)
        steps = assign_placements(positions, relations, objects, rng)
        report = verify(steps.placements, positions, relations)
        return render_verification_answer(steps.placements, report)

    def _code(self, bindings: Dict[str, str]) -> str:
        items = parse_placement_items(json.loads(bindings.get("placements", "[]")))
        objects = objects_from_names([item["name"] for item in items])
        placements = [
            Placement(
                obj,
                item["coord"] if item["coord"] is not None else Coordinate(0, 0),
                Direction(item["orientation"] if item["orientation"] is not None else 0.0),
            )
            for obj, item in zip(objects, items)
        ]
        return emit_csharp_deterministic(placements)

    def _rewrite(self, bindings: Dict[str, str], rng: random.Random) -> str:
        description = bindings.get("description", "")
        method = bindings.get("method", "")
        if method not in METHOD_INSTRUCTIONS:
            instruction = bindings.get("method_instruction", "")
            method = next(
                (name for name, text in METHOD_INSTRUCTIONS.items() if text == instruction),
                "rephrasing",
            )
        return "New Description: " + scripted_rewrite(description, method, rng)


def inject_placement_error(
    placements: Sequence[Placement],
    positions: Sequence[PositionRecord],
    relations: Sequence[RelationRecord],
    rng: random.Random,
) -> Optional[List[Placement]]:
    """Perturb one placement so that deterministic verification flags it:
    offset a derivable object by 1100-3000 mm, else push one object into
    another's exclusion zone. None when the instance has nothing to break."""
    out = list(placements)
    pinned = pinned_coordinates(positions)
    exact_deltas = []
    for rec in relations:
        d = exact_delta(parse_relation(rec.relation_text))
        if d is not None:
            exact_deltas.append(DeltaRecord(rec.subject, rec.object, d[0], d[1]))
    derivable = set(propagate_coordinates(pinned, exact_deltas).coords)

    candidates = [
        i for i, p in enumerate(out)
        if p.object.display_name in derivable and p.object.library_name != GUARDING_NAME
    ]
    if candidates:
        i = candidates[rng.randrange(len(candidates))]
        magnitude = rng.randrange(1100, 3001, 100)
        dx, dy = [(magnitude, 0), (0, magnitude), (-magnitude, 0), (0, -magnitude)][rng.randrange(4)]
        p = out[i]
        out[i] = Placement(p.object, p.coord.offset(dx, dy), p.dir)
        return out

    movable = [i for i, p in enumerate(out) if p.object.library_name != GUARDING_NAME]
    if len(movable) >= 2:
        i, j = movable[0], movable[1]
        if out[i].object.display_name in pinned and out[j].object.display_name in pinned:
            return None
        target = out[j].coord.offset(500, 0)
        out[i] = Placement(out[i].object, target, out[i].dir)
        return out
    return None
