"""Stage orchestration: object retrieval, layout extraction, and the
assign/verify/reassign loop, end to end from a description to a scene.

Each stage issues one prompt, parses the staged reply, and re-asks up to
twice with the parse error appended before giving up on the sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import analysis as nl
from .engine import VerificationReport, render_feedback, verify
from .gateway import (
    LlmGateway,
    Message,
    PromptRequest,
    StructuredOutput,
    StructuredOutputError,
    TemplateId,
    parse_structured,
)
from .model import (
    Coordinate,
    Direction,
    NamedAnchor,
    ObjectInstance,
    ObjectLibrary,
    DEFAULT_LIBRARY,
    Placement,
    PositionRecord,
    RelationRecord,
    Scene,
)
from .wire import (
    parse_orientation_value,
    parse_placement_items,
    parse_coordinate_value,
    render_positions_json,
    render_relations_json,
    WireFormatError,
)

PARSE_REASKS = 2
REMOVED = "REMOVED"


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


@dataclass
class RetrievalResult:
    objects: List[ObjectInstance]
    rewritten_description: str
    substitutions: List[Tuple[str, str]] = field(default_factory=list)


@dataclass
class LayoutInfo:
    positions: List[PositionRecord]
    relations: List[RelationRecord]
    anchors: List[NamedAnchor] = field(default_factory=list)


@dataclass
class RefinementResult:
    placements: List[Placement]
    report: VerificationReport
    iterations: int
    messages: List[Message] = field(default_factory=list)


@dataclass
class PipelineResult:
    scene: Scene
    report: VerificationReport
    retrieval: RetrievalResult
    layout: LayoutInfo
    iterations: int

    @property
    def ok(self) -> bool:
        return self.report.ok


def _complete_parsed(
    gateway: LlmGateway,
    request: PromptRequest,
    template_id: TemplateId,
    history: Sequence[Message] = (),
    stage: str = "",
) -> Tuple[StructuredOutput, str, List[Message]]:
    """One completion plus up to PARSE_REASKS re-asks on parse failure."""
    messages = list(history)
    current = request
    for attempt in range(PARSE_REASKS + 1):
        text = gateway.complete(current, messages)
        sent = Message("user", gateway.render(current), current)
        messages = messages + [sent, Message("assistant", text)]
        try:
            return parse_structured(text, template_id), text, messages
        except StructuredOutputError as err:
            if attempt == PARSE_REASKS:
                raise StageError(stage or template_id.value, f"unparseable reply after re-asks: {err}")
            messages = messages + [
                Message(
                    "user",
                    f"Your reply could not be parsed ({err}). "
                    "Please answer again, strictly in the required format.",
                )
            ]
    raise StageError(stage or template_id.value, "unreachable")


def _canonicalize_name(name: str, library: ObjectLibrary) -> Optional[str]:
    for canonical in library.names:
        if name.strip().lower() == canonical.lower():
            return canonical
    guess = nl._canonical_for(name.strip(), None)
    if guess is not None and guess in library:
        return guess
    return None


def retrieve_objects(
    description: str, library: ObjectLibrary = DEFAULT_LIBRARY, gateway: LlmGateway = None
) -> RetrievalResult:
    """Stage 1: identify objects, map them into the library, and rewrite
    the description down to its layout content."""
    if not description or not description.strip():
        raise ValueError("description must be non-empty")
    request = PromptRequest(TemplateId.OBJECT_RETRIEVAL, bindings={"prompt": description})
    parsed, _, _ = _complete_parsed(gateway, request, TemplateId.OBJECT_RETRIEVAL, stage="object-retrieval")

    raw_names = parsed.payload(0)
    fixed_names = parsed.payload(1)
    rewritten = str(parsed.payload(2)).strip()
    if not isinstance(fixed_names, list):
        raise StageError("object-retrieval", "Step 2 did not return a list of objects")

    substitutions: List[Tuple[str, str]] = []
    canonical_names: List[str] = []
    originals = raw_names if isinstance(raw_names, list) and len(raw_names) == len(fixed_names) else fixed_names
    for original, name in zip(originals, fixed_names):
        canonical = _canonicalize_name(str(name), library)
        if canonical is None:
            substitutions.append((str(original), REMOVED))
            continue
        if str(original).strip().lower() != canonical.lower():
            substitutions.append((str(original), canonical))
        canonical_names.append(canonical)

    totals: Dict[str, int] = {}
    for name in canonical_names:
        totals[name] = totals.get(name, 0) + 1
    counters: Dict[str, int] = {}
    objects: List[ObjectInstance] = []
    for i, name in enumerate(canonical_names):
        counters[name] = counters.get(name, 0) + 1
        display = name if totals[name] == 1 else f"{name} {counters[name]}"
        objects.append(ObjectInstance(id=f"obj-{i + 1}", library_name=name, display_name=display))

    if not rewritten:
        raise StageError("object-retrieval", "empty rewritten description")
    return RetrievalResult(objects=objects, rewritten_description=rewritten, substitutions=substitutions)


def extract_layout(
    s: str, objects: Sequence[ObjectInstance], gateway: LlmGateway = None
) -> LayoutInfo:
    """Stage 2: pull the literal positions and pairwise relations out of
    the rewritten description."""
    display_names = [o.display_name for o in objects]
    request = PromptRequest(
        TemplateId.LAYOUT_EXTRACTION,
        bindings={"prompt": s, "objects": json.dumps(display_names)},
    )
    parsed, _, _ = _complete_parsed(gateway, request, TemplateId.LAYOUT_EXTRACTION, stage="layout-extraction")

    by_display = {o.display_name.lower(): o for o in objects}
    anchors: Dict[str, NamedAnchor] = {}

    positions: List[PositionRecord] = []
    raw_positions = parsed.payload(1)
    if not isinstance(raw_positions, list):
        raise StageError("layout-extraction", "Positions payload is not a list")
    for item in raw_positions:
        if not isinstance(item, dict) or "name" not in item:
            continue
        name = str(item["name"])
        coord: Optional[Coordinate] = None
        location = None
        if item.get("position") not in (None, ""):
            try:
                coord = parse_coordinate_value(item["position"])
                location = coord
            except WireFormatError:
                location = str(item["position"])
        direction = None
        raw_orientation = item.get("orientation")
        if raw_orientation not in (None, ""):
            deg = parse_orientation_value(raw_orientation)
            direction = Direction(deg) if deg is not None else str(raw_orientation)
        ref = by_display.get(name.lower())
        if ref is None:
            anchor = NamedAnchor(name, coord)
            anchors[name.lower()] = anchor
            ref = anchor
        if location is None and direction is None:
            continue
        positions.append(PositionRecord(ref, location=location, direction=direction))

    relations: List[RelationRecord] = []
    seen_pairs = set()
    raw_relations = parsed.payload(2)
    if not isinstance(raw_relations, list):
        raise StageError("layout-extraction", "Relative Positions payload is not a list")
    for item in raw_relations:
        if not isinstance(item, dict):
            continue
        s_name = str(item.get("object 1", "")).strip()
        o_name = str(item.get("object 2", "")).strip()
        text = str(item.get("relation", "")).strip()
        if not s_name or not o_name or not text or s_name.lower() == o_name.lower():
            continue
        s_ref = by_display.get(s_name.lower()) or anchors.get(s_name.lower())
        o_ref = by_display.get(o_name.lower()) or anchors.get(o_name.lower())
        if s_ref is None:
            raise StageError("layout-extraction", f"relation names unknown object {s_name!r}")
        if o_ref is None:
            raise StageError("layout-extraction", f"relation names unknown object {o_name!r}")
        key = frozenset((s_name.lower(), o_name.lower()))
        if key in seen_pairs:
            continue
        seen_pairs.add(key)
        relations.append(RelationRecord(s_ref, o_ref, text))

    return LayoutInfo(positions=positions, relations=relations, anchors=list(anchors.values()))


def assign_with_refinement(
    positions: Sequence[PositionRecord],
    relations: Sequence[RelationRecord],
    s: str,
    objects: Sequence[ObjectInstance],
    gateway: LlmGateway,
    max_iters: int = 3,
) -> RefinementResult:
    """Assignment with the verify/feedback loop.

    ``max_iters`` bounds the feedback rounds after the initial assignment
    (0 means assign once and return whatever verification says). The
    returned result always carries the final report; a still-failing
    placement comes back flagged rather than raising.
    """
    display_names = [o.display_name for o in objects]
    request = PromptRequest(
        TemplateId.PLACEMENT_ASSIGNMENT,
        bindings={
            "prompt": s,
            "objects": json.dumps(display_names),
            "positions": render_positions_json(list(positions)),
            "relations": render_relations_json(list(relations)),
        },
    )

    messages: List[Message] = []
    iterations = 0
    placements: List[Placement] = []
    report = VerificationReport.from_violations([])
    current = request
    template = TemplateId.PLACEMENT_ASSIGNMENT
    while True:
        parsed, _, messages = _complete_parsed(
            gateway, current, template, history=messages, stage="placement-assignment"
        )
        iterations += 1
        placements = _placements_from_payload(parsed.payload(2), objects)
        report = verify(placements, positions, relations)
        if report.ok or iterations > max_iters:
            break
        feedback = render_feedback(report, placements)
        current = PromptRequest(TemplateId.PLACEMENT_FEEDBACK, bindings={"feedback": feedback})
        template = TemplateId.PLACEMENT_FEEDBACK
    return RefinementResult(placements=placements, report=report, iterations=iterations, messages=messages)


def _placements_from_payload(payload, objects: Sequence[ObjectInstance]) -> List[Placement]:
    try:
        items = parse_placement_items(payload)
    except WireFormatError as err:
        raise StageError("placement-assignment", str(err))
    by_name = {item["name"].lower(): item for item in items}
    placements = []
    for obj in objects:
        item = by_name.get(obj.display_name.lower())
        if item is None or item["coord"] is None:
            raise StageError(
                "placement-assignment",
                f"the final positions are missing {obj.display_name!r}",
            )
        orientation = item["orientation"] if item["orientation"] is not None else 0.0
        placements.append(Placement(obj, item["coord"], Direction(orientation)))
    return placements


def generate_scene(
    description: str,
    gateway: LlmGateway,
    library: ObjectLibrary = DEFAULT_LIBRARY,
    max_iters: int = 3,
) -> PipelineResult:
    """The whole analysis pipeline: retrieval, extraction, assignment with
    verification, packed into a Scene bound to the source description."""
    retrieval = retrieve_objects(description, library, gateway)
    layout = extract_layout(retrieval.rewritten_description, retrieval.objects, gateway)
    refinement = assign_with_refinement(
        layout.positions,
        layout.relations,
        retrieval.rewritten_description,
        retrieval.objects,
        gateway,
        max_iters=max_iters,
    )
    scene = Scene(
        objects=tuple(retrieval.objects),
        placements=tuple(refinement.placements),
        source_description=description,
    )
    return PipelineResult(
        scene=scene,
        report=refinement.report,
        retrieval=retrieval,
        layout=layout,
        iterations=refinement.iterations,
    )
