"""Rule-based reading of scene descriptions.

This is the deterministic stand-in for the language-model analysis
stages: it scans a description for object mentions (with quantities and
coreference), literal coordinates, orientations, and pairwise relation
phrases, and can render the canonical rewritten description the
downstream stages consume. Descriptions outside this grammar are not
errors; they come back flagged as not fully parsed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .model import (
    Coordinate,
    Direction,
    NamedAnchor,
    ObjectInstance,
    PositionRecord,
    RelationRecord,
    normalize_direction,
    round_mm,
)
from .relations import RelationKind, parse_direction_text, parse_relation

# surface pattern -> canonical library name; longest patterns first so the
# combined alternation prefers specific names over generic ones
_VOCAB: List[Tuple[str, str]] = [
    (r"kuka\s+robot\s+kr\s*125", "Kuka Robot KR125"),
    (r"kuka\s+robot\s+kr\s*350", "Kuka Robot KR350"),
    (r"kuka\s+kr\s*125", "Kuka Robot KR125"),
    (r"kuka\s+kr\s*350", "Kuka Robot KR350"),
    (r"kr\s*125", "Kuka Robot KR125"),
    (r"kr\s*350", "Kuka Robot KR350"),
    (r"kuka\s+robot\s+arms?", "Kuka Robot KR125"),
    (r"kuka\s+robots?", "Kuka Robot KR125"),
    (r"kukas?\b", "Kuka Robot KR125"),
    (r"abb\s+robot\s+irb\s*6600", "ABB Robot IRB6600"),
    (r"abb\s+irb\s*6600", "ABB Robot IRB6600"),
    (r"irb\s*6600", "ABB Robot IRB6600"),
    (r"abb\s+robots?", "ABB Robot IRB6600"),
    (r"abb\b", "ABB Robot IRB6600"),
    (r"yaskawa\s+robot\s+ma\s*0?1800", "YASKAWA Robot ma01800"),
    (r"yaskawa\s+robots?", "YASKAWA Robot ma01800"),
    (r"yaskawa\b", "YASKAWA Robot ma01800"),
    (r"ma\s*01800", "YASKAWA Robot ma01800"),
    (r"robotic\s+arms?", "Kuka Robot KR125"),
    (r"robot\s+arms?", "Kuka Robot KR125"),
    (r"robotic\s+units?", "Kuka Robot KR125"),
    (r"robotic\s+manipulators?", "Kuka Robot KR125"),
    (r"robots?\b", "Kuka Robot KR125"),
    (r"welding\s+tables?", "Welding Table"),
    (r"work\s*tables?", "Welding Table"),
    (r"regular\s+tables?", "Welding Table"),
    (r"standard\s+tables?", "Welding Table"),
    (r"turn\s*tables?", "Turntable"),
    (r"tables?\b", "Welding Table"),
    (r"control\s+cabinets?", "Cabinet"),
    (r"equipment\s+cabinets?", "Cabinet"),
    (r"cabinets?\b", "Cabinet"),
    (r"valve\s*stands?", "ValveStand"),
    (r"value\s+stands?", "ValveStand"),
    (r"conveyor\s+belts?", "Conveyor"),
    (r"conveyor\s+systems?", "Conveyor"),
    (r"conveyors?\b", "Conveyor"),
    (r"safety\s+fenc(?:e|es|ing)", "Guarding"),
    (r"protective\s+fencing", "Guarding"),
    (r"protective\s+guarding", "Guarding"),
    (r"safety\s+guarding", "Guarding"),
    (r"guarding\s+structure", "Guarding"),
    (r"guardings?\b", "Guarding"),
    (r"guardrails?\b", "Guarding"),
    (r"fenc(?:e|es|ing)\b", "Guarding"),
]

_GENERIC_SURFACES = {
    "robot", "robots", "robotic arm", "robotic arms", "robot arm", "robot arms",
    "robotic unit", "robotic units", "robotic manipulator", "robotic manipulators",
    "table", "tables", "kuka robot", "kuka robots", "kuka", "kukas", "abb robot",
    "abb robots", "abb", "yaskawa robot", "yaskawa robots", "yaskawa",
}

_NUMBER_WORDS = {
    "a": 1, "an": 1, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11,
    "twelve": 12,
}

_ORDINALS = {"first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5,
             "sixth": 6, "seventh": 7, "eighth": 8, "ninth": 9, "tenth": 10}

_FUZZY_QUANTIFIERS = r"(?:some|several|multiple|many|various|a\s+few|a\s+couple\s+of|a\s+number\s+of|random\s+number\s+of)"
_PAIR_WORDS = r"(?:a\s+pair\s+of|pairs\s+of)"

# layout vocabulary outside the deterministic grammar; any hit marks the
# description as not fully parsed
_FUZZY_LAYOUT_RE = re.compile(
    r"\b(straight\s+line|equal\s+intervals?|equally\s+spaced|evenly|each\s+side|"
    r"either\s+side|end-to-end|matrix|\d+\s*x\s*\d+|rows?\b|columns?\b|u-shaped|"
    r"l-shaped|circular|circle|triangular|triangle|surround|around|middle|"
    r"cent(?:er|re)|corners?|right\s+angles?|random|uniformly|different\s+directions?|"
    r"formation|along\s+the|aligned?\b|inside|within|in\s+line)\b",
    re.IGNORECASE,
)

_COORD_RE = re.compile(
    r"\[\s*(-?\d+(?:\.\d+)?)\s*(?:mm)?\s*,\s*(-?\d+(?:\.\d+)?)\s*(?:mm)?\s*(?:,\s*(-?\d+(?:\.\d+)?)\s*(?:mm)?\s*)?\]"
)

_DEGREE_FACT_RE = re.compile(
    r"\b(?:rotated?\s+(?:for\s+|by\s+)?|orientation\s+(?:of\s+)?|at\s+an?\s+angle\s+of\s+)(-?\d+(?:\.\d+)?)\s*(?:degrees?|deg\b|°)?",
    re.IGNORECASE,
)
_FACING_WORD_RE = re.compile(
    r"\b(?:facing|faces|oriented\s+towards?|pointing\s+(?:at|towards?))\s+(?:the\s+)?(front|back|left|right|forwards?|backwards?)\b",
    re.IGNORECASE,
)

# sentence boundaries: period/semicolon followed by whitespace (so decimals
# like "2.6" survive) or a newline
_SENTENCE_SPLIT_RE = re.compile(r"[.;](?=\s|$)|\n")


@dataclass
class Mention:
    start: int
    end: int
    surface: str
    canonical: Optional[str]
    count: int = 1
    fuzzy_count: bool = False
    definite: bool = False
    ordinal: Optional[int] = None
    is_another: bool = False
    instance_indices: List[int] = field(default_factory=list)


@dataclass
class InstanceInfo:
    canonical: str
    display: str
    index_within_kind: int


@dataclass
class PositionFact:
    instance: int  # index into instances
    coord: Optional[Coordinate] = None
    direction_deg: Optional[float] = None
    direction_text: Optional[str] = None


@dataclass
class RelationFact:
    subject: int
    object: int
    text: str


@dataclass
class SceneAnalysis:
    description: str
    instances: List[InstanceInfo]
    positions: List[PositionFact]
    relations: List[RelationFact]
    notes: List[str] = field(default_factory=list)

    @property
    def fully_parsed(self) -> bool:
        return bool(self.instances) and not self.notes

    def display_names(self) -> List[str]:
        return [i.display for i in self.instances]


def _compile_vocab(known_names: Optional[Sequence[str]]) -> re.Pattern:
    parts = []
    if known_names:
        for name in sorted(known_names, key=len, reverse=True):
            parts.append(f"(?P<k{len(parts)}>{re.escape(name)})")
    for pattern, _ in _VOCAB:
        parts.append(f"(?:{pattern})")
    return re.compile("|".join(parts), re.IGNORECASE)


def _canonical_for(surface: str, known_names: Optional[Sequence[str]]) -> Optional[str]:
    if known_names:
        for name in known_names:
            if surface.lower() == name.lower():
                return name
    for pattern, canonical in _VOCAB:
        if re.fullmatch(pattern, surface, re.IGNORECASE):
            return canonical
    return None


def library_name_for_display(display: str) -> str:
    """Strip the numeric instance suffix: "Conveyor 2" -> "Conveyor"."""
    return re.sub(r"\s+\d+$", "", display)


_QUANTITY_PREFIX_RE = re.compile(
    r"(?:(?P<digits>\d+)|(?P<word>" + "|".join(_NUMBER_WORDS) + r")|(?P<fuzzy>" + _FUZZY_QUANTIFIERS + r")|(?P<pair>" + _PAIR_WORDS + r")|(?P<another>another)|(?P<the>the)|(?P<ordinal>"
    + "|".join(_ORDINALS) + r"))\s+(?:(?:identical|different|same|new|more|additional|model)\s+)*$",
    re.IGNORECASE,
)


def scan_mentions(text: str, known_names: Optional[Sequence[str]] = None) -> List[Mention]:
    vocab_re = _compile_vocab(known_names)
    mentions: List[Mention] = []
    for m in vocab_re.finditer(text):
        surface = m.group(0)
        canonical = _canonical_for(surface, known_names)
        mention = Mention(m.start(), m.end(), surface, canonical)
        lookback = text[max(0, m.start() - 40):m.start()]
        qm = _QUANTITY_PREFIX_RE.search(lookback)
        if qm:
            if qm.group("digits"):
                mention.count = int(qm.group("digits"))
            elif qm.group("word"):
                mention.count = _NUMBER_WORDS[qm.group("word").lower()]
            elif qm.group("fuzzy"):
                mention.fuzzy_count = True
            elif qm.group("pair"):
                mention.count = 2
            elif qm.group("another"):
                mention.is_another = True
            elif qm.group("the"):
                mention.definite = True
            elif qm.group("ordinal"):
                mention.ordinal = _ORDINALS[qm.group("ordinal").lower()]
                mention.definite = True
        if surface.lower().endswith("s") and mention.count == 1 and not (
            mention.definite or mention.is_another or mention.fuzzy_count
        ):
            # bare plural with no stated quantity ("robots") is underspecified
            if not _canonical_is_exact(surface, known_names):
                mention.fuzzy_count = True
        mentions.append(mention)
    return mentions


def _canonical_is_exact(surface: str, known_names: Optional[Sequence[str]]) -> bool:
    if not known_names:
        return False
    return any(surface.lower() == n.lower() for n in known_names)


def _sentence_spans(text: str) -> List[Tuple[int, int]]:
    spans = []
    start = 0
    for m in _SENTENCE_SPLIT_RE.finditer(text):
        if m.start() > start:
            spans.append((start, m.start()))
        start = m.end()
    if start < len(text):
        spans.append((start, len(text)))
    return spans


def analyze(description: str, known_names: Optional[Sequence[str]] = None) -> SceneAnalysis:
    """Read a description into instances, position facts, and relations.

    ``known_names`` switches the scanner into extraction mode: the listed
    display names are matched verbatim (the canonical rewritten
    description uses them), and no new instances are invented for them.
    """
    text = description
    mentions = scan_mentions(text, known_names)
    notes: List[str] = []

    instances: List[InstanceInfo] = []
    kind_instances: Dict[str, List[int]] = {}
    last_kind: Optional[str] = None

    def new_instance(canonical: str, display_override: Optional[str] = None) -> int:
        idx = len(instances)
        within = len(kind_instances.setdefault(canonical, [])) + 1
        instances.append(InstanceInfo(canonical, display_override or canonical, within))
        kind_instances[canonical].append(idx)
        return idx

    known_lookup = {n.lower(): n for n in (known_names or [])}

    for mention in mentions:
        if mention.canonical is None:
            continue
        exact = known_lookup.get(mention.surface.lower())
        if exact is not None:
            kind = library_name_for_display(exact)
            existing = next((i for i, info in enumerate(instances) if info.display == exact), None)
            mention.instance_indices = [existing if existing is not None else new_instance(kind, exact)]
            last_kind = kind
            continue
        if mention.fuzzy_count:
            notes.append(f"unspecified quantity of {mention.canonical}")
            mention.instance_indices = [
                kind_instances[mention.canonical][-1]
            ] if kind_instances.get(mention.canonical) else [new_instance(mention.canonical)]
            last_kind = mention.canonical
            continue
        if mention.is_another and last_kind is not None:
            mention.instance_indices = [new_instance(last_kind)]
            continue
        kind = mention.canonical
        existing_of_kind = kind_instances.get(kind, [])
        if mention.ordinal is not None and mention.ordinal <= len(existing_of_kind):
            mention.instance_indices = [existing_of_kind[mention.ordinal - 1]]
        elif mention.definite and existing_of_kind and mention.count == 1:
            mention.instance_indices = [existing_of_kind[-1]]
        else:
            mention.instance_indices = [new_instance(kind) for _ in range(mention.count)]
        last_kind = kind

    # display names: duplicates of a kind get numeric suffixes
    for info in instances:
        if known_lookup and info.display in known_lookup.values():
            continue
        total = len(kind_instances[info.canonical])
        info.display = info.canonical if total == 1 else f"{info.canonical} {info.index_within_kind}"

    positions: Dict[int, PositionFact] = {}

    def position_fact(idx: int) -> PositionFact:
        if idx not in positions:
            positions[idx] = PositionFact(instance=idx)
        return positions[idx]

    sentences = _sentence_spans(text)

    def sentence_of(pos: int) -> Tuple[int, int]:
        for span in sentences:
            if span[0] <= pos < span[1]:
                return span
        return (0, len(text))

    placed_mentions = [m for m in mentions if m.instance_indices]

    # coordinates: attach runs of bracket-coordinates to the nearest
    # preceding mention in the same sentence
    coord_matches = list(_COORD_RE.finditer(text))
    used = set()
    for mention in placed_mentions:
        span = sentence_of(mention.start)
        run = []
        cursor = mention.end
        for cm in coord_matches:
            if id(cm) in used or cm.start() < mention.end or cm.start() >= span[1]:
                continue
            gap = text[cursor:cm.start()]
            gap_ok = (
                re.search(r"\b(?:at|is|are|located|positioned|placed|set|coordinates?|with)\b", gap, re.IGNORECASE)
                or re.fullmatch(r"[\s:,()\[\]\-]*", gap)
            )
            if not gap_ok:
                break
            intervening = [o for o in placed_mentions if o is not mention and mention.end <= o.start < cm.start()]
            if intervening:
                break
            run.append(cm)
            used.add(id(cm))
            cursor = cm.end()
            if len(run) >= len(mention.instance_indices):
                break
        for coord_match, inst in zip(run, mention.instance_indices):
            x, y = float(coord_match.group(1)), float(coord_match.group(2))
            position_fact(inst).coord = Coordinate(round_mm(x), round_mm(y))

    # orientations: windows after a mention up to the next mention
    for i, mention in enumerate(placed_mentions):
        span = sentence_of(mention.start)
        window_end = span[1]
        for other in placed_mentions:
            if other.start > mention.end and other.start < window_end:
                window_end = other.start
        window = text[mention.end:window_end]
        fm = _FACING_WORD_RE.search(window)
        if fm:
            deg = parse_direction_text(fm.group(1))
            if deg is not None:
                for inst in mention.instance_indices:
                    position_fact(inst).direction_deg = normalize_direction(deg)
        else:
            dm = _DEGREE_FACT_RE.search(window)
            if dm:
                for inst in mention.instance_indices:
                    position_fact(inst).direction_deg = normalize_direction(float(dm.group(1)))

    relations: List[RelationFact] = []
    seen_pairs = set()

    def add_relation(si: int, oi: int, rel_text: str) -> None:
        if si == oi:
            return
        key = frozenset((si, oi))
        if key in seen_pairs:
            return
        seen_pairs.add(key)
        relations.append(RelationFact(si, oi, rel_text.strip()))

    for span in sentences:
        in_sentence = [m for m in placed_mentions if span[0] <= m.start < span[1]]
        if not in_sentence:
            continue
        sentence_text = text[span[0]:span[1]]

        # "<S> ... between <A> and <B>"
        for bm in re.finditer(r"\bbetween\b", sentence_text, re.IGNORECASE):
            b_abs = span[0] + bm.start()
            before = [m for m in in_sentence if m.end <= b_abs]
            after = [m for m in in_sentence if m.start > b_abs]
            if before and len(after) >= 2 and re.search(
                r"\band\b", text[after[0].end:after[1].start], re.IGNORECASE
            ):
                subject = before[-1]
                a, b = after[0], after[1]
                if a.instance_indices and b.instance_indices:
                    a_name = instances[a.instance_indices[0]].display
                    b_name = instances[b.instance_indices[0]].display
                    for si in subject.instance_indices:
                        add_relation(si, a.instance_indices[0], f"between {a_name} and {b_name}")

        # single mention with several instances + an in-group keyword
        if len(in_sentence) == 1 and len(in_sentence[0].instance_indices) > 1:
            if re.search(r"\bparallel\b", sentence_text, re.IGNORECASE):
                ids = in_sentence[0].instance_indices
                for a, b in zip(ids, ids[1:]):
                    add_relation(a, b, "parallel")

        # adjacent mention pairs with a relation phrase between them
        for ma, mb in zip(in_sentence, in_sentence[1:]):
            gap = text[ma.end:mb.start]
            if re.search(r"\bbetween\b", gap, re.IGNORECASE):
                continue
            ast = parse_relation(gap)
            if ast.kind == RelationKind.UNRECOGNIZED:
                if re.search(r"\d", gap) and re.search(r"\b(m|mm|meters?|metres?)\b", gap, re.IGNORECASE):
                    notes.append(f"unparsed relation phrase: {gap.strip()!r}")
                continue
            rel_text = _clean_relation_text(gap)
            if ast.kind == RelationKind.FACING:
                for si in ma.instance_indices:
                    add_relation(si, mb.instance_indices[0], rel_text or "facing")
            else:
                targets = mb.instance_indices
                for si in ma.instance_indices:
                    for oi in targets:
                        add_relation(si, oi, rel_text)

    if not instances:
        notes.append("no library objects recognized")
    if _FUZZY_LAYOUT_RE.search(text):
        notes.append(f"layout wording outside the deterministic grammar: "
                     f"{_FUZZY_LAYOUT_RE.search(text).group(0)!r}")

    analysis = SceneAnalysis(
        description=description,
        instances=instances,
        positions=[positions[k] for k in sorted(positions)],
        relations=relations,
        notes=notes,
    )
    return analysis


_EDGE_TRIM_RE = re.compile(
    r"^(?:[\s,]*(?:is|are|was|were|be|been|positioned|located|placed|situated|set|put|installed|sits?|stands?|runs?|should\s+(?:be|run|sit)|must\s+be|it'?s|and|with|a|an|,)\b)+\s*",
    re.IGNORECASE,
)
_TAIL_TRIM_RE = re.compile(
    r"\s*(?:\b(?:from|of|the|a|an|it|its|them|each|with|by)\b[\s,]*)+$",
    re.IGNORECASE,
)


def _clean_relation_text(gap: str) -> str:
    out = gap.strip().strip(",.;:()")
    out = _EDGE_TRIM_RE.sub("", out)
    out = _TAIL_TRIM_RE.sub("", out)
    return out.strip().strip(",.;:()") or gap.strip()


def _join_preposition(rel_text: str) -> str:
    t = rel_text.lower()
    if t.endswith(("front", "ahead", "forward", "left", "right")):
        return " of the "
    if t.endswith(("behind", "near", "nearby", "beside", "alongside", "adjacent",
                   "adjacent to", "next to", "close to")):
        return " the "
    return " from the "


# --- canonical rewriting -----------------------------------------------------

def rewrite_description(analysis: SceneAnalysis) -> str:
    """Render the analysis as one concise engineering sentence per fact,
    naming only canonical objects and keeping all positional information."""
    if not analysis.instances:
        return analysis.description.strip()
    clauses: List[str] = []
    mentioned = set()

    pos_by_instance = {p.instance: p for p in analysis.positions}
    for idx, info in enumerate(analysis.instances):
        fact = pos_by_instance.get(idx)
        if fact and fact.coord is not None:
            clause = f"{info.display} is at [{fact.coord.x}, {fact.coord.y}, 0]"
            if fact.direction_deg is not None:
                clause += f" facing {fact.direction_deg:g} degrees"
            clauses.append(clause + ".")
            mentioned.add(idx)
        elif fact and fact.direction_deg is not None:
            clauses.append(f"{info.display} faces {fact.direction_deg:g} degrees.")
            mentioned.add(idx)

    for rel in analysis.relations:
        s = analysis.instances[rel.subject].display
        o = analysis.instances[rel.object].display
        ast = parse_relation(rel.text)
        if ast.kind == RelationKind.PARALLEL:
            clauses.append(f"{s} and {o} are arranged in parallel.")
        elif ast.kind == RelationKind.BETWEEN:
            clauses.append(f"{s} is {rel.text}.")
        elif ast.kind == RelationKind.FACING:
            clauses.append(f"{s} is facing the {o}.")
        else:
            clauses.append(f"{s} is {rel.text}{_join_preposition(rel.text)}{o}.")
        mentioned.add(rel.subject)
        mentioned.add(rel.object)

    rest = [info.display for idx, info in enumerate(analysis.instances) if idx not in mentioned]
    if rest:
        clauses.append("The scene also includes " + ", ".join(rest) + ".")
    return " ".join(clauses)


# --- conversion to domain records -------------------------------------------

def build_objects(analysis: SceneAnalysis) -> List[ObjectInstance]:
    return [
        ObjectInstance(id=f"obj-{i + 1}", library_name=info.canonical, display_name=info.display)
        for i, info in enumerate(analysis.instances)
    ]


def build_layout(
    analysis: SceneAnalysis, objects: Sequence[ObjectInstance]
) -> Tuple[List[PositionRecord], List[RelationRecord], List[NamedAnchor]]:
    by_display = {o.display_name: o for o in objects}
    positions: List[PositionRecord] = []
    facing_subjects = {
        analysis.instances[r.subject].display
        for r in analysis.relations
        if parse_relation(r.text).kind == RelationKind.FACING
    }
    for fact in analysis.positions:
        display = analysis.instances[fact.instance].display
        obj = by_display.get(display)
        if obj is None:
            continue
        direction = None
        if fact.direction_deg is not None:
            direction = Direction(fact.direction_deg)
        elif fact.direction_text:
            direction = fact.direction_text
        elif fact.coord is not None and display not in facing_subjects:
            direction = Direction(0.0)
        if fact.coord is None and direction is None:
            continue
        positions.append(PositionRecord(obj, location=fact.coord, direction=direction))

    relations: List[RelationRecord] = []
    for rel in analysis.relations:
        s = by_display.get(analysis.instances[rel.subject].display)
        o = by_display.get(analysis.instances[rel.object].display)
        if s is None or o is None or s.display_name == o.display_name:
            continue
        relations.append(RelationRecord(s, o, rel.text))
    return positions, relations, []
