"""Description-pool evolution and trajectory collection.

Grows a seed pool by sampled rewriting (six methods, multinomial weights
5:6:6:1:5:1), validating every candidate with the deterministic engine
and deduplicating with MinHash over word 3-shingles. Trajectory
collection replays the assignment stage to harvest assign / verify /
reassign conversations, with a weak error-injecting path for negatives.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from . import analysis as nl
from .engine import VerificationReport, assign_placements, verify
from .gateway import (
    LlmGateway,
    Message,
    PromptRequest,
    StructuredOutputError,
    TemplateId,
    parse_structured,
)
from .model import Direction, Placement
from .pipeline import _placements_from_payload, StageError
from .rng import derive_rng
from .scripted import METHOD_INSTRUCTIONS, METHOD_ORDER
from .wire import render_positions_json, render_relations_json

logger = logging.getLogger(__name__)

METHOD_WEIGHTS = (5, 6, 6, 1, 5, 1)  # over METHOD_ORDER, out of 24

MINHASH_PERMUTATIONS = 128
SHINGLE_SIZE = 3
DUPLICATE_THRESHOLD = 0.8

_MERSENNE_PRIME = (1 << 61) - 1
_PERM_SEED = 0x5ce9e5


def _permutations(num_perms: int) -> List[Tuple[int, int]]:
    rng = random.Random(_PERM_SEED)
    return [(rng.randrange(1, _MERSENNE_PRIME), rng.randrange(0, _MERSENNE_PRIME)) for _ in range(num_perms)]


_PERMS_CACHE: Dict[int, List[Tuple[int, int]]] = {}


def shingles(text: str, size: int = SHINGLE_SIZE) -> set:
    words = re.findall(r"[\w\-\[\],]+", text.lower())
    if not words:
        return set()
    if len(words) < size:
        return {tuple(words)}
    return {tuple(words[i:i + size]) for i in range(len(words) - size + 1)}


def _shingle_hash(shingle: Tuple[str, ...]) -> int:
    digest = hashlib.blake2b(" ".join(shingle).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class MinHashSignature:
    hashes: Tuple[int, ...]
    num_perms: int = MINHASH_PERMUTATIONS
    shingle_size: int = SHINGLE_SIZE

    @classmethod
    def of(cls, text: str, num_perms: int = MINHASH_PERMUTATIONS, shingle_size: int = SHINGLE_SIZE) -> "MinHashSignature":
        if num_perms not in _PERMS_CACHE or len(_PERMS_CACHE[num_perms]) < num_perms:
            _PERMS_CACHE[num_perms] = _permutations(num_perms)
        perms = _PERMS_CACHE[num_perms]
        values = [_shingle_hash(s) for s in shingles(text, shingle_size)]
        if not values:
            return cls(tuple([_MERSENNE_PRIME] * num_perms), num_perms, shingle_size)
        mins = []
        for a, b in perms:
            mins.append(min((a * v + b) % _MERSENNE_PRIME for v in values))
        return cls(tuple(mins), num_perms, shingle_size)


def jaccard_estimate(a: MinHashSignature, b: MinHashSignature) -> float:
    if a.num_perms != b.num_perms or a.shingle_size != b.shingle_size:
        raise ValueError("signatures built with different parameters")
    matches = sum(1 for x, y in zip(a.hashes, b.hashes) if x == y)
    return matches / a.num_perms


def exact_jaccard(text_a: str, text_b: str, shingle_size: int = SHINGLE_SIZE) -> float:
    sa, sb = shingles(text_a, shingle_size), shingles(text_b, shingle_size)
    if not sa and not sb:
        return 1.0
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def is_duplicate(
    candidate: MinHashSignature,
    pool: Iterable[MinHashSignature],
    threshold: float = DUPLICATE_THRESHOLD,
) -> bool:
    return any(jaccard_estimate(candidate, sig) >= threshold for sig in pool)


# --- description records -------------------------------------------------------

@dataclass
class DescriptionRecord:
    id: str
    text: str
    parent_id: Optional[str]
    method: Optional[str]
    generation: int
    signature: MinHashSignature

    @classmethod
    def seed(cls, text: str) -> "DescriptionRecord":
        return cls(
            id=_content_id(text),
            text=text,
            parent_id=None,
            method=None,
            generation=0,
            signature=MinHashSignature.of(text),
        )

    @classmethod
    def child(cls, text: str, parent: "DescriptionRecord", method: str) -> "DescriptionRecord":
        return cls(
            id=_content_id(text),
            text=text,
            parent_id=parent.id,
            method=method,
            generation=parent.generation + 1,
            signature=MinHashSignature.of(text),
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "parent_id": self.parent_id,
            "method": self.method,
            "generation": self.generation,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DescriptionRecord":
        return cls(
            id=doc["id"],
            text=doc["text"],
            parent_id=doc.get("parent_id"),
            method=doc.get("method"),
            generation=int(doc.get("generation", 0)),
            signature=MinHashSignature.of(doc["text"]),
        )


def _content_id(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_pool(path) -> List[DescriptionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DescriptionRecord.from_json(json.loads(line)))
    return records


def save_pool(records: Sequence[DescriptionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")


# --- evolution -----------------------------------------------------------------

def sample_step(pool: Sequence[DescriptionRecord], rng: random.Random) -> Tuple[DescriptionRecord, str]:
    """Uniform description choice plus a 5:6:6:1:5:1 multinomial method."""
    if not pool:
        raise ValueError("description pool is empty")
    record = pool[rng.randrange(len(pool))]
    method = rng.choices(METHOD_ORDER, weights=METHOD_WEIGHTS, k=1)[0]
    return record, method


def rewrite(record: DescriptionRecord, method: str, gateway: LlmGateway) -> Optional[str]:
    """One rewriting call; None when the reply cannot be parsed."""
    request = PromptRequest(
        TemplateId.EVOLVE_REWRITE,
        bindings={
            "description": record.text,
            "method_instruction": METHOD_INSTRUCTIONS[method],
            "method": method,
        },
    )
    text = gateway.complete(request)
    try:
        return str(parse_structured(text, TemplateId.EVOLVE_REWRITE).payload(0)).strip()
    except StructuredOutputError:
        return None


@dataclass
class ValidationReport:
    ok: bool
    violations: VerificationReport
    fully_checkable: bool
    notes: List[str] = field(default_factory=list)


def validate_description(text: str, rng: Optional[random.Random] = None) -> ValidationReport:
    """Deterministic sanity check: extract what the grammar covers, place
    it, and verify. Out-of-grammar wording is noted, not rejected."""
    rng = rng or derive_rng(0, f"validate:{_content_id(text)}")
    analysis = nl.analyze(text)
    objects = nl.build_objects(analysis)
    positions, relations, _ = nl.build_layout(analysis, objects)
    if not objects:
        return ValidationReport(
            ok=False,
            violations=VerificationReport.from_violations([]),
            fully_checkable=False,
            notes=["no recognizable objects"],
        )
    steps = assign_placements(positions, relations, objects, rng)
    report = verify(steps.placements, positions, relations)
    notes = list(analysis.notes)
    if notes:
        notes.append("not fully checkable; unparsed wording was ignored")
    return ValidationReport(ok=report.ok, violations=report, fully_checkable=not notes, notes=notes)


def evolve(
    seed_pool: Sequence[DescriptionRecord],
    target_count: int,
    gateway: LlmGateway,
    rng: random.Random,
    budget: Optional[int] = None,
    duplicate_threshold: float = DUPLICATE_THRESHOLD,
) -> List[DescriptionRecord]:
    """Grow the pool to ``target_count`` by sample -> rewrite -> validate ->
    dedup -> append; returns a partial pool with a warning if the iteration
    budget runs out first."""
    if not seed_pool:
        raise ValueError("seed pool is empty")
    pool = list(seed_pool)
    if target_count <= len(pool):
        return pool
    budget = budget if budget is not None else max(200, target_count * 20)
    spent = 0
    while len(pool) < target_count and spent < budget:
        spent += 1
        parent, method = sample_step(pool, rng)
        text = rewrite(parent, method, gateway)
        if not text or text == parent.text:
            continue
        if not validate_description(text).ok:
            continue
        candidate = DescriptionRecord.child(text, parent, method)
        if is_duplicate(candidate.signature, (r.signature for r in pool), duplicate_threshold):
            continue
        pool.append(candidate)
    if len(pool) < target_count:
        logger.warning(
            "evolution budget exhausted: %d of %d descriptions after %d iterations",
            len(pool), target_count, spent,
        )
    return pool


# --- trajectory collection ------------------------------------------------------

@dataclass
class TrajectoryRecord:
    task: str  # assign | verify_pos | verify_neg | reassign
    split: str  # train | validation
    description_id: str
    messages: List[Dict[str, str]]
    loss_mask: List[bool]

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "split": self.split,
            "description_id": self.description_id,
            "messages": self.messages,
            "loss_mask": self.loss_mask,
        }


def _record(task: str, split: str, desc_id: str, messages: List[Message]) -> TrajectoryRecord:
    payload = [{"role": m.role, "content": m.content} for m in messages]
    mask = [False] * len(payload)
    if mask:
        mask[-1] = payload[-1]["role"] == "assistant"
    return TrajectoryRecord(task, split, desc_id, payload, mask)


def collect_trajectories(
    pool: Sequence[DescriptionRecord],
    strong_gateway: LlmGateway,
    weak_gateway: LlmGateway,
    rng: random.Random,
    validation_fraction: float = 0.05,
) -> Iterator[TrajectoryRecord]:
    """Per description: an assign record and its verification from the
    strong path, plus (when the weak path actually errs) a negative
    verification and a two-round reassign conversation."""
    for record in pool:
        split = "validation" if rng.random() < validation_fraction else "train"
        try:
            analysis = nl.analyze(record.text)
            objects = nl.build_objects(analysis)
            if not objects:
                continue
            positions, relations, _ = nl.build_layout(analysis, objects)
            display_names = [o.display_name for o in objects]
            assign_request = PromptRequest(
                TemplateId.PLACEMENT_ASSIGNMENT,
                bindings={
                    "prompt": record.text,
                    "objects": json.dumps(display_names),
                    "positions": render_positions_json(positions),
                    "relations": render_relations_json(relations),
                },
            )

            # strong path: assign + verify
            strong_prompt = strong_gateway.render(assign_request)
            strong_answer = strong_gateway.complete(assign_request)
            assign_messages = [
                Message("user", strong_prompt, assign_request),
                Message("assistant", strong_answer),
            ]
            yield _record("assign", split, record.id, assign_messages)

            strong_parsed = parse_structured(strong_answer, TemplateId.PLACEMENT_ASSIGNMENT)
            strong_placements = _placements_from_payload(strong_parsed.payload(2), objects)
            yield _verify_record(record, split, strong_placements, strong_gateway)

            # weak path: only worth keeping when verification really fails
            weak_answer = weak_gateway.complete(assign_request)
            weak_parsed = parse_structured(weak_answer, TemplateId.PLACEMENT_ASSIGNMENT)
            weak_placements = _placements_from_payload(weak_parsed.payload(2), objects)
            weak_report = verify(weak_placements, positions, relations)
            if not weak_report.ok:
                yield _verify_record(record, split, weak_placements, weak_gateway)
                from .engine import render_feedback

                feedback = render_feedback(weak_report, weak_placements)
                feedback_request = PromptRequest(
                    TemplateId.PLACEMENT_FEEDBACK, bindings={"feedback": feedback}
                )
                history = [
                    Message("user", strong_prompt, assign_request),
                    Message("assistant", weak_answer),
                ]
                fixed_answer = weak_gateway.complete(feedback_request, history)
                reassign_messages = history + [
                    Message("user", weak_gateway.render(feedback_request), feedback_request),
                    Message("assistant", fixed_answer),
                ]
                yield _record("reassign", split, record.id, reassign_messages)
        except (StageError, StructuredOutputError) as err:
            logger.warning("skipping %s: %s", record.id, err)
            continue


def _verify_record(
    record: DescriptionRecord,
    split: str,
    placements: Sequence[Placement],
    gateway: LlmGateway,
) -> TrajectoryRecord:
    from .wire import render_placements_json

    request = PromptRequest(
        TemplateId.PLACEMENT_VERIFICATION,
        bindings={"prompt": record.text, "placements": render_placements_json(list(placements))},
    )
    prompt = gateway.render(request)
    answer = gateway.complete(request)
    has_errors = parse_structured(answer, TemplateId.PLACEMENT_VERIFICATION).payload(2)
    task = "verify_neg" if has_errors else "verify_pos"
    return _record(task, split, record.id, [Message("user", prompt, request), Message("assistant", answer)])


def save_trajectories(records: Iterable[TrajectoryRecord], path) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            counts[record.task] = counts.get(record.task, 0) + 1
            fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
    return counts
