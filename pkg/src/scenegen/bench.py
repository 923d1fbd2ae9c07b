"""Benchmark harness: run description suites through the pipeline, judge
the scenes deterministically, and aggregate pass@k per category.

The judge is a proxy for the paper-style manual review: it re-reads each
case with the deterministic grammar and verifies the scene against what
it understood. Cases beyond the grammar come back "unknown" and are
reported separately, never as passes. Hosted-model headline numbers are
out of reach of this proxy; see the README note in the emitted report.
"""

from __future__ import annotations

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple

from . import analysis as nl
from .engine import verify
from .gateway import LlmGateway
from .model import Scene
from .pipeline import StageError, generate_scene
from .gateway import GatewayError

CATEGORIES = (
    "geometric_arrangement",
    "positional_details",
    "object_quantity",
    "composite_description",
    "fuzzy_description",
)

_CATEGORY_LABELS = {
    "geometric_arrangement": "Geo.",
    "positional_details": "Pos.",
    "object_quantity": "Quant.",
    "composite_description": "Comp.",
    "fuzzy_description": "Fuzz.",
}

NOT_REPRODUCED_NOTE = (
    "Hosted-model results (e.g. GPT-4o 81.0 overall, fine-tuned Llama3.1-70B "
    "78.5) rely on closed models plus human judging and are not reproduced "
    "here; the deterministic judge and scripted backend stand in for them."
)


@dataclass(frozen=True)
class BenchCase:
    id: str
    description: str
    category: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


@dataclass
class Judgment:
    status: str  # pass | fail | unknown
    reasons: List[str] = field(default_factory=list)


@dataclass
class BenchResult:
    case_id: str
    category: str
    n: int
    c: int
    unknown: int
    pass_at_k: float
    judgments: List[Judgment]


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 - C(n-c, k)/C(n, k)."""
    if not (0 <= c <= n):
        raise ValueError(f"c must be within [0, n]; got c={c}, n={n}")
    if not (1 <= k <= n):
        raise ValueError(f"k must be within [1, n]; got k={k}, n={n}")
    if n - c < k:
        return 1.0
    return 1.0 - comb(n - c, k) / comb(n, k)


def auto_judge(scene: Scene, case: BenchCase) -> Judgment:
    """Deterministic proxy judgment of a scene against its case.

    pass: the grammar fully covers the description, the object multiset
    matches, and verification holds. unknown: the description exceeds the
    grammar. fail: anything else, with reasons.
    """
    analysis = nl.analyze(case.description)
    if not analysis.fully_parsed:
        return Judgment("unknown", analysis.notes or ["description exceeds the grammar"])

    expected = sorted(info.canonical for info in analysis.instances)
    actual = sorted(o.library_name for o in scene.objects)
    if expected != actual:
        return Judgment("fail", [f"object multiset mismatch: expected {expected}, got {actual}"])

    judge_objects = nl.build_objects(analysis)
    scene_by_display = {p.object.display_name: p for p in scene.placements}
    remapped = []
    leftovers = {p.object.display_name: p for p in scene.placements}
    for obj in judge_objects:
        placement = scene_by_display.get(obj.display_name)
        if placement is None:
            match_name = next(
                (name for name, p in leftovers.items() if p.object.library_name == obj.library_name),
                None,
            )
            if match_name is None:
                return Judgment("fail", [f"no placement for {obj.display_name!r}"])
            placement = leftovers[match_name]
        leftovers.pop(placement.object.display_name, None)
        remapped.append(type(placement)(obj, placement.coord, placement.dir))

    positions, relations, _ = nl.build_layout(analysis, judge_objects)
    report = verify(remapped, positions, relations)
    if report.ok:
        return Judgment("pass")
    return Judgment("fail", [f"{v.kind.value}: {v.detail}" for v in report.violations])


def load_suite(path) -> List[BenchCase]:
    cases = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            cases.append(BenchCase(str(doc["id"]), doc["description"], doc["category"]))
    if not cases:
        raise ValueError(f"suite {path} is empty")
    return cases


def run_suite(
    suite: Sequence[BenchCase],
    samples_per_case: int,
    gateway: LlmGateway,
    seed: int,
    k: int = 1,
    max_workers: int = 4,
    max_iters: int = 3,
) -> dict:
    """Run every case ``samples_per_case`` times, judge, and aggregate.

    Per-sample pipeline failures count as failed samples; the suite always
    completes and the report carries category and overall pass@k.
    """
    if not suite:
        raise ValueError("benchmark suite is empty")

    def one_sample(case: BenchCase, index: int) -> Judgment:
        try:
            result = generate_scene(case.description, gateway, max_iters=max_iters)
        except (StageError, GatewayError, ValueError) as err:
            return Judgment("fail", [f"pipeline error: {err}"])
        if not result.ok:
            return Judgment(
                "fail",
                ["unresolved verification: " + "; ".join(v.detail for v in result.report.violations)],
            )
        return auto_judge(result.scene, case)

    results: List[BenchResult] = []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for case in suite:
            futures = [pool.submit(one_sample, case, i) for i in range(samples_per_case)]
            judgments = [f.result() for f in futures]
            c = sum(1 for j in judgments if j.status == "pass")
            unknown = sum(1 for j in judgments if j.status == "unknown")
            results.append(
                BenchResult(
                    case_id=case.id,
                    category=case.category,
                    n=samples_per_case,
                    c=c,
                    unknown=unknown,
                    pass_at_k=pass_at_k(samples_per_case, c, k),
                    judgments=judgments,
                )
            )

    by_category: Dict[str, List[BenchResult]] = {}
    for result in results:
        by_category.setdefault(result.category, []).append(result)
    category_scores = {
        category: sum(r.pass_at_k for r in rs) / len(rs)
        for category, rs in by_category.items()
    }
    overall = sum(r.pass_at_k for r in results) / len(results)

    return {
        "k": k,
        "samples_per_case": samples_per_case,
        "seed": seed,
        "backend": gateway.backend.name,
        "note": NOT_REPRODUCED_NOTE,
        "categories": category_scores,
        "overall": overall,
        "cases": [
            {
                "id": r.case_id,
                "category": r.category,
                "n": r.n,
                "c": r.c,
                "unknown": r.unknown,
                f"pass@{k}": r.pass_at_k,
                "reasons": [j.reasons for j in r.judgments if j.status != "pass"],
            }
            for r in results
        ],
    }


def format_report_table(report: dict) -> str:
    """Table-2-shaped text rendering: one column per category + Overall."""
    k = report["k"]
    header = [f"pass@{k}"] + [_CATEGORY_LABELS[c] for c in CATEGORIES] + ["Overall"]
    values = ["%"]
    for category in CATEGORIES:
        score = report["categories"].get(category)
        values.append("-" if score is None else f"{100 * score:.1f}")
    values.append(f"{100 * report['overall']:.1f}")
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    line1 = "  ".join(h.rjust(w) for h, w in zip(header, widths))
    line2 = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return line1 + "\n" + line2
