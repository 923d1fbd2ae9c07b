"""Scene-construction code emission and validation.

Emits the C# that loads models and inserts placed objects, validates it
by scanning for the required API keywords (generated code is never
compiled here), and provides the neutral JSON and SVG renderings of a
scene.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

from .model import (
    Coordinate,
    DEFAULT_BOUNDS_MM,
    DEFAULT_LIBRARY,
    Direction,
    ObjectLibrary,
    ObjectInstance,
    Placement,
    Scene,
    SceneModelError,
)
from .wire import format_orientation, render_placements_json

REQUIRED_KEYWORDS = (
    "TxApplication.SystemRootDirectory",
    "TxInsertComponentCreationData",
    "InsertComponent",
    "TxTransformation",
    "AbsoluteLocation",
    "RefreshDisplay",
)

_FILL_MARKERS = ("/* create model list */", "/* load models */", "/* add objects into the scene */")


class CodegenError(Exception):
    def __init__(self, message: str, report: Optional["CodeReport"] = None):
        self.report = report
        super().__init__(message)


@dataclass(frozen=True)
class CodeTemplate:
    skeleton: str
    guidance: str

    def __post_init__(self) -> None:
        for marker in _FILL_MARKERS:
            if self.skeleton.count(marker) != 1:
                raise SceneModelError(f"skeleton must contain {marker!r} exactly once")

    @classmethod
    def default(cls) -> "CodeTemplate":
        base = resources.files("scenegen") / "templates"
        return cls(
            skeleton=(base / "code_skeleton.cs").read_text(encoding="utf-8"),
            guidance=(base / "loading_guidance.txt").read_text(encoding="utf-8"),
        )


@dataclass(frozen=True)
class CodeReport:
    ok: bool
    missing_keywords: Tuple[str, ...]
    forbidden_constructs: Tuple[str, ...]
    per_object_coverage: Dict[str, bool]

    def summary(self) -> str:
        if self.ok:
            return "code passes all keyword and coverage checks"
        parts = []
        if self.missing_keywords:
            parts.append("missing API keywords: " + ", ".join(self.missing_keywords))
        if self.forbidden_constructs:
            parts.append("forbidden constructs: " + "; ".join(self.forbidden_constructs))
        uncovered = [name for name, ok in self.per_object_coverage.items() if not ok]
        if uncovered:
            parts.append("objects without a matching insertion: " + ", ".join(uncovered))
        return "; ".join(parts)


def _snake_case(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def _format_mm(value: int) -> str:
    return str(value)


def _format_degree(value: float) -> str:
    return format_orientation(value)


def emit_csharp_deterministic(
    placements: Sequence[Placement],
    library: ObjectLibrary = DEFAULT_LIBRARY,
    template: Optional[CodeTemplate] = None,
) -> str:
    """Fill the code template mechanically, one insertion block per object."""
    template = template or CodeTemplate.default()
    kinds: List[str] = []
    for p in placements:
        if p.object.library_name not in kinds:
            kinds.append(p.object.library_name)

    list_vars = {kind: f"{_snake_case(kind)}Models" for kind in kinds}
    decls = [f"List<DirectoryInfo> {list_vars[kind]} = new List<DirectoryInfo>();" for kind in kinds]

    loaders = []
    for kind in kinds:
        loaders.append(
            f'if (directoryInfo.Name.Contains("{kind}"))\n'
            f"    {{\n"
            f"        {list_vars[kind]}.Add(directoryInfo);\n"
            f"    }}"
        )

    blocks = []
    for i, p in enumerate(placements, start=1):
        var = list_vars[p.object.library_name]
        degree = _format_degree(p.dir.degrees)
        blocks.append(
            f"// {p.object.display_name}\n"
            f"DirectoryInfo objModel{i} = {var}[rand.Next(0, {var}.Count)];\n"
            f'string obj{i}Name = Path.GetFileNameWithoutExtension(objModel{i}.Name) + "_" + DateTime.Now.ToString("yyyy-MM-dd-HH-mm-ss");\n'
            f"TxInsertComponentCreationData txInsertDataObj{i} = new TxInsertComponentCreationData(obj{i}Name, objModel{i}.FullName);\n"
            f"ITxComponent txComponentObject{i} = txPhysicalRoot.InsertComponent(txInsertDataObj{i});\n"
            f"\n"
            f"double transXValue{i} = {_format_mm(p.coord.x)};\n"
            f"double transYValue{i} = {_format_mm(p.coord.y)};\n"
            f"double rotValue{i} = {degree} * Math.PI / 180.0;\n"
            f"TxTransformation txTransTransXYRotZ{i} = new TxTransformation(new TxVector(transXValue{i}, transYValue{i}, 0.0), new TxVector(0.0, 0.0, rotValue{i}), TxTransformation.TxRotationType.RPY_ZYX);\n"
            f"ITxLocatableObject obj{i} = (ITxLocatableObject)txComponentObject{i};\n"
            f"obj{i}.AbsoluteLocation *= txTransTransXYRotZ{i};"
        )

    code = template.skeleton
    code = code.replace(_FILL_MARKERS[0], "\n".join(decls) if decls else "// no models required")
    code = code.replace(_FILL_MARKERS[1], "\n    ".join(loaders) if loaders else "// no models to load")
    code = code.replace(_FILL_MARKERS[2], "\n\n".join(blocks) if blocks else "// empty scene")
    return code


_CLASS_DEF_RE = re.compile(r"\bclass\s+\w+")
_FUNC_DEF_RE = re.compile(
    r"^\s*(?:public|private|protected|internal|static)?\s*"
    r"(?:void|int|double|float|string|bool|var|Task)\s+\w+\s*\([^;)]*\)\s*\n?\s*\{",
    re.MULTILINE,
)
_TRANS_X_RE = re.compile(r"double\s+transXValue(\d+)\s*=\s*(-?\d+(?:\.\d+)?)\s*;")
_TRANS_Y_RE = re.compile(r"double\s+transYValue(\d+)\s*=\s*(-?\d+(?:\.\d+)?)\s*;")
_TXVECTOR_RE = re.compile(r"new\s+TxVector\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,")


def validate_code(
    code: str,
    placements: Sequence[Placement],
    required_keywords: Sequence[str] = REQUIRED_KEYWORDS,
) -> CodeReport:
    """Rule-based scan: required API keywords present, no custom
    class/function definitions, and one insertion per placed object."""
    missing = tuple(kw for kw in required_keywords if kw not in code)

    forbidden: List[str] = []
    for m in _CLASS_DEF_RE.finditer(code):
        forbidden.append(f"class definition: {m.group(0)!r}")
    for m in _FUNC_DEF_RE.finditer(code):
        snippet = " ".join(m.group(0).split())
        forbidden.append(f"function definition: {snippet!r}")

    pair_counts: Counter = Counter()
    xs = {m.group(1): float(m.group(2)) for m in _TRANS_X_RE.finditer(code)}
    ys = {m.group(1): float(m.group(2)) for m in _TRANS_Y_RE.finditer(code)}
    for idx, x in xs.items():
        if idx in ys:
            pair_counts[(x, ys[idx])] += 1
    for m in _TXVECTOR_RE.finditer(code):
        pair_counts[(float(m.group(1)), float(m.group(2)))] += 1

    coverage: Dict[str, bool] = {}
    for p in placements:
        key = (float(p.coord.x), float(p.coord.y))
        if pair_counts.get(key, 0) > 0:
            pair_counts[key] -= 1
            coverage[p.object.display_name] = True
        else:
            coverage[p.object.display_name] = False

    ok = not missing and not forbidden and all(coverage.values())
    return CodeReport(ok, missing, tuple(forbidden), coverage)


def emit_csharp(
    placements: Sequence[Placement],
    library: ObjectLibrary = DEFAULT_LIBRARY,
    template: Optional[CodeTemplate] = None,
    gateway=None,
    description: str = "",
    mode: str = "deterministic",
    feedback_rounds: int = 2,
) -> str:
    """Emit scene code either mechanically or through the model.

    LLM mode prompts with the template and coding guidance, validates the
    reply, and feeds problems back up to ``feedback_rounds`` times before
    raising CodegenError with the last report.
    """
    if mode == "deterministic" or gateway is None:
        return emit_csharp_deterministic(placements, library, template)

    from .gateway import Message, PromptRequest, TemplateId, parse_structured

    template = template or CodeTemplate.default()
    request = PromptRequest(
        TemplateId.CODE_GENERATION,
        bindings={
            "prompt": description,
            "objects": json.dumps([p.object.display_name for p in placements]),
            "placements": render_placements_json(placements),
            "guidance for loading object models": template.guidance,
        },
    )
    history: List[Message] = []
    report: Optional[CodeReport] = None
    text = gateway.complete(request, history)
    for attempt in range(feedback_rounds + 1):
        code = parse_structured(text, TemplateId.CODE_GENERATION).payload(0)
        report = validate_code(code, placements)
        if report.ok:
            return code
        if attempt == feedback_rounds:
            break
        history = history + [
            Message("user", gateway.render(request), request),
            Message("assistant", text),
        ]
        retry = PromptRequest(
            TemplateId.PLACEMENT_FEEDBACK,
            bindings={"feedback": "The generated code is invalid: " + report.summary()
                      + ". Regenerate the complete code."},
        )
        text = gateway.complete(retry, history)
        request = retry
    raise CodegenError("generated code failed validation", report)


# --- scene JSON --------------------------------------------------------------

def emit_scene_json(scene: Scene, library: ObjectLibrary = DEFAULT_LIBRARY) -> bytes:
    """Byte-exact scene serialization (keys in contract order, UTF-8,
    newline-terminated)."""
    doc = {
        "description": scene.source_description,
        "objects": [
            {
                "name": p.object.display_name,
                "model": _model_path(library, p.object.library_name),
                "position": [p.coord.x, p.coord.y, 0],
                "orientation": float(p.dir.degrees),
            }
            for p in scene.placements
        ],
    }
    return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _model_path(library: ObjectLibrary, name: str) -> str:
    try:
        return library.model_path(name)
    except SceneModelError:
        return f"Welding/{name}.cojt"


def parse_scene_json(data) -> Scene:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    doc = json.loads(data)
    if not isinstance(doc, dict) or "objects" not in doc:
        raise SceneModelError("not a scene document")
    objects = []
    placements = []
    for i, item in enumerate(doc["objects"], start=1):
        name = item["name"]
        model = item.get("model", "")
        stem = re.sub(r"\.cojt$", "", model.split("/")[-1]) if model else re.sub(r"\s+\d+$", "", name)
        obj = ObjectInstance(id=f"obj-{i}", library_name=stem, display_name=name)
        pos = item["position"]
        objects.append(obj)
        placements.append(
            Placement(obj, Coordinate(int(pos[0]), int(pos[1]), 0), Direction(float(item.get("orientation", 0.0))))
        )
    return Scene(tuple(objects), tuple(placements), doc.get("description", ""))


# --- SVG ----------------------------------------------------------------------

_KIND_COLORS = {
    "Kuka Robot KR125": "#d2691e",
    "Kuka Robot KR350": "#b8860b",
    "ABB Robot IRB6600": "#c0392b",
    "YASKAWA Robot ma01800": "#8e44ad",
    "Welding Table": "#2e86c1",
    "Turntable": "#17a589",
    "Cabinet": "#7f8c8d",
    "ValveStand": "#2c3e50",
    "Conveyor": "#27ae60",
    "Guarding": "#f39c12",
}


def emit_svg(placements: Sequence[Placement], scale: float = 0.08,
             bounds: Tuple[int, int] = DEFAULT_BOUNDS_MM) -> str:
    """Desk-scale top view: one glyph per object with an orientation tick,
    1 m grid lines, and a legend of display names."""
    lo, hi = bounds
    xs = [p.coord.x for p in placements] or [lo, hi]
    ys = [p.coord.y for p in placements] or [lo, hi]
    pad = 800
    min_x, max_x = min(min(xs), lo) - pad, max(max(xs), hi) + pad
    min_y, max_y = min(min(ys), lo) - pad, max(max(ys), hi) + pad

    def sx(x: float) -> float:
        return (x - min_x) * scale

    def sy(y: float) -> float:
        # scene +y (left) points up in the drawing; SVG y grows downward
        return (max_y - y) * scale

    width = sx(max_x)
    height = sy(min_y)
    legend_height = 16 * (len(placements) + 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width:.1f} {height + legend_height:.1f}" '
        f'width="{width:.0f}" height="{height + legend_height:.0f}">',
        f'<rect x="0" y="0" width="{width:.1f}" height="{height:.1f}" fill="#fcfcf7"/>',
    ]

    grid = ['<g class="grid" stroke="#d5d8dc" stroke-width="0.6">']
    x = math.ceil(min_x / 1000) * 1000
    while x <= max_x:
        grid.append(f'<line x1="{sx(x):.1f}" y1="0" x2="{sx(x):.1f}" y2="{height:.1f}"/>')
        x += 1000
    y = math.ceil(min_y / 1000) * 1000
    while y <= max_y:
        grid.append(f'<line x1="0" y1="{sy(y):.1f}" x2="{width:.1f}" y2="{sy(y):.1f}"/>')
        y += 1000
    grid.append("</g>")
    parts.extend(grid)

    radius = 350 * scale
    for p in placements:
        color = _KIND_COLORS.get(p.object.library_name, "#555555")
        cx, cy = sx(p.coord.x), sy(p.coord.y)
        angle = math.radians(p.dir.degrees)
        tx = cx + math.cos(angle) * radius * 1.6
        ty = cy - math.sin(angle) * radius * 1.6
        parts.append('<g class="object">')
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{radius:.1f}" fill="{color}" fill-opacity="0.85"/>')
        parts.append(f'<line x1="{cx:.1f}" y1="{cy:.1f}" x2="{tx:.1f}" y2="{ty:.1f}" stroke="#1b2631" stroke-width="1.4"/>')
        parts.append(
            f'<text x="{cx + radius + 2:.1f}" y="{cy + 3:.1f}" font-size="9" font-family="sans-serif">'
            f"{escape(p.object.display_name)}</text>"
        )
        parts.append("</g>")

    legend_y = height + 12
    parts.append(f'<text x="4" y="{legend_y:.1f}" font-size="10" font-family="sans-serif" font-weight="bold">Legend (grid: 1 m)</text>')
    for i, p in enumerate(placements, start=1):
        color = _KIND_COLORS.get(p.object.library_name, "#555555")
        yline = legend_y + 14 * i
        parts.append(f'<rect x="4" y="{yline - 8:.1f}" width="8" height="8" fill="{color}"/>')
        parts.append(
            f'<text x="16" y="{yline:.1f}" font-size="9" font-family="sans-serif">'
            f"{escape(p.object.display_name)} at {p.coord.as_list()} facing {p.dir.degrees:g}&#176;</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts)
