"""Completion plumbing: prompt templates, a pluggable backend interface,
transport retries, and parsing of the staged structured outputs.

Templates are text assets with ``{{ placeholder }}`` markers. Parsing is
tolerant of markdown fences and surrounding prose: it hunts for the
declared section headers and list labels anywhere in the reply.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import requests


class GatewayError(Exception):
    pass


class ConfigurationError(GatewayError):
    """Bad template id or missing placeholder binding."""


class CredentialError(GatewayError):
    """Authentication problem; never retried."""


class TransportError(GatewayError):
    """Transient transport failure; retried with exponential backoff."""


class StructuredOutputError(GatewayError):
    """A reply was missing a section or carried unparseable JSON."""

    def __init__(self, section: str, message: str):
        self.section = section
        super().__init__(f"{section}: {message}")


class TemplateId(str, enum.Enum):
    OBJECT_RETRIEVAL = "object_retrieval"
    LAYOUT_EXTRACTION = "layout_extraction"
    PLACEMENT_ASSIGNMENT = "placement_assignment"
    PLACEMENT_VERIFICATION = "placement_verification"
    PLACEMENT_FEEDBACK = "placement_feedback"
    CODE_GENERATION = "code_generation"
    EVOLVE_REWRITE = "evolve_rewrite"
    DESCRIPTION_VALIDATION = "description_validation"


@dataclass(frozen=True)
class PromptRequest:
    template_id: TemplateId
    bindings: Dict[str, str] = field(default_factory=dict)
    temperature: float = 1.0
    max_retries: int = 2


@dataclass(frozen=True)
class Message:
    role: str  # "user" | "assistant"
    content: str
    request: Optional[PromptRequest] = None


@dataclass(frozen=True)
class Section:
    header: str
    analysis: str
    payload: object


@dataclass(frozen=True)
class StructuredOutput:
    sections: Tuple[Section, ...]

    def payload(self, index: int):
        return self.sections[index].payload

    def section(self, header_fragment: str) -> Section:
        for s in self.sections:
            if header_fragment.lower() in s.header.lower():
                return s
        raise KeyError(header_fragment)


_PLACEHOLDER_RE = re.compile(r"\{\{\s*(.+?)\s*\}\}")


def _template_text(template_id: TemplateId) -> str:
    try:
        return (resources.files("scenegen") / "templates" / f"{template_id.value}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"no template named {template_id.value!r}")


def render_prompt(request: PromptRequest) -> str:
    """Substitute bindings into the stage template; deterministic text out."""
    text = _template_text(request.template_id)

    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in request.bindings:
            raise ConfigurationError(
                f"template {request.template_id.value!r} has no binding for placeholder {name!r}"
            )
        return str(request.bindings[name])

    return _PLACEHOLDER_RE.sub(repl, text)


def template_checksums() -> Dict[str, str]:
    out = {}
    base = resources.files("scenegen") / "templates"
    for entry in sorted(base.iterdir(), key=lambda e: e.name):
        if entry.name.endswith((".txt", ".cs")):
            out[entry.name] = hashlib.sha256(entry.read_bytes()).hexdigest()
    return out


# --- structured output parsing ---------------------------------------------

_STEP_SECTIONS: Dict[TemplateId, List[Tuple[str, str, str]]] = {
    # (header fragment, payload label, payload kind)
    TemplateId.OBJECT_RETRIEVAL: [
        ("Step 1", "Objects:", "json"),
        ("Step 2", "Objects:", "json"),
        ("Step 3", "New Description:", "text"),
    ],
    TemplateId.LAYOUT_EXTRACTION: [
        ("Step 1", "Objects:", "json"),
        ("Step 2", "Positions:", "json"),
        ("Step 3", "Relative Positions:", "json"),
    ],
    TemplateId.PLACEMENT_ASSIGNMENT: [
        ("Step 1", "New Relative Positions:", "json"),
        ("Step 2", "Positions:", "json"),
        ("Step 3", "Positions:", "json"),
    ],
}
_STEP_SECTIONS[TemplateId.PLACEMENT_FEEDBACK] = _STEP_SECTIONS[TemplateId.PLACEMENT_ASSIGNMENT]

_STEP_HEADER_RE = re.compile(r"#\s*Step\s*(\d+)\s*:\s*([^#\n]*?)\s*#", re.IGNORECASE)
_ANALYSIS_RE = re.compile(r"Analysis:\s*", re.IGNORECASE)
_ERROR_LINE_RE = re.compile(r"Error:\s*[\"'`]*\s*(Yes|No)\b", re.IGNORECASE)
_CODE_FENCE_RE = re.compile(r"```(?:[a-zA-Z#+]*)\n(.*?)```", re.DOTALL)


def _extract_json_after(body: str, label: str, section: str):
    idx = body.lower().find(label.lower())
    if idx < 0:
        raise StructuredOutputError(section, f"missing {label!r} list")
    start = idx + len(label)
    opener = None
    for i in range(start, len(body)):
        if body[i] in "[{":
            opener = i
            break
        # tolerate a fenced block between label and JSON
        if body[i] not in " \t\r\n`jsonJSON":
            break
    if opener is None:
        raise StructuredOutputError(section, f"no JSON value after {label!r}")
    closer = {"[": "]", "{": "}"}[body[opener]]
    depth = 0
    in_string = False
    escaped = False
    for i in range(opener, len(body)):
        ch = body[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
            if depth == 0:
                if ch != closer and body[opener] in "[{":
                    break
                snippet = body[opener:i + 1]
                try:
                    return json.loads(snippet)
                except json.JSONDecodeError as e:
                    raise StructuredOutputError(section, f"invalid JSON: {e}") from None
    raise StructuredOutputError(section, "unterminated JSON value")


def _analysis_of(body: str, stop_label: Optional[str]) -> str:
    m = _ANALYSIS_RE.search(body)
    if not m:
        return ""
    rest = body[m.end():]
    if stop_label:
        idx = rest.lower().find(stop_label.lower())
        if idx >= 0:
            rest = rest[:idx]
    return rest.strip()


def _strip_fences(text: str) -> str:
    stripped = text.strip()
    m = re.fullmatch(r"```(?:[a-zA-Z#+]*)\n?(.*?)\n?```", stripped, re.DOTALL)
    return m.group(1) if m else stripped


def parse_structured(text: str, template_id: TemplateId) -> StructuredOutput:
    """Parse a staged reply into its declared sections.

    Raises StructuredOutputError naming the first missing or malformed
    section, which callers feed back to the model as a re-ask.
    """
    if template_id in _STEP_SECTIONS:
        declared = _STEP_SECTIONS[template_id]
        headers = list(_STEP_HEADER_RE.finditer(text))
        sections: List[Section] = []
        for i, (fragment, label, kind) in enumerate(declared, start=1):
            match = next((h for h in headers if int(h.group(1)) == i), None)
            if match is None:
                raise StructuredOutputError(f"Step {i}", "section header not found")
            following = [h for h in headers if h.start() > match.start()]
            end = following[0].start() if following else len(text)
            body = text[match.end():end]
            header_title = f"Step {i}: {match.group(2).strip()}"
            if kind == "json":
                payload = _extract_json_after(body, label, header_title)
            else:
                idx = body.lower().find(label.lower())
                if idx < 0:
                    raise StructuredOutputError(header_title, f"missing {label!r}")
                payload = body[idx + len(label):].strip().strip("`").strip()
                if not payload:
                    raise StructuredOutputError(header_title, "empty value")
            sections.append(Section(header_title, _analysis_of(body, label), payload))
        return StructuredOutput(tuple(sections))

    if template_id in (TemplateId.PLACEMENT_VERIFICATION, TemplateId.DESCRIPTION_VALIDATION):
        rel = re.search(r"Relations:\s*", text, re.IGNORECASE)
        ana = re.search(r"Analysis:\s*", text, re.IGNORECASE)
        err = _ERROR_LINE_RE.search(text)
        if err is None:
            raise StructuredOutputError("Error", 'missing "Error: Yes/No" line')
        relations_text = ""
        analysis_text = ""
        if rel:
            stop = ana.start() if ana else err.start()
            relations_text = text[rel.end():stop].strip()
        if ana:
            analysis_text = text[ana.end():err.start()].strip()
        has_errors = err.group(1).lower() == "yes"
        return StructuredOutput(
            (
                Section("Relations", "", relations_text),
                Section("Analysis", "", analysis_text),
                Section("Error", "", has_errors),
            )
        )

    if template_id == TemplateId.CODE_GENERATION:
        code = _strip_fences(text)
        if not code.strip():
            raise StructuredOutputError("code", "empty reply")
        return StructuredOutput((Section("code", "", code),))

    if template_id == TemplateId.EVOLVE_REWRITE:
        m = re.search(r"New Description:\s*", text, re.IGNORECASE)
        if m is None:
            raise StructuredOutputError("New Description", "missing label")
        payload = text[m.end():].strip().strip("`").strip()
        payload = payload.splitlines()[0].strip() if payload else ""
        if not payload:
            raise StructuredOutputError("New Description", "empty value")
        return StructuredOutput((Section("New Description", "", payload),))

    raise ConfigurationError(f"no parser for template {template_id!r}")


# --- backends ---------------------------------------------------------------

class Backend(Protocol):
    name: str

    def complete(self, request: PromptRequest, messages: Sequence[Message]) -> str:
        ...


class NetworkBackend:
    """Generic chat-completion HTTP backend (OpenAI-style wire format)."""

    def __init__(self, base_url: str, api_key: str, model: str, timeout: float = 60.0,
                 session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.session = session or requests.Session()
        self.name = f"network:{model}"

    def complete(self, request: PromptRequest, messages: Sequence[Message]) -> str:
        if not self.api_key:
            raise CredentialError("no API key configured (set SCENEGEN_API_KEY)")
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": request.temperature,
        }
        try:
            response = self.session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise TransportError(str(e)) from e
        if response.status_code in (401, 403):
            raise CredentialError(f"authentication failed: HTTP {response.status_code}")
        if response.status_code >= 400:
            raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransportError(f"malformed completion response: {e}") from e


class LlmGateway:
    """Front door for all completions: renders the prompt, enforces an
    in-flight cap, and retries transport failures with exponential backoff."""

    def __init__(self, backend: Backend, max_inflight: int = 4, retry_base_delay: float = 0.25):
        self.backend = backend
        self._slots = threading.Semaphore(max_inflight)
        self.retry_base_delay = retry_base_delay

    def render(self, request: PromptRequest) -> str:
        return render_prompt(request)

    def complete(self, request: PromptRequest, history: Sequence[Message] = ()) -> str:
        """Send the rendered request (appended to ``history``) and return
        the raw reply text."""
        messages = list(history) + [Message("user", render_prompt(request), request)]
        attempts = max(0, request.max_retries) + 1
        last_error: Optional[TransportError] = None
        for attempt in range(attempts):
            if attempt and self.retry_base_delay:
                time.sleep(self.retry_base_delay * (2 ** (attempt - 1)))
            with self._slots:
                try:
                    return self.backend.complete(request, messages)
                except TransportError as e:
                    last_error = e
        raise TransportError(f"backend failed after {attempts} attempts: {last_error}")
