"""Reader and writer for `.dproc` process files.

The concrete syntax is a line-oriented block language: a block header line
followed by child lines indented exactly two more spaces.  `#` starts a
comment, blank lines are ignored, and every diagnostic carries a precise
source span.  Parsing is purely structural; graph semantics are checked by
:func:`txdeploy.model.validate`.  The grammar is documented in ``docs/pml.md``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from . import model

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*$")
INT_RE = re.compile(r"-?[0-9]+$")
FLOAT_RE = re.compile(r"-?[0-9]*\.[0-9]+$")


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class SourceSpan:
    file: str
    line: int
    column: int
    length: int = 0

    def __str__(self) -> str:
        return f"{self.file}:{self.line}:{self.column}"


@dataclass
class ParseDiagnostic:
    severity: Severity
    message: str
    span: SourceSpan

    def __str__(self) -> str:
        return f"{self.span}: {self.severity.value}: {self.message}"


@dataclass
class ParseResult:
    """Outcome of a parse: a raw definition unless any error was reported."""

    process: model.ProcessDefinition | None
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.process is not None

    def errors(self) -> list[ParseDiagnostic]:
        return [d for d in self.diagnostics if d.severity is Severity.ERROR]


@dataclass
class Token:
    text: str
    line: int
    column: int
    quoted: bool = False

    def span(self, file: str) -> SourceSpan:
        length = len(self.text) + (2 if self.quoted else 0)
        return SourceSpan(file, self.line, self.column, length)


@dataclass
class Line:
    indent: int
    tokens: list[Token]
    number: int
    children: list["Line"] = field(default_factory=list)

    @property
    def key(self) -> str:
        return self.tokens[0].text

    def span(self, file: str) -> SourceSpan:
        t = self.tokens[0]
        return t.span(file)


class _Reader:
    """Shared lexer/block-nester for `.dproc` and `.world` files."""

    def __init__(self, source: str, file: str):
        self.source = source
        self.file = file
        self.diags: list[ParseDiagnostic] = []

    def error(self, span: SourceSpan, message: str) -> None:
        self.diags.append(ParseDiagnostic(Severity.ERROR, message, span))

    def warning(self, span: SourceSpan, message: str) -> None:
        self.diags.append(ParseDiagnostic(Severity.WARNING, message, span))

    def _tokenize(self, text: str, line_no: int, col_offset: int = 0) -> list[Token] | None:
        tokens: list[Token] = []
        i = 0
        n = len(text)
        while i < n:
            ch = text[i]
            if ch in " \t":
                i += 1
                continue
            if ch == "#":
                break
            col = col_offset + i + 1
            if ch == '"':
                out = []
                i += 1
                closed = False
                while i < n:
                    c = text[i]
                    if c == "\\" and i + 1 < n and text[i + 1] in '"\\':
                        out.append(text[i + 1])
                        i += 2
                        continue
                    if c == '"':
                        closed = True
                        i += 1
                        break
                    out.append(c)
                    i += 1
                if not closed:
                    self.error(SourceSpan(self.file, line_no, col, n + col_offset - (col - 1)), "unterminated string")
                    return None
                tokens.append(Token("".join(out), line_no, col, quoted=True))
                continue
            j = i
            while j < n and text[j] not in ' \t#"':
                j += 1
            tokens.append(Token(text[i:j], line_no, col))
            i = j
        return tokens

    def read_tree(self) -> list[Line]:
        """Nest physical lines into a block tree keyed on 2-space indentation."""
        roots: list[Line] = []
        stack: list[Line] = []
        for idx, raw in enumerate(self.source.splitlines(), start=1):
            stripped = raw.lstrip(" ")
            indent_chars = raw[: len(raw) - len(stripped)]
            if "\t" in raw[: len(raw) - len(raw.lstrip())]:
                self.error(SourceSpan(self.file, idx, 1, 1), "tab indentation is not allowed")
                continue
            if not stripped or stripped.startswith("#"):
                continue
            tokens = self._tokenize(stripped, idx, col_offset=len(indent_chars))
            if tokens is None:
                continue
            if not tokens:
                continue
            if len(indent_chars) % 2 != 0:
                self.error(SourceSpan(self.file, idx, 1, len(indent_chars)), "indentation must be a multiple of 2 spaces")
                continue
            level = len(indent_chars) // 2
            if level > len(stack):
                self.error(SourceSpan(self.file, idx, 1, len(indent_chars)), "line is indented too deeply for its context")
                continue
            line = Line(level, tokens, idx)
            del stack[level:]
            if stack:
                stack[-1].children.append(line)
            else:
                roots.append(line)
            stack.append(line)
        return roots


def _value(tok: Token) -> object:
    if tok.quoted:
        return tok.text
    if INT_RE.match(tok.text):
        return int(tok.text)
    if FLOAT_RE.match(tok.text):
        return float(tok.text)
    return tok.text


class _DuplicateGuard:
    """Tracks single-occurrence keys within one block."""

    def __init__(self, reader: _Reader):
        self.reader = reader
        self.seen: dict[str, int] = {}

    def check(self, line: Line) -> bool:
        key = line.key
        if key in self.seen:
            self.reader.error(line.span(self.reader.file), f"duplicate key {key!r} (first at line {self.seen[key]})")
            return False
        self.seen[key] = line.number
        return True


def parse(source: str, file: str = "<string>") -> ParseResult:
    """Parse `.dproc` text into a raw (unvalidated) process definition.

    All diagnostics are collected; a definition is returned only when no
    error-severity diagnostic was produced.
    """
    reader = _Reader(source, file)
    roots = reader.read_tree()
    if not roots:
        reader.error(SourceSpan(file, 1, 1, 0), "expected process header")
        return ParseResult(None, reader.diags)
    head = roots[0]
    if head.key != "process" or len(head.tokens) != 2:
        reader.error(head.span(file), "expected process header: process <name>")
        return ParseResult(None, reader.diags)
    for extra in roots[1:]:
        reader.error(extra.span(file), "content after the process block")

    proc = model.ProcessDefinition(name=head.tokens[1].text)
    guard = _DuplicateGuard(reader)
    for line in head.children:
        key = line.key
        if key == "entry":
            if guard.check(line) and _arity(reader, line, 2):
                proc.entry_activity = line.tokens[1].text
        elif key == "multi_site":
            if guard.check(line):
                proc.multi_site_policy = _parse_multi_site(reader, line)
        elif key == "product_type":
            if _arity(reader, line, 2):
                proc.product_types.append(_parse_product_type(reader, line))
        elif key == "activity":
            if _arity(reader, line, 2):
                proc.activities.append(_parse_activity(reader, line))
        elif key == "flow":
            flow = _parse_flow(reader, line)
            if flow is not None:
                proc.dataflows.append(flow)
        else:
            reader.warning(line.span(file), f"unknown key {key!r} ignored")
    if reader.diags and any(d.severity is Severity.ERROR for d in reader.diags):
        return ParseResult(None, reader.diags)
    return ParseResult(proc, reader.diags)


def _arity(reader: _Reader, line: Line, n: int, at_least: bool = False) -> bool:
    if (len(line.tokens) >= n) if at_least else (len(line.tokens) == n):
        return True
    reader.error(line.span(reader.file), f"{line.key!r} expects {n - 1} argument(s), got {len(line.tokens) - 1}")
    return False


def _enum_token(reader: _Reader, tok: Token, enum_cls, what: str):
    try:
        return enum_cls(tok.text)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        reader.error(tok.span(reader.file), f"invalid {what} {tok.text!r} (expected one of: {allowed})")
        return None


def _parse_multi_site(reader: _Reader, line: Line) -> model.MultiSitePolicy | None:
    if len(line.tokens) < 2:
        reader.error(line.span(reader.file), "multi_site expects a mode")
        return None
    mode = _enum_token(reader, line.tokens[1], model.MultiSiteMode, "multi-site mode")
    if mode is None:
        return None
    rest = line.tokens[2:]
    min_fraction = None
    retry = False
    if mode is model.MultiSiteMode.BEST_EFFORT:
        if not rest or not FLOAT_RE.match(rest[0].text) and not INT_RE.match(rest[0].text):
            reader.error(line.span(reader.file), "best_effort requires a minimum success fraction")
            return None
        min_fraction = float(rest[0].text)
        rest = rest[1:]
    if rest and rest[0].text == "retry_list":
        retry = True
        rest = rest[1:]
    for tok in rest:
        reader.error(tok.span(reader.file), f"unexpected token {tok.text!r}")
    return model.MultiSitePolicy(mode, min_fraction, retry)


def _parse_product_type(reader: _Reader, line: Line) -> model.ProductTypeDef:
    t = model.ProductTypeDef(name=line.tokens[1].text)
    guard = _DuplicateGuard(reader)
    for child in line.children:
        if child.key != "field":
            reader.warning(child.span(reader.file), f"unknown key {child.key!r} ignored")
            continue
        if not _arity(reader, child, 3):
            continue
        name = child.tokens[1].text
        if not guard.check(Line(child.indent, [child.tokens[1]], child.number)):
            continue
        kind = _enum_token(reader, child.tokens[2], model.ScalarKind, "field kind")
        if kind is not None:
            t.fields[name] = kind
    return t


def _parse_activity(reader: _Reader, line: Line) -> model.ActivityDef:
    a = model.ActivityDef(id=line.tokens[1].text)
    guard = _DuplicateGuard(reader)
    attr_guard = _DuplicateGuard(reader)
    var_guard = _DuplicateGuard(reader)
    port_guard = _DuplicateGuard(reader)
    for child in line.children:
        key = child.key
        if key == "kind":
            if guard.check(child) and _arity(reader, child, 2):
                kind = _enum_token(reader, child.tokens[1], model.ActivityKind, "activity kind")
                if kind is not None:
                    a.kind = kind
        elif key == "role":
            if guard.check(child) and _arity(reader, child, 2):
                a.role = child.tokens[1].text
        elif key == "criticality":
            if guard.check(child) and _arity(reader, child, 2):
                crit = _enum_token(reader, child.tokens[1], model.Criticality, "criticality")
                if crit is not None:
                    a.criticality = crit
        elif key == "action":
            if guard.check(child) and _arity(reader, child, 2):
                a.action = child.tokens[1].text
        elif key == "savepoint":
            if guard.check(child):
                if len(child.tokens) == 1:
                    a.savepoint = model.SnapshotScope.SITE_STATE
                elif len(child.tokens) == 2:
                    scope = _enum_token(reader, child.tokens[1], model.SnapshotScope, "snapshot scope")
                    if scope is not None:
                        a.savepoint = scope
                else:
                    reader.error(child.span(reader.file), "savepoint takes at most one scope argument")
        elif key in ("contingency_of", "compensation_of"):
            if guard.check(child) and _arity(reader, child, 2):
                setattr(a, key, child.tokens[1].text)
        elif key == "child":
            if _arity(reader, child, 2):
                a.children.append(child.tokens[1].text)
        elif key == "attribute":
            if _arity(reader, child, 3) and attr_guard.check(Line(child.indent, [child.tokens[1]], child.number)):
                a.attributes[child.tokens[1].text] = _value(child.tokens[2])
        elif key == "context_var":
            if _arity(reader, child, 5) and var_guard.check(Line(child.indent, [child.tokens[1]], child.number)):
                kind = _enum_token(reader, child.tokens[2], model.ScalarKind, "context var kind")
                if child.tokens[3].text != "updated_by":
                    reader.error(child.tokens[3].span(reader.file), "expected 'updated_by'")
                elif kind is not None:
                    a.context_vars.append(model.ContextVarDef(child.tokens[1].text, kind, child.tokens[4].text))
        elif key == "port":
            if _arity(reader, child, 5) and port_guard.check(Line(child.indent, [child.tokens[1]], child.number)):
                direction = _enum_token(reader, child.tokens[2], model.PortDirection, "port direction")
                channel = _enum_token(reader, child.tokens[3], model.PortChannel, "port channel")
                if direction is not None and channel is not None:
                    a.ports.append(model.PortDef(child.tokens[1].text, direction, channel, child.tokens[4].text))
        else:
            reader.warning(child.span(reader.file), f"unknown key {key!r} ignored")
    return a


def _parse_flow(reader: _Reader, line: Line) -> model.DataflowDef | None:
    if len(line.tokens) != 4 or line.tokens[2].text != "->":
        reader.error(line.span(reader.file), "flow expects: flow <activity>.<port> -> <activity>.<port>")
        return None

    def endpoint(tok: Token) -> tuple[str, str] | None:
        parts = tok.text.split(".")
        if len(parts) != 2 or not all(parts):
            reader.error(tok.span(reader.file), f"malformed endpoint {tok.text!r} (expected activity.port)")
            return None
        return parts[0], parts[1]

    src = endpoint(line.tokens[1])
    dst = endpoint(line.tokens[3])
    if src is None or dst is None:
        return None
    return model.DataflowDef(src[0], src[1], dst[0], dst[1])


# --- serialization ---------------------------------------------------------


def _fmt_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if IDENT_RE.match(text):
        return text
    escaped = text.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def serialize(process: model.ProcessDefinition) -> str:
    """Render a definition as canonical `.dproc` text.

    Canonical form: fixed key order, activities and product types sorted by
    name, flows sorted by endpoints, 2-space indentation, defaults omitted.
    ``parse(serialize(p))`` reproduces ``p`` field for field.
    """
    out: list[str] = [f"process {process.name}"]
    if process.entry_activity is not None:
        out.append(f"  entry {process.entry_activity}")
    if process.multi_site_policy is not None:
        p = process.multi_site_policy
        parts = [f"  multi_site {p.mode.value}"]
        if p.min_success_fraction is not None:
            parts.append(repr(p.min_success_fraction))
        if p.retry_list_output:
            parts.append("retry_list")
        out.append(" ".join(parts))
    for t in sorted(process.product_types, key=lambda t: t.name):
        out.append(f"  product_type {t.name}")
        for fname in sorted(t.fields):
            out.append(f"    field {fname} {t.fields[fname].value}")
    for a in sorted(process.activities, key=lambda a: a.id):
        out.extend(_serialize_activity(a))
    for f in sorted(process.dataflows, key=model.DataflowDef.key):
        out.append(f"  flow {f.from_activity}.{f.from_port} -> {f.to_activity}.{f.to_port}")
    return "\n".join(out) + "\n"


def _serialize_activity(a: model.ActivityDef) -> list[str]:
    out = [f"  activity {a.id}"]
    if a.kind is not model.ActivityKind.SIMPLE:
        out.append(f"    kind {a.kind.value}")
    if a.role:
        out.append(f"    role {a.role}")
    if a.criticality is not model.Criticality.CRITICAL:
        out.append(f"    criticality {a.criticality.value}")
    if a.action is not None:
        out.append(f"    action {a.action}")
    if a.savepoint is not None:
        if a.savepoint is model.SnapshotScope.SITE_STATE:
            out.append("    savepoint")
        else:
            out.append(f"    savepoint {a.savepoint.value}")
    if a.contingency_of is not None:
        out.append(f"    contingency_of {a.contingency_of}")
    if a.compensation_of is not None:
        out.append(f"    compensation_of {a.compensation_of}")
    for c in a.children:
        out.append(f"    child {c}")
    for name in sorted(a.attributes):
        out.append(f"    attribute {name} {_fmt_value(a.attributes[name])}")
    for v in sorted(a.context_vars, key=lambda v: v.name):
        out.append(f"    context_var {v.name} {v.kind.value} updated_by {v.updated_by}")
    for p in a.ports:
        out.append(f"    port {p.id} {p.direction.value} {p.channel.value} {p.product_type}")
    return out
