"""Multimodal instruction grammar.

An instruction is a plain string in which every literal occurrence of
``<imagehere>`` marks a position where a reference image is spliced in.
Parsing is total and lossless: any string parses, and serializing the
parsed segments reproduces the input byte for byte.

This module also implements the two text rewrites used by the data
pipelines:

* edit reformulation - inserting the placeholder that points an edit
  instruction at its source image, either by rewriting an existing
  "... the image" phrase or by appending a scope-specific suffix;
* subject extraction - pulling the subject noun phrase out of an
  add/replace edit and leaving a placeholder template behind.

Both rewrites are exposed through an annotator interface so an external
model can stand in for the rule engine. The default annotator is the
rule engine itself and never leaves the process.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Union

PLACEHOLDER = "<imagehere>"

GLOBAL_EDIT = "global"
LOCAL_EDIT = "local"


class GrammarError(ValueError):
    """Base class for instruction grammar failures."""


class ArityMismatch(GrammarError):
    """Slot count does not match the number of supplied images."""

    def __init__(self, slots: int, images: int):
        super().__init__(f"instruction has {slots} image slot(s) but {images} image(s) were given")
        self.slots = slots
        self.images = images


class AlreadyMultimodal(GrammarError):
    """Reformulation input already contains a placeholder."""


class AmbiguousEdit(GrammarError):
    """Edit text mentions the image more than once; rejected rather than guessed."""


class NoMatch(GrammarError):
    """Text does not match any supported add/replace surface form."""


@dataclass(frozen=True)
class TextSpan:
    text: str


@dataclass(frozen=True)
class ImageSlot:
    index: int


Segment = Union[TextSpan, ImageSlot]


@dataclass(frozen=True)
class MultimodalInstruction:
    """Interleaved text spans and image slots plus the original string.

    The empty instruction (zero segments) is a valid distinguished value
    and is used as the null condition.
    """

    segments: tuple
    raw: str

    @property
    def n_slots(self) -> int:
        return sum(1 for s in self.segments if isinstance(s, ImageSlot))

    @property
    def is_empty(self) -> bool:
        return not self.segments

    @property
    def text(self) -> str:
        """Concatenated text content with slots removed."""
        return "".join(s.text for s in self.segments if isinstance(s, TextSpan))

    def serialize(self) -> str:
        parts = []
        for seg in self.segments:
            parts.append(PLACEHOLDER if isinstance(seg, ImageSlot) else seg.text)
        return "".join(parts)


def parse(raw: str) -> MultimodalInstruction:
    """Parse a string into interleaved text spans and image slots.

    Total: every string parses. Empty text between adjacent placeholders
    contributes no span, so serialization stays byte-exact.
    """
    if not isinstance(raw, str):
        raise TypeError(f"instruction must be str, got {type(raw).__name__}")
    segments: list[Segment] = []
    slot = 0
    for i, piece in enumerate(raw.split(PLACEHOLDER)):
        if i > 0:
            segments.append(ImageSlot(slot))
            slot += 1
        if piece:
            segments.append(TextSpan(piece))
    return MultimodalInstruction(segments=tuple(segments), raw=raw)


def serialize(instr: MultimodalInstruction) -> str:
    return instr.serialize()


def validate_arity(instr: MultimodalInstruction, n_images: int) -> None:
    """Raise ArityMismatch unless slot count equals the image count."""
    if instr.n_slots != n_images:
        raise ArityMismatch(instr.n_slots, n_images)


# ---------------------------------------------------------------------------
# Edit reformulation
# ---------------------------------------------------------------------------

# Rule scopes. "passthrough" rules rewrite a matched phrase in place and
# apply regardless of edit scope; scope-specific rules with an empty
# pattern act as end-of-string appends when no phrase matched.
SCOPE_PASSTHROUGH = "passthrough"
SCOPE_GLOBAL = "global_edit"
SCOPE_LOCAL = "local_edit"

_VALID_SCOPES = (SCOPE_PASSTHROUGH, SCOPE_GLOBAL, SCOPE_LOCAL)


@dataclass(frozen=True)
class ReformulationRule:
    """One rewrite rule: a literal pattern, its replacement, and a scope.

    An empty pattern means "append the replacement at the end"; it only
    fires when no phrase rule matched. Applying a phrase rule to a text
    with no match returns the text unchanged.
    """

    pattern: str
    replacement: str
    scope: str

    def __post_init__(self):
        if self.scope not in _VALID_SCOPES:
            raise ValueError(f"unknown rule scope {self.scope!r}, expected one of {_VALID_SCOPES}")

    def count_matches(self, text: str) -> int:
        if not self.pattern:
            return 0
        return text.count(self.pattern)

    def apply_once(self, text: str) -> str:
        if not self.pattern:
            return text + self.replacement
        return text.replace(self.pattern, self.replacement, 1)


DEFAULT_RULES = (
    ReformulationRule("in the image", "in" + PLACEHOLDER, SCOPE_PASSTHROUGH),
    ReformulationRule("to the image", "to" + PLACEHOLDER, SCOPE_PASSTHROUGH),
    ReformulationRule("", " of" + PLACEHOLDER, SCOPE_GLOBAL),
    ReformulationRule("", " in" + PLACEHOLDER, SCOPE_LOCAL),
)


def parse_rule_table(text: str) -> tuple:
    """Parse a plain-text rule table.

    One rule per non-comment line, three tab-separated fields:
    ``scope<TAB>pattern<TAB>replacement``. Blank lines and lines starting
    with ``#`` are skipped. Whitespace inside fields is preserved.
    """
    rules = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise GrammarError(f"rule table line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        scope, pattern, replacement = fields
        try:
            rules.append(ReformulationRule(pattern, replacement, scope.strip()))
        except ValueError as e:
            raise GrammarError(f"rule table line {lineno}: {e}") from e
    return tuple(rules)


def read_rule_file(path) -> tuple:
    return parse_rule_table(Path(path).read_text(encoding="utf-8"))


def reformulate_edit_text(text: str, edit_scope: str, rules: tuple = DEFAULT_RULES) -> str:
    """Rewrite a plain edit instruction so it references its source image.

    Phrase rules rewrite an existing image mention in place; otherwise the
    scope-specific suffix is appended. The result always contains exactly
    one placeholder.

    Raises AlreadyMultimodal if the input already holds a placeholder and
    AmbiguousEdit if more than one phrase rule occurrence matches (such
    inputs are rejected rather than guessed).
    """
    if edit_scope not in (GLOBAL_EDIT, LOCAL_EDIT):
        raise ValueError(f"edit_scope must be {GLOBAL_EDIT!r} or {LOCAL_EDIT!r}, got {edit_scope!r}")
    if PLACEHOLDER in text:
        raise AlreadyMultimodal(f"input already contains {PLACEHOLDER!r}: {text!r}")

    scope_tag = SCOPE_GLOBAL if edit_scope == GLOBAL_EDIT else SCOPE_LOCAL
    phrase_rules = [r for r in rules if r.pattern and r.scope in (SCOPE_PASSTHROUGH, scope_tag)]
    append_rules = [r for r in rules if not r.pattern and r.scope == scope_tag]

    matches = [(r, r.count_matches(text)) for r in phrase_rules]
    total = sum(n for _, n in matches)
    if total > 1:
        raise AmbiguousEdit(f"text mentions the image {total} times, refusing to reformulate: {text!r}")
    if total == 1:
        rule = next(r for r, n in matches if n == 1)
        out = rule.apply_once(text)
    else:
        if not append_rules:
            raise GrammarError(f"no append rule for scope {edit_scope!r}")
        out = append_rules[0].apply_once(text)

    n = parse(out).n_slots
    if n != 1:
        raise GrammarError(f"reformulation produced {n} slots instead of 1: {out!r}")
    return out


# ---------------------------------------------------------------------------
# Subject extraction
# ---------------------------------------------------------------------------

# Prepositions that end a subject noun phrase and start a locative tail.
LOCATIVE_PREPOSITIONS = (
    "in", "on", "at", "over", "under", "above", "below",
    "near", "beside", "behind", "by", "to",
)

_PREP_RE = re.compile(r"\s+(?:" + "|".join(LOCATIVE_PREPOSITIONS) + r")\s+", re.IGNORECASE)
_REPLACE_RE = re.compile(r"^(replace\s+)(.+?)(\s+with\s+)(.+)$", re.IGNORECASE | re.DOTALL)
_ADD_RE = re.compile(r"^(add\s+)(.+)$", re.IGNORECASE | re.DOTALL)
_ARTICLES = ("a", "an", "the", "one")


@dataclass(frozen=True)
class SubjectExtraction:
    subject: str
    template: str
    task: str


def _strip_article(phrase: str) -> str:
    words = phrase.split(maxsplit=1)
    if len(words) == 2 and words[0].lower() in _ARTICLES:
        return words[1]
    return phrase


def _split_locative_tail(phrase: str):
    """Split 'a white one in the bottom middle' into core + ' in ...' tail."""
    m = _PREP_RE.search(phrase)
    if m is None:
        return phrase, ""
    return phrase[: m.start()], phrase[m.start():]


def extract_subject_and_template(text: str, task: str):
    """Extract the subject phrase from an add/replace edit.

    Returns ``(subject, template)`` where the template is the input text
    with the subject phrase replaced by the placeholder. Raises NoMatch
    when the surface form does not apply.
    """
    if task == "replace":
        m = _REPLACE_RE.match(text)
        if m is None:
            raise NoMatch(f"not a 'replace X with Y' form: {text!r}")
        y = m.group(4)
        y_core, tail = _split_locative_tail(y)
        if not y_core.strip():
            raise NoMatch(f"empty replacement subject in {text!r}")
        low = y_core.lower()
        if low.startswith("another "):
            subject = y_core[len("another "):]
        elif low == "one" or low.endswith(" one"):
            # anaphoric replacement ("a white one"): the subject is the
            # head noun of the replaced phrase, article stripped
            subject = _strip_article(m.group(2))
        else:
            subject = y_core
        template = text[: m.start(4)] + PLACEHOLDER + tail
    elif task == "add":
        m = _ADD_RE.match(text)
        if m is None:
            raise NoMatch(f"not an 'add X ...' form: {text!r}")
        rest = m.group(2)
        core, tail = _split_locative_tail(rest)
        if not core.strip():
            raise NoMatch(f"empty added subject in {text!r}")
        subject = core
        template = text[: m.start(2)] + PLACEHOLDER + tail
    else:
        raise ValueError(f"task must be 'add' or 'replace', got {task!r}")

    if not subject.strip():
        raise NoMatch(f"extracted empty subject from {text!r}")
    return subject, template


# ---------------------------------------------------------------------------
# External annotator interface
# ---------------------------------------------------------------------------

TEMPLATE_EXTRACT_ADD = "extract_add"
TEMPLATE_EXTRACT_REPLACE = "extract_replace"
TEMPLATE_REFORMULATE_GLOBAL = "reformulate_global"
TEMPLATE_REFORMULATE_LOCAL = "reformulate_local"


class ExternalAnnotator(Protocol):
    """Process-boundary text annotator: (prompt template id, text) -> text.

    Responses are JSON strings so richer annotators can be dropped in
    without changing call sites.
    """

    def annotate(self, template_id: str, text: str) -> str:
        ...


class RuleAnnotator:
    """Default annotator backed by the in-process rule engine. No network."""

    def __init__(self, rules: tuple = DEFAULT_RULES):
        self.rules = rules

    def annotate(self, template_id: str, text: str) -> str:
        if template_id == TEMPLATE_EXTRACT_ADD:
            subject, template = extract_subject_and_template(text, "add")
            return json.dumps({"subject": subject, "template": template})
        if template_id == TEMPLATE_EXTRACT_REPLACE:
            subject, template = extract_subject_and_template(text, "replace")
            return json.dumps({"subject": subject, "template": template})
        if template_id == TEMPLATE_REFORMULATE_GLOBAL:
            return json.dumps({"text": reformulate_edit_text(text, GLOBAL_EDIT, self.rules)})
        if template_id == TEMPLATE_REFORMULATE_LOCAL:
            return json.dumps({"text": reformulate_edit_text(text, LOCAL_EDIT, self.rules)})
        raise GrammarError(f"unknown annotator template id {template_id!r}")


class TranscriptRecorder:
    """Wraps an annotator and appends every exchange to a JSONL transcript."""

    def __init__(self, inner, path):
        self.inner = inner
        self.path = Path(path)

    def annotate(self, template_id: str, text: str) -> str:
        response = self.inner.annotate(template_id, text)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"template_id": template_id, "text": text, "response": response}) + "\n")
        return response


class TranscriptReplayer:
    """Replays a recorded transcript; raises on any unseen request."""

    def __init__(self, path):
        self.path = Path(path)
        self._table = {}
        with open(self.path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                self._table[(rec["template_id"], rec["text"])] = rec["response"]

    def annotate(self, template_id: str, text: str) -> str:
        key = (template_id, text)
        if key not in self._table:
            raise KeyError(f"transcript {self.path} has no response for {key!r}")
        return self._table[key]
