"""Pull structured JSON out of free-form model text.

Model responses rarely arrive as clean JSON: they come wrapped in prose,
inside fenced code blocks, or with small syntax slips such as trailing
commas and curly quotes. ``extract_structured`` tries progressively more
forgiving strategies and raises one of two failure classes so callers know
that retrying the model call is the right next move.
"""

from __future__ import annotations

import json
import re
from typing import Any

__all__ = [
    "ExtractionError",
    "NoStructureFound",
    "ParseFailed",
    "SchemaViolation",
    "extract_structured",
]


class ExtractionError(Exception):
    """Base class for structured-output failures; all of them mean "retry"."""


class NoStructureFound(ExtractionError):
    """The text contains nothing that even looks like a JSON container."""


class ParseFailed(ExtractionError):
    """Candidate JSON fragments were found but none of them parse."""


class SchemaViolation(ExtractionError):
    """Parsed JSON does not satisfy the expected response schema."""


# First fenced code block, with or without a language tag.
_FENCE_RE = re.compile(r"```[^\S\n]*[A-Za-z0-9_+-]*[^\S\n]*\r?\n(.*?)```", re.DOTALL)

_SMART_QUOTES = str.maketrans(
    {
        "“": '"',
        "”": '"',
        "„": '"',
        "‟": '"',
        "‘": "'",
        "’": "'",
        "‚": "'",
        "‛": "'",
    }
)


def _reject_constant(name: str) -> None:
    # NaN/Infinity survive json.loads but break round-trip equality; refuse.
    raise ValueError(f"non-finite constant {name!r}")


def _loads_container(text: str) -> Any:
    """json.loads restricted to object/array roots."""
    value = json.loads(text, parse_constant=_reject_constant)
    if not isinstance(value, (dict, list)):
        raise ValueError("top-level value is not an object or array")
    return value


def _balanced_brace_span(text: str) -> str | None:
    """Substring from the first '{' to its balanced '}', string-literal aware.

    Returns None when there is no opening brace or it never balances. Braces
    inside JSON string literals (including escaped quotes) do not count.
    """
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for pos in range(start, len(text)):
        ch = text[pos]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : pos + 1]
    return None


def _strip_trailing_commas(text: str) -> str:
    """Drop commas that directly precede '}' or ']', outside string literals."""
    out: list[str] = []
    in_string = False
    escaped = False
    n = len(text)
    i = 0
    while i < n:
        ch = text[i]
        if in_string:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
            out.append(ch)
        elif ch == ",":
            look = i + 1
            while look < n and text[look] in " \t\r\n":
                look += 1
            if not (look < n and text[look] in "}]"):
                out.append(ch)
        else:
            out.append(ch)
        i += 1
    return "".join(out)


def _repair(text: str) -> str:
    # Quote normalization first: smart quotes may BE the string delimiters,
    # and the comma stripper relies on straight quotes to find literals.
    return _strip_trailing_commas(text.translate(_SMART_QUOTES))


def extract_structured(text: str) -> Any:
    """Extract the first parseable JSON object or array from model text.

    Strategy, first success wins: (1) the whole text, (2) the first fenced
    code block, (3) the balanced-brace substring starting at the first '{'.
    If all fail, the same three steps run again on a repaired copy of the
    text (smart quotes normalized, trailing commas stripped).

    Raises NoStructureFound when the text holds no candidate at all, and
    ParseFailed when candidates exist but none of them parse. Never raises
    anything else, whatever the input text contains.
    """
    candidates_seen = False
    for attempt_text in (text, _repair(text)):
        stripped = attempt_text.strip()
        if stripped:
            if stripped[0] in "{[":
                candidates_seen = True
            try:
                return _loads_container(stripped)
            except ValueError:
                pass

        match = _FENCE_RE.search(attempt_text)
        if match:
            candidates_seen = True
            try:
                return _loads_container(match.group(1).strip())
            except ValueError:
                pass

        if "{" in attempt_text:
            candidates_seen = True
            span = _balanced_brace_span(attempt_text)
            if span is not None:
                try:
                    return _loads_container(span)
                except ValueError:
                    pass

    if candidates_seen:
        raise ParseFailed("candidate JSON fragments found, but none parsed")
    raise NoStructureFound("no JSON object, array, or fenced block in model text")
