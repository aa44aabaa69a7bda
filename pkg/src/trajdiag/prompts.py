"""Prompt templates: loading, placeholder rendering, content hashes.

Templates are plain text files with {placeholder} slots. Rendering replaces
only the placeholders it is given, so literal braces (JSON examples inside
the prompts) survive untouched. Every report records the content hash of
each template that produced it.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

REQUIRED_PLACEHOLDERS: dict[str, tuple[str, ...]] = {
    "segment": ("task_instruction", "action_transcript"),
    "diagnose": ("task_instruction", "subtask_list", "current_subtask", "segment_actions"),
    "diagnose_bare": ("task_instruction", "subtask_list", "current_subtask", "segment_actions"),
    "summarize": ("task_instruction", "diagnostic_evidence", "subtask_summaries_secondary"),
    "seg_quality": (
        "task_instruction",
        "subtask_description",
        "subtask_span",
        "segment_actions",
        "neighbor_context",
    ),
    "naive": ("task_instruction", "action_transcript"),
    "agenttrek": ("task_instruction", "action_transcript"),
}

TEMPLATE_NAMES = tuple(REQUIRED_PLACEHOLDERS)

DEFAULT_SYSTEM_TEXT = (
    "You analyse GUI automation logs. Reply with a single JSON object and nothing else."
)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:12]

    def render(self, **values: str) -> str:
        """Substitute known placeholders; anything else is left verbatim."""
        required = REQUIRED_PLACEHOLDERS.get(self.name, ())
        missing = [key for key in required if key not in values]
        if missing:
            raise ValueError(f"template {self.name!r} is missing values for {missing}")

        def substitute(match: re.Match[str]) -> str:
            key = match.group(1)
            return str(values[key]) if key in values else match.group(0)

        return _PLACEHOLDER_RE.sub(substitute, self.text)


class PromptLibrary:
    """The named template set one pipeline run uses.

    Defaults ship with the package; any <name>.txt in ``template_dir``
    overrides the default of the same name. Loading fails fast if a template
    lacks one of its required placeholders.
    """

    def __init__(self, templates: dict[str, PromptTemplate]):
        self._templates = dict(templates)
        for name, required in REQUIRED_PLACEHOLDERS.items():
            template = self._templates.get(name)
            if template is None:
                raise ValueError(f"missing prompt template {name!r}")
            absent = [p for p in required if f"{{{p}}}" not in template.text]
            if absent:
                raise ValueError(
                    f"template {name!r} lacks required placeholder(s) {absent}"
                )

    @classmethod
    def load(cls, template_dir: str | Path | None = None) -> "PromptLibrary":
        templates: dict[str, PromptTemplate] = {}
        package_dir = resources.files("trajdiag") / "templates"
        for name in TEMPLATE_NAMES:
            text = (package_dir / f"{name}.txt").read_text(encoding="utf-8")
            templates[name] = PromptTemplate(name=name, text=text)
        if template_dir is not None:
            override_dir = Path(template_dir)
            if not override_dir.is_dir():
                raise ValueError(f"template directory not found: {override_dir}")
            for name in TEMPLATE_NAMES:
                override = override_dir / f"{name}.txt"
                if override.exists():
                    templates[name] = PromptTemplate(
                        name=name, text=override.read_text(encoding="utf-8")
                    )
        return cls(templates)

    def get(self, name: str) -> PromptTemplate:
        try:
            return self._templates[name]
        except KeyError:
            raise KeyError(f"no prompt template named {name!r}") from None

    def fingerprint(self) -> dict[str, str]:
        """Template name to content hash, for report provenance."""
        return {name: t.content_hash for name, t in sorted(self._templates.items())}
