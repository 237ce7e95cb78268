"""Prompt templates: plain text files with ``{{name}}`` placeholders.

A template set is a directory of ``*.txt`` files. Substitution is a
single pass, so placeholder-like text inside substituted values (an essay
that happens to contain ``{{body}}``) is left alone. Every placeholder in
a template must be supplied and every supplied value must be used.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


class TemplateError(Exception):
    pass


@dataclass(frozen=True)
class TemplateSet:
    id: str
    templates: Mapping[str, str]

    def names(self, template: str) -> set[str]:
        return set(PLACEHOLDER.findall(self.get(template)))

    def get(self, template: str) -> str:
        try:
            return self.templates[template]
        except KeyError:
            raise TemplateError(f"template set {self.id!r} has no template {template!r}") from None

    def render(self, template: str, **values: object) -> str:
        text = self.get(template)
        wanted = self.names(template)
        missing = sorted(wanted - values.keys())
        if missing:
            raise TemplateError(f"{template}: no value for {missing}")
        extra = sorted(values.keys() - wanted)
        if extra:
            raise TemplateError(f"{template}: unused values {extra}")
        # the file's own final newline is not part of the prompt
        text = text[:-1] if text.endswith("\n") else text
        return PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), text)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.templates):
            for part in (name, self.templates[name]):
                data = part.encode("utf-8")
                h.update(len(data).to_bytes(8, "big") + data)
        return h.hexdigest()


def load_template_set(ref: str | Path = "default") -> TemplateSet:
    """Load a bundled set by id, or any directory of ``*.txt`` templates."""
    path = Path(ref)
    if path.is_dir():
        root, set_id = path, path.name
        files = {p.stem: p.read_text(encoding="utf-8") for p in sorted(root.glob("*.txt"))}
    else:
        pkg = resources.files("regai") / "templates" / str(ref)
        if not pkg.is_dir():
            raise TemplateError(f"no template set {ref!r}")
        set_id = str(ref)
        files = {
            p.name[:-4]: p.read_text(encoding="utf-8")
            for p in sorted(pkg.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".txt")
        }
    if not files:
        raise TemplateError(f"template set {ref!r} is empty")
    return TemplateSet(set_id, files)
