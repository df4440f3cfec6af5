"""Prompt template loading.

Each template file has a ``[system]`` section and a ``[user]`` section with
``$name`` placeholders (:class:`string.Template` syntax, so the JSON braces in
the prompts need no escaping).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

PROMPT_VERSION = 1

TEMPLATE_NAMES = (
    "fast_plan",
    "replan",
    "plan_in_detail",
    "re_describe",
    "revise",
    "detector",
    "scorer",
    "evaluate",
    "code_agent",
    "code_rewrite",
    "math_agent",
    "search_agent",
    "search_rewrite",
    "commonsense_agent",
    "synthesize",
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: Template
    user: Template

    def render(self, **values) -> tuple[str, str]:
        values = {k: str(v) for k, v in values.items()}
        return self.system.substitute(values), self.user.substitute(values)

    @classmethod
    def parse(cls, name: str, text: str) -> "PromptTemplate":
        if "[system]\n" not in text or "\n[user]\n" not in text:
            raise ValueError(f"template {name!r} needs [system] and [user] sections")
        head, user = text.split("\n[user]\n", 1)
        system = head.split("[system]\n", 1)[1]
        return cls(name, Template(system.rstrip("\n")), Template(user.rstrip("\n")))


class TemplateSet:
    """Named prompt templates; files in ``override_dir`` replace packaged ones."""

    def __init__(self, override_dir: str | Path | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, PromptTemplate] = {}

    def __getitem__(self, name: str) -> PromptTemplate:
        if name not in self._cache:
            self._cache[name] = PromptTemplate.parse(name, self._read(name))
        return self._cache[name]

    def _read(self, name: str) -> str:
        if self.override_dir is not None:
            candidate = self.override_dir / f"{name}.txt"
            if candidate.exists():
                return candidate.read_text(encoding="utf-8")
        return resources.files("aoplan.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")

    def render(self, name: str, **values) -> tuple[str, str]:
        return self[name].render(**values)


DEFAULT_TEMPLATES = TemplateSet()
