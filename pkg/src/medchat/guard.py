"""Input gate in front of the dialogue backend.

Every patient utterance is classified as benign, prompt injection, or
jailbreak before anything else may see it.  Classification is a rule scan:
case-insensitive regular expressions with a total priority order, highest
priority winning when several match.  The rule file is data, so a stricter
engine can replace this one without touching any caller.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import RuleError

CATEGORIES = ("benign", "injection", "jailbreak")


@dataclass(frozen=True)
class GuardVerdict:
    category: str
    rule_id: str | None = None
    matched_span: str | None = None

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise RuleError(f"unknown category {self.category!r}")
        if (self.category != "benign") != (self.rule_id is not None):
            raise RuleError("rule_id must be present exactly when a rule matched")

    @property
    def is_benign(self) -> bool:
        return self.category == "benign"


@dataclass(frozen=True)
class GuardRule:
    rule_id: str
    category: str
    pattern: re.Pattern
    priority: int


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[GuardRule, ...]
    version: str = "1"

    def __len__(self) -> int:
        return len(self.rules)


def build_ruleset(entries, version: str = "1") -> RuleSet:
    """Compile and order rule entries; highest priority first."""
    rules = []
    seen = set()
    for entry in entries:
        rid = entry["id"]
        if rid in seen:
            raise RuleError(f"duplicate rule id {rid!r}")
        seen.add(rid)
        category = entry["category"]
        if category not in ("injection", "jailbreak"):
            raise RuleError(f"rule {rid!r} has unknown category {category!r}")
        try:
            pattern = re.compile(entry["pattern"], re.IGNORECASE)
        except re.error as exc:
            raise RuleError(f"rule {rid!r} pattern does not compile: {exc}") from exc
        rules.append(
            GuardRule(
                rule_id=str(rid),
                category=category,
                pattern=pattern,
                priority=int(entry["priority"]),
            )
        )
    rules.sort(key=lambda r: (-r.priority, r.rule_id))
    return RuleSet(rules=tuple(rules), version=str(version))


def load_ruleset(path) -> RuleSet:
    """Read a JSON rule file: a list of {id, category, pattern, priority}."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        entries = raw.get("rules", [])
        version = str(raw.get("version", "1"))
    else:
        entries, version = raw, "1"
    if not entries:
        warnings.warn(f"guard rule file {path} is empty; every input will pass")
        return RuleSet(rules=(), version=version)
    return build_ruleset(entries, version)


def default_ruleset() -> RuleSet:
    with resources.files("medchat.data").joinpath("guard_rules.json").open() as fh:
        raw = json.load(fh)
    return build_ruleset(raw["rules"], str(raw.get("version", "1")))


def classify(text: str, rules: RuleSet) -> GuardVerdict:
    """Scan the rules in priority order; the first hit decides the verdict."""
    if not isinstance(text, str):
        text = str(text)
    for rule in rules.rules:
        match = rule.pattern.search(text)
        if match:
            return GuardVerdict(
                category=rule.category,
                rule_id=rule.rule_id,
                matched_span=match.group(0),
            )
    return GuardVerdict(category="benign")
