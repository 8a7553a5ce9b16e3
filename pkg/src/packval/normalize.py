"""Canonical family labels and the per-sample unified result record."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Optional

UNKNOWN = "UNKNOWN"

CANONICAL_FAMILIES = (
    "UPX", "Themida", "WinUpack", "ASPack", "Petite", "Armadillo", "MPRESS",
    "PECompact", "MEW", "NSPack", "PESpin", "PyInstaller", "ConfuserEx",
    "Molebox", "tElock", "FSG", "MOCKX", "MOCKR", "MOCKN",
)

# the six VirusTotal packer sub-tools
VT_SUBTOOLS = ("PEiD", "Cyren", "Varist", "F-PROT", "Command", "Taggant")

_VERSION = re.compile(r"[\s\-_:]*(v?\d[\w.]*)", re.IGNORECASE)


class Role(enum.Enum):
    PACKEDNESS = "PACKEDNESS"
    FAMILY = "FAMILY"


class DuplicateTool(ValueError):
    pass


class MalformedReport(ValueError):
    pass


@dataclass(frozen=True)
class AliasRule:
    kind: str  # prefix | substr | regex
    pattern: str
    family: str

    def search(self, text: str) -> Optional[int]:
        """Return the end index of the match in ``text``, or None."""
        low = text.lower()
        if self.kind == "prefix":
            p = self.pattern.lower()
            return len(p) if low.startswith(p) else None
        if self.kind == "substr":
            p = self.pattern.lower()
            i = low.find(p)
            return None if i < 0 else i + len(p)
        m = re.search(self.pattern, text, re.IGNORECASE)
        return m.end() if m else None


@dataclass(frozen=True)
class FamilyAliasTable:
    rules: tuple[AliasRule, ...]

    @classmethod
    def parse(cls, text: str) -> "FamilyAliasTable":
        rules = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[0] not in ("prefix", "substr", "regex"):
                raise ValueError(f"alias table line {lineno}: expected kind<TAB>pattern<TAB>family")
            if parts[0] == "regex":
                re.compile(parts[1])
            rules.append(AliasRule(*parts))
        return cls(tuple(rules))

    @classmethod
    def default(cls) -> "FamilyAliasTable":
        return cls.parse(resources.files("packval.data").joinpath("aliases.tsv").read_text())

    @property
    def families(self) -> frozenset[str]:
        return frozenset(r.family for r in self.rules)


_DEFAULT_TABLE: Optional[FamilyAliasTable] = None


def default_alias_table() -> FamilyAliasTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = FamilyAliasTable.default()
    return _DEFAULT_TABLE


@dataclass(frozen=True)
class CanonicalLabel:
    family: str
    version: Optional[str]
    raw: str


def canonicalize_label(raw: str, table: Optional[FamilyAliasTable] = None) -> CanonicalLabel:
    table = table or default_alias_table()
    for rule in table.rules:
        end = rule.search(raw)
        if end is None:
            continue
        version = None
        m = _VERSION.match(raw, end)
        if m:
            version = m.group(1)
            if version[:1] in "vV":
                version = version[1:]
        return CanonicalLabel(rule.family, version, raw)
    return CanonicalLabel(UNKNOWN, None, raw)


@dataclass(frozen=True)
class ToolResult:
    heur: Optional[bool] = None
    signature_match: Optional[str] = None
    raw: Any = None
    role: Role = Role.FAMILY

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.role is Role.PACKEDNESS:
            out["heur"] = "yes" if self.heur else "no"
        else:
            out["signature_match"] = self.signature_match
        out["raw"] = self.raw
        return out


@dataclass(frozen=True)
class UnifiedRecord:
    sample_id: str
    tools: dict[str, ToolResult] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"sample": self.sample_id,
                "tools": {name: r.to_json() for name, r in self.tools.items()}}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "UnifiedRecord":
        tools = {}
        for name, t in obj["tools"].items():
            if "heur" in t:
                tools[name] = ToolResult(heur=t["heur"] == "yes", raw=t.get("raw"), role=Role.PACKEDNESS)
            else:
                tools[name] = ToolResult(signature_match=t.get("signature_match"), raw=t.get("raw"))
        return cls(obj["sample"], tools)

    def families(self) -> dict[str, Optional[str]]:
        return {k: v.signature_match for k, v in self.tools.items() if v.role is Role.FAMILY}

    def packedness(self) -> dict[str, bool]:
        return {k: bool(v.heur) for k, v in self.tools.items() if v.role is Role.PACKEDNESS}


def _as_bool(payload: Any) -> bool:
    if isinstance(payload, str):
        v = payload.strip().lower()
        if v in ("true", "yes", "packed", "1"):
            return True
        if v in ("false", "no", "not packed", "unpacked", "0", ""):
            return False
        raise ValueError(f"cannot read packedness from {payload!r}")
    return bool(payload)


def unify(sample_id: str, outputs: Iterable[tuple[str, Role | str, Any]],
          table: Optional[FamilyAliasTable] = None) -> UnifiedRecord:
    """Merge raw per-tool outputs for one sample into a :class:`UnifiedRecord`."""
    if not sample_id:
        raise ValueError("sample_id must be non-empty")
    tools: dict[str, ToolResult] = {}
    for tool, role, payload in outputs:
        role = Role(role)
        if tool in tools:
            raise DuplicateTool(tool)
        if role is Role.PACKEDNESS:
            tools[tool] = ToolResult(heur=_as_bool(payload), raw=payload, role=role)
        else:
            family = None
            if payload is not None and str(payload).strip():
                family = canonicalize_label(str(payload), table).family
            tools[tool] = ToolResult(signature_match=family, raw=payload, role=role)
    return UnifiedRecord(sample_id, tools)


def read_vt_report(text: str) -> list[tuple[str, Role, str]]:
    """Extract packer labels from a VT-export report ``{"sample": ..., "packers": {...}}``."""
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedReport(str(exc)) from None
    if not isinstance(obj, dict):
        raise MalformedReport("report is not a JSON object")
    packers = obj.get("packers", {})
    if packers is None:
        return []
    if not isinstance(packers, dict):
        raise MalformedReport("'packers' is not an object")
    out = []
    for sub in VT_SUBTOOLS:
        label = packers.get(sub)
        if isinstance(label, str) and label.strip():
            out.append((f"VT {sub}", Role.FAMILY, label))
    return out


def record_schema() -> dict[str, Any]:
    return json.loads(resources.files("packval.data").joinpath("unified_record.schema.json").read_text())
