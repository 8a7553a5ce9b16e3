"""Named heuristic rules of the emulated packer tools, and their composites.

Each rule is an independent predicate over a :class:`~packval.pe.PeImage`.
Tool heuristics are ANY-combinations of rules (:data:`TOOL_HEURISTICS`).
The upstream tools publish rule names but not exact predicates; the
predicates here follow each name's documented intent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Optional, Sequence

from .entropy import (
    EntropyConfig,
    PackednessVerdict,
    bintropy_decide,
    reminder_decide,
    shannon_entropy,
    wholefile_entropy_decide,
)
from .pe import CANONICAL_DOS_MESSAGE, PeImage, entry_point_context, overlay_range
from .signatures import PROFILES, ScopePolicy, SignatureDb, load_signature_db, match_signatures


class UnknownRule(KeyError):
    pass


@dataclass(frozen=True, order=True)
class RuleId:
    tool: str
    name: str

    def __str__(self) -> str:
        return f"{self.tool}.{self.name}"

    @classmethod
    def parse(cls, text: str) -> "RuleId":
        tool, _, name = text.partition(".")
        return cls(tool, name)


@dataclass(frozen=True)
class RuleVerdict:
    rule: RuleId
    fired: bool
    evidence: dict[str, Any] = field(default_factory=dict)


class Combiner(enum.Enum):
    ANY = "ANY"
    ALL = "ALL"


@dataclass(frozen=True)
class RuleSet:
    members: tuple[RuleId, ...]
    combiner: Combiner = Combiner.ANY
    name: str = ""

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("a RuleSet needs at least one member")

    def with_members(self, extra: Sequence[RuleId], name: Optional[str] = None) -> "RuleSet":
        members = list(self.members)
        members += [r for r in extra if r not in members]
        return RuleSet(tuple(members), self.combiner, self.name if name is None else name)

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "combiner": self.combiner.value,
                "members": [str(r) for r in self.members]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "RuleSet":
        return cls(tuple(RuleId.parse(m) for m in obj["members"]),
                   Combiner(obj.get("combiner", "ANY")), obj.get("name", ""))


def read_name_table(text: str) -> dict[str, str]:
    """Parse ``name<TAB>family`` lines; '#' starts a comment line."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        name, sep, family = line.partition("\t")
        if not sep or not name:
            raise ValueError(f"line {lineno}: expected name<TAB>family")
        out.setdefault(name, family.strip())
    return out


def write_name_table(table: dict[str, str], header: str = "") -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k}\t{v}" for k, v in table.items()]
    return "\n".join(lines) + "\n"


def _data_text(name: str) -> str:
    return resources.files("packval.data").joinpath(name).read_text()


def default_section_table() -> dict[str, str]:
    return read_name_table(_data_text("section_names.tsv"))


def default_marker_table() -> dict[str, str]:
    return read_name_table(_data_text("markers.tsv"))


def default_signature_db() -> SignatureDb:
    with resources.as_file(resources.files("packval.data").joinpath("userdb.txt")) as p:
        return load_signature_db(p, "userdb")


@dataclass(frozen=True)
class RuleConfig:
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    low_imports_threshold: int = 10
    section_entropy_threshold: float = 7.0
    good_ep_sections: tuple[str, ...] = (".text", "CODE", ".code", "INIT")
    section_table: dict[str, str] = field(default_factory=default_section_table)
    marker_table: dict[str, str] = field(default_factory=default_marker_table)
    case_sensitive_names: bool = True
    resources_min_fraction: float = 0.01
    resources_min_file_size: int = 64 * 1024
    signature_dbs: tuple[SignatureDb, ...] = field(default_factory=lambda: (default_signature_db(),))
    peid_policy: ScopePolicy = PROFILES["pypackerdetect"]


Predicate = Callable[[PeImage, RuleConfig], tuple[bool, dict[str, Any]]]


def _section_name(img: PeImage, cfg: RuleConfig) -> tuple[bool, dict[str, Any]]:
    if cfg.case_sensitive_names:
        table = cfg.section_table
        key = lambda n: n  # noqa: E731
    else:
        table = {k.lower(): v for k, v in cfg.section_table.items()}
        key = str.lower
    for s in img.sections:
        fam = table.get(key(s.name))
        if fam is not None:
            return True, {"matched": s.name, "family_hint": fam}
    return False, {"sections": [s.name for s in img.sections]}


def _wx_section(img, cfg):
    for s in img.sections:
        if s.writable and s.executable:
            return True, {"section": s.name}
    return False, {"wx_sections": []}


def _low_imports(img, cfg):
    n = img.import_count
    return n < cfg.low_imports_threshold, {"import_count": n, "threshold": cfg.low_imports_threshold}


def _high_entropy_section(img, cfg):
    ents = {}
    for i, s in enumerate(img.sections):
        e = shannon_entropy(img.section_data(i))
        ents[s.name] = e
        if e > cfg.section_entropy_threshold:
            return True, {"section": s.name, "entropy": e}
    return False, {"section_entropies": ents}


def _high_entropy_file(img, cfg):
    v = wholefile_entropy_decide(img, cfg.entropy)
    return v.packed, dict(v.evidence)


def _resources_size(img, cfg):
    size = len(img.raw)
    rsrc = img.resource_dir[1] if img.resource_dir else 0
    small = img.resource_dir is None or rsrc < cfg.resources_min_fraction * size
    fired = small and size > cfg.resources_min_file_size
    return fired, {"resource_size": rsrc, "file_size": size}


def _rich_header(img, cfg):
    return not img.rich_header_present, {"rich_header_present": img.rich_header_present}


def _bad_ep_sections(img, cfg):
    ctx = entry_point_context(img)
    if ctx.ep_section is None:
        return True, {"ep_section": None}
    name = img.sections[ctx.ep_section].name
    good = cfg.good_ep_sections
    if not cfg.case_sensitive_names:
        name_cmp, good = name.lower(), tuple(g.lower() for g in good)
    else:
        name_cmp = name
    return name_cmp not in good, {"ep_section": name}


def _peid_signature(img, cfg):
    hits = []
    for db in cfg.signature_dbs:
        hits += [m.signature.label for m in match_signatures(db, img, cfg.peid_policy.scopes)]
    return bool(hits), {"matches": hits[:8], "match_count": len(hits)}


def _modified_dos(img, cfg):
    ok = CANONICAL_DOS_MESSAGE in img.dos_stub_message
    return not ok, {"dos_stub": img.dos_stub_message[:80].decode("latin-1")}


def _has_overlay(img, cfg):
    ov = overlay_range(img)
    return ov is not None and ov[1] > 0, {"overlay": ov}


def _import_table_bad(img, cfg):
    if img.import_dir is None:
        return False, {"import_dir": None}
    rva = img.import_dir[0]
    inside = any(s.contains_rva(rva) for s in img.sections)
    truncated = [n for n in img.notes if "import descriptor" in n and "truncated" in n]
    return (not inside) or bool(truncated), {"import_rva": rva, "inside_section": inside,
                                             "truncation_notes": truncated}


def _beyond_image_size(img, cfg):
    ep_beyond = img.entry_point_rva >= img.image_size
    past_eof = [s.name for s in img.sections if s.truncated]
    return ep_beyond or bool(past_eof), {"entry_point_rva": img.entry_point_rva,
                                          "image_size": img.image_size,
                                          "sections_past_eof": past_eof}


def _string_markers(img, cfg):
    for marker, fam in cfg.marker_table.items():
        if marker.encode("latin-1") in img.raw:
            return True, {"marker": marker, "family_hint": fam}
    return False, {"markers_checked": len(cfg.marker_table)}


def _verdict_rule(fn: Callable[[PeImage, RuleConfig], PackednessVerdict]) -> Predicate:
    def pred(img, cfg):
        v = fn(img, cfg)
        return v.packed, dict(v.evidence)
    return pred


_R = RuleId
_CATALOG: dict[RuleId, tuple[str, tuple[str, ...], Predicate]] = {
    _R("Manalyze", "high_entropy"): ("any section's data entropy exceeds the threshold",
                                     ("section_entropy_threshold",), _high_entropy_section),
    _R("Manalyze", "low_imports"): ("fewer imported functions than the threshold",
                                    ("low_imports_threshold",), _low_imports),
    _R("Manalyze", "resources_size"): ("large file with absent or tiny resource directory",
                                       ("resources_min_fraction", "resources_min_file_size"), _resources_size),
    _R("Manalyze", "rich_header"): ("rich header missing (low-fidelity stand-in)", (), _rich_header),
    _R("Manalyze", "section_name"): ("a section name appears in the packer section table",
                                     ("section_table", "case_sensitive_names"), _section_name),
    _R("Manalyze", "wx_section"): ("a section is both writable and executable", (), _wx_section),
    _R("PyPackerDetect", "bad_ep_sections"): ("entry point outside the usual code sections",
                                              ("good_ep_sections",), _bad_ep_sections),
    _R("PyPackerDetect", "low_imports"): ("fewer imported functions than the threshold",
                                          ("low_imports_threshold",), _low_imports),
    _R("PyPackerDetect", "packer_section_match"): ("a section name appears in the packer section table",
                                                   ("section_table", "case_sensitive_names"), _section_name),
    _R("PyPackerDetect", "peid_signature_match"): ("a signature matches under the PyPackerDetect scopes",
                                                   ("signature_dbs", "peid_policy"), _peid_signature),
    _R("qu1cksc0pe", "HasModified_DOS_Message"): ("DOS stub lacks the canonical message", (), _modified_dos),
    _R("qu1cksc0pe", "HasOverlay"): ("bytes follow the last section's raw data", (), _has_overlay),
    _R("qu1cksc0pe", "ImportTableIsBad"): ("import directory unresolvable or truncated", (), _import_table_bad),
    _R("qu1cksc0pe", "IsBeyondImageSize"): ("entry point past SizeOfImage or section data past EOF",
                                            (), _beyond_image_size),
    _R("qu1cksc0pe", "IsPacked"): ("whole-file entropy exceeds the threshold",
                                   ("entropy.wholefile_threshold",), _high_entropy_file),
    _R("qu1cksc0pe", "string_name_match"): ("a packer marker string occurs in the file",
                                            ("marker_table",), _string_markers),
    _R("readpe", "high_entropy"): ("whole-file entropy exceeds the threshold",
                                   ("entropy.wholefile_threshold",), _high_entropy_file),
    _R("readpe", "section_name"): ("a section name appears in the packer section table",
                                   ("section_table", "case_sensitive_names"), _section_name),
    _R("pypeid", "heur1"): ("whole-file entropy exceeds the threshold",
                            ("entropy.wholefile_threshold",), _high_entropy_file),
    _R("REMINDer", "heur1"): ("entry-point section writable with high entropy",
                              ("entropy.reminder_ep_entropy_threshold",),
                              _verdict_rule(lambda i, c: reminder_decide(i, c.entropy))),
}
for _variant in ("m0", "m1", "m0/m1", "m0&m1"):
    _CATALOG[_R("Bintropy", _variant)] = (
        f"Bintropy block entropy, variant {_variant}",
        ("entropy.block_size", "entropy.bintropy_avg_threshold", "entropy.bintropy_max_threshold"),
        _verdict_rule(lambda i, c, v=_variant: bintropy_decide(i, c.entropy, v)),
    )


def catalog() -> list[tuple[RuleId, str, tuple[str, ...]]]:
    return [(rid, desc, keys) for rid, (desc, keys, _) in _CATALOG.items()]


_DEFAULT_CFG: Optional[RuleConfig] = None


def default_rule_config() -> RuleConfig:
    global _DEFAULT_CFG
    if _DEFAULT_CFG is None:
        _DEFAULT_CFG = RuleConfig()
    return _DEFAULT_CFG


def evaluate_rule(rule: RuleId, img: PeImage, cfg: Optional[RuleConfig] = None) -> RuleVerdict:
    try:
        _, _, pred = _CATALOG[rule]
    except KeyError:
        raise UnknownRule(str(rule)) from None
    fired, evidence = pred(img, cfg or default_rule_config())
    return RuleVerdict(rule, bool(fired), evidence)


def evaluate_ruleset(rs: RuleSet, img: PeImage, cfg: Optional[RuleConfig] = None) -> PackednessVerdict:
    verdicts = [evaluate_rule(r, img, cfg) for r in rs.members]
    fired = [v for v in verdicts if v.fired]
    if rs.combiner is Combiner.ANY:
        packed = bool(fired)
    else:
        packed = len(fired) == len(verdicts)
    evidence = {str(v.rule): v.evidence for v in fired}
    return PackednessVerdict(packed, rs.name or "ruleset", evidence)


def _rs(name: str, *members: tuple[str, str]) -> RuleSet:
    return RuleSet(tuple(RuleId(*m) for m in members), Combiner.ANY, name)


TOOL_HEURISTICS: dict[str, RuleSet] = {
    "Bintropy (m0)": _rs("Bintropy (m0)", ("Bintropy", "m0")),
    "Bintropy (m1)": _rs("Bintropy (m1)", ("Bintropy", "m1")),
    "Bintropy (m0/m1)": _rs("Bintropy (m0/m1)", ("Bintropy", "m0/m1")),
    "Bintropy (m0&m1)": _rs("Bintropy (m0&m1)", ("Bintropy", "m0&m1")),
    "PyPEiD (heur1)": _rs("PyPEiD (heur1)", ("pypeid", "heur1")),
    "Manalyze (heur1)": _rs("Manalyze (heur1)", *[("Manalyze", n) for n in (
        "high_entropy", "low_imports", "resources_size", "rich_header", "section_name", "wx_section")]),
    "PyPackerDetect (heur1)": _rs("PyPackerDetect (heur1)", *[("PyPackerDetect", n) for n in (
        "bad_ep_sections", "low_imports", "packer_section_match", "peid_signature_match")]),
    "REMINDer (heur1)": _rs("REMINDer (heur1)", ("REMINDer", "heur1")),
    "ReadPE (heur1)": _rs("ReadPE (heur1)", ("readpe", "high_entropy")),
    "ReadPE (heur2)": _rs("ReadPE (heur2)", ("readpe", "section_name")),
    "qu1cksc0pe (heur1)": _rs("qu1cksc0pe (heur1)", *[("qu1cksc0pe", n) for n in (
        "HasModified_DOS_Message", "HasOverlay", "ImportTableIsBad", "IsBeyondImageSize",
        "IsPacked", "string_name_match")]),
}
