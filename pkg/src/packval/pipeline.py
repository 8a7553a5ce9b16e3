"""Glue between detectors and scoring: scanning samples and building logs."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .corpus import SampleIndex
from .normalize import FamilyAliasTable, Role, UnifiedRecord, canonicalize_label, unify, UNKNOWN
from .pe import PeError, PeImage, parse_pe
from .rules import TOOL_HEURISTICS, RuleConfig, RuleId, RuleSet, catalog, evaluate_rule, evaluate_ruleset
from .signatures import PROFILES, ScopePolicy, SignatureDb, match_signatures, signature_predict

# emulated signature tools and the scope profile each one uses
SIGNATURE_TOOLS: dict[str, str] = {
    "PEiD": "peid",
    "app-peid": "app-peid",
    "ReadPE": "readpe",
    "PyPackerDetect": "pypackerdetect",
}


def load_images(index: SampleIndex) -> tuple[dict[str, PeImage], dict[str, str]]:
    """Parse every indexed sample; returns (images, failures: sha -> status)."""
    images: dict[str, PeImage] = {}
    failed: dict[str, str] = {}
    for e in index.entries:
        if e.status != "OK":
            failed[e.sha256] = e.status
            continue
        try:
            images[e.sha256] = parse_pe(Path(e.paths[0]).read_bytes())
        except PeError as exc:
            failed[e.sha256] = type(exc).__name__
    return images, failed


def family_of(raw: Optional[str], table: Optional[FamilyAliasTable] = None) -> Optional[str]:
    if raw is None:
        return None
    fam = canonicalize_label(raw, table).family
    return None if fam == UNKNOWN else fam


def scan_image(img: PeImage, dbs: Sequence[SignatureDb], cfg: RuleConfig,
               heuristics: Mapping[str, RuleSet] = TOOL_HEURISTICS,
               table: Optional[FamilyAliasTable] = None) -> UnifiedRecord:
    """Run every emulated tool on one image and normalize the outputs."""
    outputs = []
    for tool, rs in heuristics.items():
        outputs.append((tool, Role.PACKEDNESS, "True" if evaluate_ruleset(rs, img, cfg).packed else "False"))
    for tool, profile in SIGNATURE_TOOLS.items():
        outputs.append((tool, Role.FAMILY, signature_predict(dbs, img, PROFILES[profile])))
    return unify(img.sha256, outputs, table)


def signature_predictions(images: Mapping[str, PeImage], dbs: Sequence[SignatureDb],
                          policy: ScopePolicy | str, table: Optional[FamilyAliasTable] = None,
                          ) -> dict[str, Optional[str]]:
    return {sid: family_of(signature_predict(dbs, img, policy), table) for sid, img in images.items()}


def signature_match_log(db: SignatureDb, images: Mapping[str, PeImage],
                        policy: ScopePolicy | str) -> list[tuple[str, int]]:
    """(sample, db index) for every signature that matches a sample under ``policy``."""
    if isinstance(policy, str):
        policy = PROFILES[policy]
    log = []
    for sid, img in images.items():
        for idx in sorted({m.index for m in match_signatures(db, img, policy.scopes)}):
            log.append((sid, idx))
    return log


def rule_log(images: Mapping[str, PeImage], cfg: RuleConfig,
             rules: Optional[Iterable[RuleId]] = None) -> list[tuple[str, RuleId, bool]]:
    rules = list(rules) if rules is not None else [rid for rid, _, _ in catalog()]
    return [(sid, r, evaluate_rule(r, img, cfg).fired) for sid, img in images.items() for r in rules]


def heuristic_verdicts(images: Mapping[str, PeImage], cfg: RuleConfig,
                       heuristics: Mapping[str, RuleSet] = TOOL_HEURISTICS) -> dict[str, dict[str, bool]]:
    return {tool: {sid: evaluate_ruleset(rs, img, cfg).packed for sid, img in images.items()}
            for tool, rs in heuristics.items()}
