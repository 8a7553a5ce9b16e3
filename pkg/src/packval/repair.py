"""Plan/apply repairs: signature replacement, heuristic augmentation, unpacker-derived detectors.

Plans are plain data computed against one frozen oracle snapshot. Applying a
plan never mutates its input.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional, Sequence

from .diagnostics import OracleMap, RuleProfile, SignatureScore, SigRef, oracle_family, snapshot_digest
from .mock import FAMILIES as MOCK_FAMILIES
from .normalize import UNKNOWN
from .oracle import NOT_PACKED, UNKNOWN_PACKED, UnpackerKind, UnpackerSpec
from .pe import PeImage
from .rules import Combiner, RuleConfig, RuleId, RuleSet, evaluate_ruleset
from .signatures import PROFILES, Signature, SignatureDb, match_signatures


class OracleMismatch(ValueError):
    """Inputs were scored against different oracle snapshots."""


class StalePlan(ValueError):
    """A plan no longer applies to the database it is applied to."""


class EmptyModule(ValueError):
    pass


class FixKind(enum.Enum):
    SIGNATURE_FIX = "SIGNATURE_FIX"
    HEURISTIC_FIX = "HEURISTIC_FIX"
    UNPACKER_FIX = "UNPACKER_FIX"


@dataclass(frozen=True)
class FixThresholds:
    faulty_accuracy_max: float = 0.1
    min_support: int = 3
    donor_accuracy_min: float = 0.9
    target_family_recall_min: float = 50.0  # percent

    def __post_init__(self) -> None:
        for name in ("faulty_accuracy_max", "donor_accuracy_min"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.target_family_recall_min <= 100.0:
            raise ValueError("target_family_recall_min is a percentage in [0, 100]")
        if self.min_support < 0:
            raise ValueError("min_support must be non-negative")

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> "FixThresholds":
        return cls(**{k: m[k] for k in cls.__dataclass_fields__ if k in m})


def _sig_json(s: Signature) -> dict[str, Any]:
    return {"label": s.label, "signature": s.pattern_text, "ep_only": s.ep_only, "source_db": s.source_db}


def _sig_from_json(o: Mapping[str, Any]) -> Signature:
    return Signature.from_hex(o["label"], o["signature"], bool(o["ep_only"]), o.get("source_db", ""))


@dataclass(frozen=True)
class RepairPlan:
    kind: FixKind
    target: str
    removals: tuple[SigRef, ...] = ()
    additions: tuple[Any, ...] = ()  # Signature | RuleId | detector module id
    rationale: tuple[dict[str, Any], ...] = ()  # one entry per removal, then per addition
    oracle_digest: str = ""

    def __post_init__(self) -> None:
        if len(self.rationale) != len(self.removals) + len(self.additions):
            raise ValueError("every plan item needs a rationale entry")
        if any(r.db != self.target for r in self.removals):
            raise ValueError("removals may only reference the target database")

    @property
    def empty(self) -> bool:
        return not self.removals and not self.additions

    def to_json(self) -> dict[str, Any]:
        adds: list[Any] = []
        for a in self.additions:
            if isinstance(a, Signature):
                adds.append({"signature": _sig_json(a)})
            elif isinstance(a, RuleId):
                adds.append({"rule": str(a)})
            else:
                adds.append({"module": str(a)})
        return {"kind": "repair_plan", "fix": self.kind.value, "target": self.target,
                "oracle_digest": self.oracle_digest,
                "removals": [r.to_json() for r in self.removals], "additions": adds,
                "rationale": list(self.rationale)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RepairPlan":
        adds: list[Any] = []
        for a in obj["additions"]:
            if "signature" in a:
                adds.append(_sig_from_json(a["signature"]))
            elif "rule" in a:
                adds.append(RuleId.parse(a["rule"]))
            else:
                adds.append(a["module"])
        return cls(FixKind(obj["fix"]), obj["target"], tuple(SigRef.from_json(r) for r in obj["removals"]),
                   tuple(adds), tuple(obj["rationale"]), obj.get("oracle_digest", ""))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def _family_sizes(oracle: OracleMap) -> dict[str, int]:
    sizes: dict[str, int] = {}
    for lab in oracle.values():
        fam = oracle_family(lab)
        sizes[fam] = sizes.get(fam, 0) + 1
    return sizes


def plan_signature_fix(target: SignatureDb, target_scores: Sequence[SignatureScore],
                       donors: Sequence[tuple[SignatureDb, Sequence[SignatureScore]]],
                       oracle: OracleMap, th: FixThresholds = FixThresholds()) -> RepairPlan:
    """Remove faulty target signatures; add accurate donor signatures for weak families.

    A family is weak when the union of samples correctly matched by the
    surviving target signatures covers less than ``target_family_recall_min``
    percent of that family's oracle samples.
    """
    digest = snapshot_digest(oracle)
    for s in list(target_scores) + [s for _, scores in donors for s in scores]:
        if s.oracle_digest != digest:
            raise OracleMismatch(f"score for {s.ref.label!r} comes from oracle {s.oracle_digest}, not {digest}")
    if len(target_scores) != len(target.entries):
        raise OracleMismatch("target scores do not cover the target database")

    removals, rationale = [], []
    surviving: list[tuple[Signature, SignatureScore]] = []
    for sig, sc in zip(target.entries, target_scores):
        acc = sc.accuracy
        if sc.matches >= th.min_support and acc is not None and acc <= th.faulty_accuracy_max:
            removals.append(sc.ref)
            rationale.append({"action": "remove", "label": sc.ref.label, "matches": sc.matches,
                              "correct": sc.correct, "accuracy": acc, "per_family": {
                                  k: list(v) for k, v in sorted(sc.per_family.items())}})
        else:
            surviving.append((sig, sc))

    sizes = _family_sizes(oracle)
    covered: dict[str, set[str]] = {}
    for _, sc in surviving:
        covered.setdefault(sc.family, set()).update(sc.hits)

    def recall(fam: str) -> float:
        n = sizes.get(fam, 0)
        return 100.0 * len(covered.get(fam, ())) / n if n else 100.0

    present = {s.digest for s, _ in surviving}
    additions = []
    for db, scores in donors:
        for sig, sc in zip(db.entries, scores):
            fam = sc.family
            if fam in (UNKNOWN, NOT_PACKED, UNKNOWN_PACKED) or sig.digest in present:
                continue
            acc = sc.accuracy
            if sc.matches < th.min_support or acc is None or acc < th.donor_accuracy_min:
                continue
            before = recall(fam)
            if before >= th.target_family_recall_min:
                continue
            additions.append(sig)
            present.add(sig.digest)
            rationale.append({"action": "add", "label": sig.label, "donor": db.name, "family": fam,
                              "matches": sc.matches, "correct": sc.correct, "accuracy": acc,
                              "target_family_recall": round(before, 3)})
            covered.setdefault(fam, set()).update(sc.hits)
    return RepairPlan(FixKind.SIGNATURE_FIX, target.name, tuple(removals), tuple(additions),
                      tuple(rationale), digest)


def apply_signature_fix(db: SignatureDb, plan: RepairPlan, idempotent: bool = False) -> SignatureDb:
    """Return ``db`` with the plan's removals dropped and additions appended.

    Unresolvable removals or already-present additions raise
    :class:`StalePlan`; with ``idempotent`` they are skipped instead.
    """
    if plan.kind is not FixKind.SIGNATURE_FIX:
        raise ValueError(f"cannot apply a {plan.kind.value} plan to a signature database")
    if plan.target != db.name:
        raise StalePlan(f"plan targets {plan.target!r}, database is {db.name!r}")
    entries = list(db.entries)
    for ref in plan.removals:
        idx = next((i for i, s in enumerate(entries) if s.label == ref.label and s.digest == ref.digest), None)
        if idx is None:
            if idempotent:
                continue
            raise StalePlan(f"removal {ref.label!r} ({ref.digest}) no longer resolves")
        del entries[idx]
    for sig in plan.additions:
        if any(s.digest == sig.digest and s.label == sig.label for s in entries):
            if idempotent:
                continue
            raise StalePlan(f"addition {sig.label!r} is already present")
        entries.append(sig)
    return db.with_entries(entries)


def plan_heuristic_fix(target: RuleSet, profiles: Mapping[str, RuleProfile], target_families: Iterable[str],
                       th: FixThresholds = FixThresholds()) -> RuleSet:
    """Augment ``target`` with foreign rules covering families it misses.

    Members are never removed and the combiner stays ANY, so recall can only
    grow on every family.
    """
    if target.combiner is not Combiner.ANY:
        raise ValueError("heuristic fixes apply to ANY-combined rule sets")
    members = [profiles[str(r)] for r in target.members]
    families = list(target_families)

    def union_recall(fam: str) -> float:
        count = int(members[0].per_family.get(fam, {}).get("count", 0))
        fired: set[str] = set()
        for p in members:
            fired |= p.fired_by_family.get(fam, frozenset())
        return 100.0 * len(fired) / count if count else 100.0

    weak = [f for f in families if union_recall(f) < th.target_family_recall_min]
    own = {str(r) for r in target.members}
    extra = []
    for key in sorted(profiles):
        if key in own:
            continue
        if any(profiles[key].recall(f) >= th.target_family_recall_min for f in weak):
            extra.append(RuleId.parse(key))
    if not extra:
        return target
    return target.with_members(extra, name=f"{target.name} + fix" if target.name else "fixed")


def heuristic_plan(target: RuleSet, fixed: RuleSet, profiles: Mapping[str, RuleProfile],
                   oracle: OracleMap) -> RepairPlan:
    """Describe a heuristic fix as a :class:`RepairPlan` for the results store."""
    added = [r for r in fixed.members if r not in target.members]
    rationale = tuple({"action": "add", "rule": str(r),
                       "per_family_recall": {k: round(v["recall"], 1) for k, v in
                                             sorted(profiles[str(r)].per_family.items())}} for r in added)
    return RepairPlan(FixKind.HEURISTIC_FIX, target.name, (), tuple(added), rationale, snapshot_digest(oracle))


# --------------------------------------------------------------------------- unpacker-based detectors

@dataclass(frozen=True)
class DetectorModule:
    id: str
    family: str
    signatures: Optional[SignatureDb] = None
    rules: Optional[RuleSet] = None
    combiner: Combiner = Combiner.ANY

    def __post_init__(self) -> None:
        if not (self.signatures and len(self.signatures)) and not (self.rules and self.rules.members):
            raise EmptyModule(f"detector {self.id!r} has neither signatures nor rules")

    def fires(self, img: PeImage, cfg: Optional[RuleConfig] = None) -> bool:
        if self.signatures is not None and match_signatures(self.signatures, img, PROFILES["app-peid"].scopes):
            return True
        return self.rules is not None and evaluate_ruleset(self.rules, img, cfg).packed

    def to_json(self) -> dict[str, Any]:
        return {"kind": "detector_module", "id": self.id, "family": self.family,
                "signatures": [_sig_json(s) for s in self.signatures.entries] if self.signatures else [],
                "rules": self.rules.to_json() if self.rules else None}


DETECTOR_CATALOG: dict[str, DetectorModule] = {}


def build_unpacker_detector(spec: UnpackerSpec,
                            extracted: tuple[Sequence[Signature], Sequence[RuleId]],
                            register: bool = True) -> DetectorModule:
    """Package an unpacker's family knowledge as an attachable detector."""
    if spec.kind is UnpackerKind.GENERIC:
        raise ValueError("GENERIC unpackers carry no family knowledge to extract")
    sigs, rules = extracted
    mod_id = f"{spec.id}-detector"
    db = SignatureDb(mod_id, tuple(sigs)) if sigs else None
    rs = RuleSet(tuple(rules), Combiner.ANY, mod_id) if rules else None
    module = DetectorModule(mod_id, spec.families[0], db, rs)
    if register:
        DETECTOR_CATALOG[mod_id] = module
    return module


def mock_extraction(family: str) -> tuple[list[Signature], list[RuleId]]:
    """Authored extraction data for a mock unpacker: its stub plus marker string."""
    fam = MOCK_FAMILIES[family]
    marker = " ".join(f"{b:02X}" for b in fam.marker)
    sig = Signature.from_hex(f"{family} stub (unpacker-derived)", f"{fam.signature_text} {marker}",
                             True, f"{family.lower()}-unpacker")
    return [sig], []


def attach_family(predictions: Mapping[str, Optional[str]], module: DetectorModule,
                  images: Mapping[str, PeImage], cfg: Optional[RuleConfig] = None) -> dict[str, Optional[str]]:
    """Fill samples the tool left unlabelled with the module's family when it fires."""
    out = dict(predictions)
    for sid, pred in predictions.items():
        if pred is None and sid in images and module.fires(images[sid], cfg):
            out[sid] = module.family
    return out


def attach_packedness(verdicts: Mapping[str, bool], module: DetectorModule,
                      images: Mapping[str, PeImage], cfg: Optional[RuleConfig] = None) -> dict[str, bool]:
    return {sid: bool(v) or (sid in images and module.fires(images[sid], cfg)) for sid, v in verdicts.items()}
