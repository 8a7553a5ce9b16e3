"""Score tools, signatures and rules against oracle labels.

Percentages are stored at full precision and rounded to one decimal only
when a report is rendered. Samples whose oracle label is UNKNOWN_PACKED
are left out of family and signature scoring but count as packed for
packedness scoring.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Optional, Sequence, Union

from .normalize import FamilyAliasTable, canonicalize_label
from .oracle import NOT_PACKED, UNKNOWN_PACKED, OracleLabel, Provenance, oracle_digest
from .rules import RuleSet
from .signatures import Signature, SignatureDb

OracleMap = Mapping[str, Union[OracleLabel, str]]
CSV_COLUMNS = ("Tool", "Family", "Recall", "Prec.", "F1", "FPR")


class DomainMismatch(ValueError):
    pass


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def f1_score(recall: float, precision: float) -> float:
    """Harmonic mean of two percentages; 0 when both are 0."""
    s = recall + precision
    return 2 * recall * precision / s if s > 0 else 0.0


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def recall(self) -> float:
        return _pct(self.tp, self.tp + self.fn)

    @property
    def precision(self) -> float:
        return _pct(self.tp, self.tp + self.fp)

    @property
    def f1(self) -> float:
        return f1_score(self.recall, self.precision)

    @property
    def fpr(self) -> float:
        return _pct(self.fp, self.fp + self.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_json(self) -> dict[str, Any]:
        return {"recall": round(self.recall, 1), "precision": round(self.precision, 1),
                "f1": round(self.f1, 1), "fpr": round(self.fpr, 1),
                "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}}


def oracle_family(label: Union[OracleLabel, str]) -> str:
    return label.family if isinstance(label, OracleLabel) else label


def _check_domain(a: Mapping, b: Mapping) -> None:
    if a.keys() != b.keys():
        missing, extra = len(b.keys() - a.keys()), len(a.keys() - b.keys())
        raise DomainMismatch(f"prediction/oracle sample sets differ ({missing} missing, {extra} extra)")


def score_family(predictions: Mapping[str, Optional[str]], oracle: OracleMap, family: str) -> Metrics:
    """One-vs-rest confusion for ``family``."""
    _check_domain(predictions, oracle)
    tp = fp = fn = tn = 0
    for sid, pred in predictions.items():
        truth = oracle_family(oracle[sid])
        if truth == UNKNOWN_PACKED:
            continue
        if pred == family:
            if truth == family:
                tp += 1
            else:
                fp += 1
        elif truth == family:
            fn += 1
        else:
            tn += 1
    return Metrics(tp, fp, fn, tn)


def score_packedness(verdicts: Mapping[str, bool], oracle: OracleMap) -> Metrics:
    _check_domain(verdicts, oracle)
    c: Counter = Counter()
    for sid, packed in verdicts.items():
        c[(bool(packed), oracle_family(oracle[sid]) != NOT_PACKED)] += 1
    return Metrics(c[(True, True)], c[(True, False)], c[(False, True)], c[(False, False)])


# --------------------------------------------------------------------------- signatures

@dataclass(frozen=True, order=True)
class SigRef:
    """Stable reference to a db entry: (db name, label, pattern digest)."""

    db: str
    label: str
    digest: str

    @classmethod
    def of(cls, db: SignatureDb, sig: Signature) -> "SigRef":
        return cls(db.name, sig.label, sig.digest)

    def to_json(self) -> dict[str, str]:
        return {"db": self.db, "label": self.label, "digest": self.digest}

    @classmethod
    def from_json(cls, obj: Mapping[str, str]) -> "SigRef":
        return cls(obj["db"], obj["label"], obj["digest"])


@dataclass(frozen=True)
class SignatureScore:
    ref: SigRef
    family: str  # canonical family of the signature's label
    matches: int
    correct: int
    per_family: dict[str, tuple[int, int]] = field(default_factory=dict)
    hits: frozenset[str] = frozenset()  # correctly matched samples
    oracle_digest: str = ""

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.matches if self.matches else None

    def to_json(self) -> dict[str, Any]:
        return {"kind": "signature_score", "ref": self.ref.to_json(), "family": self.family,
                "matches": self.matches, "correct": self.correct, "accuracy": self.accuracy,
                "per_family": {k: list(v) for k, v in sorted(self.per_family.items())},
                "oracle_digest": self.oracle_digest}


SigKey = Union[int, Signature, SigRef]


def score_signatures(db: SignatureDb, match_log: Iterable[tuple[str, SigKey]], oracle: OracleMap,
                     table: Optional[FamilyAliasTable] = None) -> list[SignatureScore]:
    """Per-signature accuracy; each (signature, sample) pair counts once.

    ``match_log`` entries name a signature by db index, by object, or by
    :class:`SigRef`. Every db entry is scored, including unmatched ones.
    """
    refs = [SigRef.of(db, s) for s in db.entries]
    by_ref = {r: i for i, r in enumerate(refs)}
    by_sig = {s: i for i, s in enumerate(db.entries)}
    matched: list[set[str]] = [set() for _ in db.entries]
    for sid, key in match_log:
        if isinstance(key, int):
            i = key
        elif isinstance(key, SigRef):
            i = by_ref[key]
        else:
            i = by_sig[key]
        if sid not in oracle:
            raise DomainMismatch(f"match log sample {sid} has no oracle label")
        matched[i].add(sid)
    digest = snapshot_digest(oracle)
    out = []
    for i, sig in enumerate(db.entries):
        fam = canonicalize_label(sig.label, table).family
        per: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        hits = set()
        for sid in matched[i]:
            truth = oracle_family(oracle[sid])
            if truth == UNKNOWN_PACKED:
                continue
            per[truth][0] += 1
            if truth == fam:
                per[truth][1] += 1
                hits.add(sid)
        m = sum(v[0] for v in per.values())
        out.append(SignatureScore(refs[i], fam, m, len(hits), {k: tuple(v) for k, v in per.items()},
                                  frozenset(hits), digest))
    return out


def snapshot_digest(oracle: OracleMap) -> str:
    """Digest of an oracle map, equal to the one embedded in scores."""
    return oracle_digest({k: v if isinstance(v, OracleLabel) else OracleLabel(k, v, Provenance.PLANTED)
                          for k, v in oracle.items()})


# --------------------------------------------------------------------------- rules

@dataclass(frozen=True)
class RuleProfile:
    rule: str
    per_family: dict[str, dict[str, float]]  # family -> {count, fired, recall, precision}
    metrics: Metrics
    fired_by_family: dict[str, frozenset[str]] = field(default_factory=dict, repr=False)

    def recall(self, family: str) -> float:
        return self.per_family.get(family, {}).get("recall", 0.0)

    def to_json(self) -> dict[str, Any]:
        return {"kind": "rule_profile", "rule": self.rule, "metrics": self.metrics.to_json(),
                "per_family": {k: {kk: (round(vv, 1) if isinstance(vv, float) else vv) for kk, vv in v.items()}
                               for k, v in sorted(self.per_family.items())}}


def _profile(rule: str, fired_samples: set[str], oracle: OracleMap) -> RuleProfile:
    groups: dict[str, set[str]] = defaultdict(set)
    for sid, lab in oracle.items():
        groups[oracle_family(lab)].add(sid)
    fired_by = {fam: frozenset(members & fired_samples) for fam, members in groups.items()}
    fp = len(fired_by.get(NOT_PACKED, ()))
    per_family = {}
    for fam, members in groups.items():
        n_fired = len(fired_by[fam])
        entry: dict[str, float] = {"count": len(members), "fired": n_fired,
                                   "recall": _pct(n_fired, len(members))}
        if fam != NOT_PACKED:
            entry["precision"] = _pct(n_fired, n_fired + fp)
        per_family[fam] = entry
    tp = sum(len(v) for k, v in fired_by.items() if k != NOT_PACKED)
    n_packed = sum(len(v) for k, v in groups.items() if k != NOT_PACKED)
    n_clean = len(groups.get(NOT_PACKED, ()))
    return RuleProfile(rule, per_family, Metrics(tp, fp, n_packed - tp, n_clean - fp), fired_by)


def profile_rules(log: Iterable[tuple[str, Hashable, bool]], oracle: OracleMap) -> list[RuleProfile]:
    """Per-rule, per-family coverage from a (sample, rule, fired) log.

    The log must hold every (rule, sample) pair over the oracle's samples.
    """
    fired: dict[str, set[str]] = defaultdict(set)
    seen: dict[str, set[str]] = defaultdict(set)
    for sid, rule, hit in log:
        key = str(rule)
        seen[key].add(sid)
        if hit:
            fired[key].add(sid)
    samples = set(oracle)
    out = []
    for key in sorted(seen):
        if seen[key] != samples:
            raise DomainMismatch(f"rule {key}: log covers {len(seen[key])} of {len(samples)} samples")
        out.append(_profile(key, fired[key], oracle))
    return out


def profile_union(name: str, members: Sequence[RuleProfile], oracle: OracleMap) -> RuleProfile:
    """Profile of the ANY-combination of already-profiled rules."""
    fired: set[str] = set()
    for p in members:
        for s in p.fired_by_family.values():
            fired |= s
    return _profile(name, fired, oracle)


def profile_ruleset(rs: RuleSet, profiles: Mapping[str, RuleProfile], oracle: OracleMap) -> RuleProfile:
    return profile_union(rs.name or "ruleset", [profiles[str(r)] for r in rs.members], oracle)


# --------------------------------------------------------------------------- reports

@dataclass(frozen=True)
class MetricsRow:
    tool: str
    family: str
    metrics: Metrics

    def to_json(self) -> dict[str, Any]:
        return {"tool": self.tool, "family": self.family, **self.metrics.to_json()}


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricsRow, ...]
    excluded_unparseable: int = 0
    notes: tuple[str, ...] = ()

    def sorted_rows(self) -> list[MetricsRow]:
        """Recall first, then F1; ties broken by name so output is stable."""
        return sorted(self.rows, key=lambda r: (r.family, -round(r.metrics.recall, 6),
                                                -round(r.metrics.f1, 6), r.tool))

    def to_json(self) -> dict[str, Any]:
        return {"kind": "metrics_report", "excluded_unparseable": self.excluded_unparseable,
                "notes": list(self.notes), "rows": [r.to_json() for r in self.sorted_rows()]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.sorted_rows():
            m = r.metrics
            w.writerow([r.tool, r.family] + [f"{v:.1f}" for v in (m.recall, m.precision, m.f1, m.fpr)])
        return buf.getvalue()

    def dumps(self, fmt: str = "json") -> str:
        if fmt == "csv":
            return self.to_csv()
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


PACKED_ROW = "packed"


def family_report(tool_predictions: Mapping[str, Mapping[str, Optional[str]]], oracle: OracleMap,
                  families: Sequence[str]) -> list[MetricsRow]:
    return [MetricsRow(tool, fam, score_family(preds, oracle, fam))
            for tool, preds in tool_predictions.items() for fam in families]


def packedness_report(tool_verdicts: Mapping[str, Mapping[str, bool]], oracle: OracleMap) -> list[MetricsRow]:
    return [MetricsRow(tool, PACKED_ROW, score_packedness(v, oracle)) for tool, v in tool_verdicts.items()]
