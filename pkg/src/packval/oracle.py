"""Unpackers as executable contracts: validated unpacking and oracle labels.

A predicted family is CONFIRMED when one of its unpackers produces output
that passes :func:`validate_unpacked`. Oracle labels come from label-guided
contracts first, then an exhaustive sweep over every registered unpacker.

External unpackers run as child processes with a wall-clock timeout in a
fresh scratch directory. The harness never runs the sample itself, but a
real dynamic unpacker may; running those is the operator's risk.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import shlex
import shutil
import subprocess
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

from .entropy import shannon_entropy
from .mock import MOCK_UNPACKERS, WrongFamily
from .normalize import UNKNOWN, FamilyAliasTable, canonicalize_label
from .pe import PeError, PeImage, parse_pe

log = logging.getLogger(__name__)

NOT_PACKED = "NOT_PACKED"
UNKNOWN_PACKED = "UNKNOWN_PACKED"


class UnpackerKind(enum.Enum):
    GENERIC = "GENERIC"
    CUSTOM = "CUSTOM"
    MOCK = "MOCK"


class Outcome(enum.Enum):
    CONFIRMED = "CONFIRMED"
    VIOLATED = "VIOLATED"
    NO_UNPACKER = "NO_UNPACKER"
    TIMEOUT = "TIMEOUT"
    CRASH = "CRASH"


class Provenance(enum.Enum):
    LABEL_GUIDED = "LABEL_GUIDED"
    EXHAUSTIVE = "EXHAUSTIVE"
    PLANTED = "PLANTED"


class BadRegistry(ValueError):
    pass


@dataclass(frozen=True)
class UnpackerSpec:
    id: str
    families: tuple[str, ...]
    kind: UnpackerKind
    command: str
    timeout: float = 30.0

    def argv(self, in_path: str, out_path: str) -> list[str]:
        """Expand the command template; placeholders may sit inside a token."""
        return [t.replace("{in}", in_path).replace("{out}", out_path) for t in shlex.split(self.command)]


def load_registry(text: str, table: Optional[FamilyAliasTable] = None) -> list[UnpackerSpec]:
    """Parse ``id | kind | families | command | timeout`` lines."""
    specs: list[UnpackerSpec] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) not in (4, 5):
            raise BadRegistry(f"line {lineno}: expected 'id | kind | families | command | timeout'")
        uid, kind_s, fams_s, command = parts[:4]
        timeout = 30.0
        if len(parts) == 5 and parts[4]:
            try:
                timeout = float(parts[4])
            except ValueError:
                raise BadRegistry(f"line {lineno}: bad timeout {parts[4]!r}") from None
        if timeout <= 0:
            raise BadRegistry(f"line {lineno}: timeout must be positive")
        if not uid:
            raise BadRegistry(f"line {lineno}: empty id")
        if uid in seen:
            raise BadRegistry(f"line {lineno}: duplicate id {uid!r}")
        seen.add(uid)
        try:
            kind = UnpackerKind(kind_s.upper())
        except ValueError:
            raise BadRegistry(f"line {lineno}: unknown kind {kind_s!r}") from None
        fams = []
        for f in (x.strip() for x in fams_s.split(",")):
            if not f:
                continue
            canon = canonicalize_label(f, table).family
            fams.append(canon if canon != UNKNOWN else f)
        if kind is UnpackerKind.GENERIC and fams:
            raise BadRegistry(f"line {lineno}: GENERIC unpacker {uid!r} must not list families")
        if kind is not UnpackerKind.GENERIC and not fams:
            raise BadRegistry(f"line {lineno}: {kind.value} unpacker {uid!r} needs at least one family")
        if command.startswith("mock:"):
            if command[5:] not in MOCK_UNPACKERS:
                raise BadRegistry(f"line {lineno}: unknown mock unpacker {command!r}")
        elif "{in}" not in command or "{out}" not in command:
            raise BadRegistry(f"line {lineno}: command must contain {{in}} and {{out}}")
        specs.append(UnpackerSpec(uid, tuple(fams), kind, command, timeout))
    return specs


def default_registry(include_upx: Optional[bool] = None) -> list[UnpackerSpec]:
    """Shipped mock registry, plus ``upx -d`` when a UPX binary is on PATH."""
    from importlib import resources
    text = resources.files("packval.data").joinpath("registry.txt").read_text()
    if include_upx is None:
        include_upx = shutil.which("upx") is not None
    if include_upx:
        text += "upx | CUSTOM | UPX | upx -d -q {in} -o {out} | 60\n"
    return load_registry(text)


@dataclass(frozen=True)
class ValidationPolicy:
    """When recovered bytes count as analyzable program content.

    Passing needs every check in ``required`` and at least ``min_any`` of
    the checks in ``any_of``.
    """

    require_valid_pe: bool = True
    min_entropy_drop: float = 0.5
    min_import_growth: int = 1
    min_size_ratio: float = 0.5
    required: tuple[str, ...] = ("valid_pe", "size_ratio")
    any_of: tuple[str, ...] = ("entropy_drop", "import_growth")
    min_any: int = 1

    CHECKS = ("valid_pe", "entropy_drop", "import_growth", "size_ratio")

    def __post_init__(self) -> None:
        for c in self.required + self.any_of:
            if c not in self.CHECKS:
                raise ValueError(f"unknown check {c!r}")
        if not 0 <= self.min_any <= len(self.any_of):
            raise ValueError("quorum unsatisfiable: min_any exceeds the any_of checks")
        if self.require_valid_pe and "valid_pe" not in self.required:
            object.__setattr__(self, "required", ("valid_pe",) + self.required)


@dataclass(frozen=True)
class ValidationResult:
    passed: bool
    checks: dict[str, bool] = field(default_factory=dict)
    measurements: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"passed": self.passed, "checks": self.checks, "measurements": self.measurements}


def validate_unpacked(original: PeImage, recovered: bytes,
                      policy: ValidationPolicy = ValidationPolicy()) -> ValidationResult:
    m: dict[str, Any] = {
        "entropy_before": shannon_entropy(original.raw),
        "entropy_after": shannon_entropy(recovered),
        "imports_before": original.import_count,
        "size_before": len(original.raw),
        "size_after": len(recovered),
    }
    try:
        rec = parse_pe(recovered)
        valid, m["imports_after"] = True, rec.import_count
    except PeError as exc:
        valid, m["imports_after"], m["parse_error"] = False, 0, str(exc)
    m["entropy_drop"] = m["entropy_before"] - m["entropy_after"]
    m["import_growth"] = m["imports_after"] - m["imports_before"]
    m["size_ratio"] = len(recovered) / len(original.raw) if original.raw else 0.0
    checks = {
        "valid_pe": valid,
        "entropy_drop": m["entropy_drop"] >= policy.min_entropy_drop,
        "import_growth": valid and m["import_growth"] >= policy.min_import_growth,
        "size_ratio": m["size_ratio"] >= policy.min_size_ratio,
    }
    passed = (all(checks[c] for c in policy.required)
              and sum(checks[c] for c in policy.any_of) >= policy.min_any)
    return ValidationResult(passed, checks, m)


@dataclass(frozen=True)
class ContractVerdict:
    sample_id: str
    predicted_family: Optional[str]
    unpacker_id: Optional[str]
    outcome: Outcome
    validation: Optional[ValidationResult] = None
    detail: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": "contract", "sample": self.sample_id, "predicted_family": self.predicted_family,
            "unpacker": self.unpacker_id, "outcome": self.outcome.value,
            "validation": self.validation.to_json() if self.validation else None,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class OracleLabel:
    sample_id: str
    family: str
    provenance: Provenance
    confirming_unpacker: Optional[str] = None
    # GENERIC unpacker that showed packedness without naming a family
    generic_unpacker: Optional[str] = None

    def __post_init__(self) -> None:
        if self.confirming_unpacker and self.family == UNKNOWN_PACKED:
            raise ValueError("a confirming unpacker names a family; UNKNOWN_PACKED is not allowed")

    @property
    def packed(self) -> bool:
        return self.family != NOT_PACKED

    def to_json(self) -> dict[str, Any]:
        return {"kind": "oracle", "sample": self.sample_id, "family": self.family,
                "provenance": self.provenance.value, "confirming_unpacker": self.confirming_unpacker,
                "generic_unpacker": self.generic_unpacker}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "OracleLabel":
        return cls(obj["sample"], obj["family"], Provenance(obj["provenance"]),
                   obj.get("confirming_unpacker"), obj.get("generic_unpacker"))


def oracle_digest(labels: Mapping[str, OracleLabel]) -> str:
    """Content digest identifying one oracle snapshot."""
    rows = sorted((k, v.family) for k, v in labels.items())
    return hashlib.sha256(json.dumps(rows).encode()).hexdigest()[:16]


def _run_external(spec: UnpackerSpec, sample: bytes, sample_id: str, keep_scratch: bool) -> tuple[Outcome, Optional[bytes], str]:
    scratch = tempfile.mkdtemp(prefix=f"packval-{sample_id[:12]}-{spec.id}-")
    try:
        in_path = os.path.join(scratch, "sample.bin")
        out_path = os.path.join(scratch, "unpacked.bin")
        with open(in_path, "wb") as fh:
            fh.write(sample)
        argv = spec.argv(in_path, out_path)
        try:
            proc = subprocess.run(argv, cwd=scratch, timeout=spec.timeout,
                                  stdin=subprocess.DEVNULL, capture_output=True)
        except subprocess.TimeoutExpired:
            return Outcome.TIMEOUT, None, f"exceeded {spec.timeout}s"
        except OSError as exc:
            return Outcome.CRASH, None, f"could not start: {exc}"
        if proc.returncode != 0:
            return Outcome.CRASH, None, f"exit status {proc.returncode}: {proc.stderr[-200:].decode(errors='replace')}"
        if not os.path.exists(out_path):
            return Outcome.CRASH, None, "no output written"
        with open(out_path, "rb") as fh:
            return Outcome.CONFIRMED, fh.read(), ""
    finally:
        if not keep_scratch:
            shutil.rmtree(scratch, ignore_errors=True)


def run_unpacker(spec: UnpackerSpec, sample: bytes, original: PeImage, policy: ValidationPolicy,
                 predicted_family: Optional[str] = None, keep_scratch: bool = False) -> ContractVerdict:
    """Run one unpacker and validate its output."""
    sid = original.sha256
    if spec.command.startswith("mock:"):
        try:
            out: Optional[bytes] = MOCK_UNPACKERS[spec.command[5:]](sample)
            status, detail = Outcome.CONFIRMED, ""
        except WrongFamily as exc:
            return ContractVerdict(sid, predicted_family, spec.id, Outcome.VIOLATED,
                                   ValidationResult(False, {}, {"rejected": str(exc)}), str(exc))
        except Exception as exc:  # noqa: BLE001 - any unpacker failure is an outcome
            return ContractVerdict(sid, predicted_family, spec.id, Outcome.CRASH, None, repr(exc))
    else:
        status, out, detail = _run_external(spec, sample, sid, keep_scratch)
    if status is not Outcome.CONFIRMED or out is None:
        return ContractVerdict(sid, predicted_family, spec.id, status, None, detail)
    result = validate_unpacked(original, out, policy)
    outcome = Outcome.CONFIRMED if result.passed else Outcome.VIOLATED
    return ContractVerdict(sid, predicted_family, spec.id, outcome, result, detail)


def _covering(registry: Sequence[UnpackerSpec], family: str) -> list[UnpackerSpec]:
    return [u for u in registry if u.kind is not UnpackerKind.GENERIC and family in u.families]


def run_contract(sample: bytes, predicted_family: str, registry: Sequence[UnpackerSpec],
                 policy: ValidationPolicy = ValidationPolicy(), original: Optional[PeImage] = None,
                 ) -> ContractVerdict:
    """Check the contract of one predicted family; first confirming unpacker wins.

    When every covering unpacker fails, the last attempt's verdict is returned.
    """
    original = original or parse_pe(sample)
    covering = _covering(registry, predicted_family)
    if not covering:
        return ContractVerdict(original.sha256, predicted_family, None, Outcome.NO_UNPACKER)
    verdict = None
    for spec in covering:
        verdict = run_unpacker(spec, sample, original, policy, predicted_family)
        if verdict.outcome is Outcome.CONFIRMED:
            return verdict
    return verdict


def derive_oracle_label(sample: bytes, predictions: Iterable[Optional[str]],
                        registry: Sequence[UnpackerSpec],
                        policy: ValidationPolicy = ValidationPolicy(), *,
                        default: str = NOT_PACKED, budget: int = 128,
                        verdicts: Optional[list[ContractVerdict]] = None) -> OracleLabel:
    """Label one sample: label-guided contracts, then an exhaustive unpacker sweep.

    Every contract verdict is appended to ``verdicts`` when a list is given.
    """
    log_ = verdicts if verdicts is not None else []
    original = parse_pe(sample)
    sid = original.sha256
    tried: set[str] = set()
    runs = 0

    for fam in sorted({p for p in predictions if p and p not in (UNKNOWN, NOT_PACKED, UNKNOWN_PACKED)}):
        covering = [u for u in _covering(registry, fam) if u.id not in tried]
        if not covering:
            log_.append(ContractVerdict(sid, fam, None, Outcome.NO_UNPACKER))
            continue
        for spec in covering:
            if runs >= budget:
                break
            tried.add(spec.id)
            runs += 1
            v = run_unpacker(spec, sample, original, policy, fam)
            log_.append(v)
            if v.outcome is Outcome.CONFIRMED:
                return OracleLabel(sid, fam, Provenance.LABEL_GUIDED, spec.id)

    specific = [u for u in registry if u.kind is not UnpackerKind.GENERIC]
    generic = [u for u in registry if u.kind is UnpackerKind.GENERIC]
    for spec in specific + generic:
        if spec.id in tried or runs >= budget:
            continue
        tried.add(spec.id)
        runs += 1
        v = run_unpacker(spec, sample, original, policy, None)
        log_.append(v)
        if v.outcome is Outcome.CONFIRMED:
            if spec.families:
                return OracleLabel(sid, spec.families[0], Provenance.EXHAUSTIVE, spec.id)
            return OracleLabel(sid, UNKNOWN_PACKED, Provenance.EXHAUSTIVE, None, spec.id)
    return OracleLabel(sid, default, Provenance.EXHAUSTIVE, None)


def _derive_one(args):
    sample, preds, registry, policy, default, budget = args
    verdicts: list[ContractVerdict] = []
    label = derive_oracle_label(sample, preds, registry, policy, default=default,
                                budget=budget, verdicts=verdicts)
    return label, verdicts


def derive_oracle_labels(samples: Mapping[str, bytes], predictions: Mapping[str, Iterable[Optional[str]]],
                         registry: Sequence[UnpackerSpec], policy: ValidationPolicy = ValidationPolicy(),
                         *, workers: int = 1, default: str = NOT_PACKED, budget: int = 128,
                         ) -> tuple[dict[str, OracleLabel], list[ContractVerdict]]:
    """Label many samples, optionally on a process pool. Output order follows ``samples``."""
    keys = list(samples)
    jobs = [(samples[k], tuple(predictions.get(k, ())), list(registry), policy, default, budget) for k in keys]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_derive_one, jobs, chunksize=8))
    else:
        results = [_derive_one(j) for j in jobs]
    labels: dict[str, OracleLabel] = {}
    all_verdicts: list[ContractVerdict] = []
    for k, (label, verdicts) in zip(keys, results):
        labels[k] = label
        all_verdicts += verdicts
    return labels, all_verdicts
