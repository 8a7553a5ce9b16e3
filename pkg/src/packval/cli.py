"""Command line: gen, scan, oracle, diagnose, repair, report.

Exit codes: 0 success, 1 internal failure, 2 configuration or spec error,
3 ordering or stale-state error (e.g. repair before oracle).

All outputs land under the run directory (``out_dir``) or on stdout;
inputs are never rewritten.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .corpus import IoError, ingest, generate_corpus, read_store, results_store_append
from .diagnostics import (
    MetricsReport,
    family_report,
    packedness_report,
    profile_rules,
    profile_ruleset,
    score_family,
    score_signatures,
    snapshot_digest,
)
from .entropy import EntropyConfig
from .normalize import FamilyAliasTable, default_alias_table
from .oracle import (
    NOT_PACKED,
    UNKNOWN_PACKED,
    BadRegistry,
    OracleLabel,
    UnpackerKind,
    ValidationPolicy,
    default_registry,
    derive_oracle_labels,
    load_registry,
)
from .mock import FAMILIES as MOCK_FAMILIES
from .pe import SpecInvalid
from .pipeline import (
    SIGNATURE_TOOLS,
    heuristic_verdicts,
    load_images,
    rule_log,
    scan_image,
    signature_match_log,
    signature_predictions,
)
from .repair import (
    FixThresholds,
    OracleMismatch,
    StalePlan,
    apply_signature_fix,
    attach_family,
    build_unpacker_detector,
    heuristic_plan,
    mock_extraction,
    plan_heuristic_fix,
    plan_signature_fix,
)
from .rules import TOOL_HEURISTICS, RuleConfig, default_signature_db
from .signatures import EmptyDb, SignatureDb, load_signature_db, serialize_signature_db

log = logging.getLogger("packval")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_STALE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class OrderingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    corpus: Optional[Path] = None
    out_dir: Path = Path("packval-run")
    registry: Optional[Path] = None
    signature_dbs: tuple[Path, ...] = ()
    donor_dbs: tuple[Path, ...] = ()
    alias_table: Optional[Path] = None
    entropy: dict[str, Any] = field(default_factory=dict)
    rules: dict[str, Any] = field(default_factory=dict)
    fix: dict[str, Any] = field(default_factory=dict)
    validation: dict[str, Any] = field(default_factory=dict)
    target_tool: str = "PEiD"
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    seed: int = 0
    store: Optional[Path] = None

    @property
    def store_path(self) -> Path:
        return self.store or self.out_dir / "results.jsonl"

    def check(self, need_corpus: bool = True) -> "RunConfig":
        paths = [p for p in (self.registry, self.alias_table) if p] + list(self.signature_dbs) + list(self.donor_dbs)
        if need_corpus:
            if self.corpus is None:
                raise ConfigError("no corpus given (--corpus or config 'corpus')")
            paths.append(self.corpus)
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"path does not exist: {p}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.target_tool not in SIGNATURE_TOOLS:
            raise ConfigError(f"target_tool must be one of {sorted(SIGNATURE_TOOLS)}")
        try:
            self.entropy_config()
            self.thresholds()
            self.policy()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def entropy_config(self) -> EntropyConfig:
        return EntropyConfig.from_mapping(self.entropy)

    def thresholds(self) -> FixThresholds:
        return FixThresholds.from_mapping(self.fix)

    def policy(self) -> ValidationPolicy:
        v = dict(self.validation)
        for k in ("required", "any_of"):
            if k in v:
                v[k] = tuple(v[k])
        return ValidationPolicy(**v)

    def alias(self) -> FamilyAliasTable:
        if self.alias_table:
            return FamilyAliasTable.parse(Path(self.alias_table).read_text())
        return default_alias_table()

    def dbs(self) -> list[SignatureDb]:
        if not self.signature_dbs:
            return [default_signature_db()]
        return [load_signature_db(p) for p in self.signature_dbs]

    def donors(self) -> list[SignatureDb]:
        if not self.donor_dbs:
            from importlib import resources
            with resources.as_file(resources.files("packval.data").joinpath("donor_userdb.txt")) as p:
                return [load_signature_db(p, "donor")]
        return [load_signature_db(p) for p in self.donor_dbs]

    def rule_config(self) -> RuleConfig:
        keys = {k: v for k, v in self.rules.items() if k in RuleConfig.__dataclass_fields__}
        for k in ("good_ep_sections",):
            if k in keys:
                keys[k] = tuple(keys[k])
        return RuleConfig(entropy=self.entropy_config(), signature_dbs=tuple(self.dbs()), **keys)

    def unpackers(self):
        if self.registry:
            return load_registry(Path(self.registry).read_text(), self.alias())
        return default_registry()


_PATH_KEYS = ("corpus", "out_dir", "registry", "alias_table", "store")


def load_config(path: Optional[str], overrides: dict[str, Any]) -> RunConfig:
    data: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(data) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for k in _PATH_KEYS:
        if data.get(k) is not None:
            data[k] = Path(data[k])
    for k in ("signature_dbs", "donor_dbs"):
        if k in data:
            data[k] = tuple(Path(p) for p in data[k])
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------- state files

def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _oracle_file(cfg: RunConfig) -> Path:
    return cfg.out_dir / "oracle.json"


def _load_oracle(cfg: RunConfig) -> tuple[dict[str, OracleLabel], str]:
    p = _oracle_file(cfg)
    if not p.exists():
        raise OrderingError("no oracle labels yet; run 'packval oracle' first")
    obj = json.loads(p.read_text())
    labels = {k: OracleLabel.from_json(v) for k, v in obj["labels"].items()}
    digest = snapshot_digest(labels)
    if digest != obj["digest"]:
        raise OrderingError("oracle.json digest does not match its labels")
    return labels, digest


def _latest_scan(cfg: RunConfig) -> dict[str, dict[str, Any]]:
    recs = read_store(cfg.store_path, "unified_record")
    if not recs:
        return {}
    run = recs[-1]["run"]
    return {r["sample"]: r for r in recs if r["run"] == run}


def _corpus(cfg: RunConfig):
    index = ingest(cfg.corpus, workers=cfg.workers)
    images, failed = load_images(index)
    return index, images, failed


# --------------------------------------------------------------------------- commands

def parse_spec(text: str) -> dict[str, int]:
    """``MOCKX=50,MOCKR=50,unpacked=50`` or a JSON object."""
    text = text.strip()
    if text.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecInvalid(str(exc)) from None
        return dict(obj)
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep:
            raise SpecInvalid(f"bad spec item {part!r}; expected NAME=COUNT")
        try:
            out[key.strip()] = int(val)
        except ValueError:
            raise SpecInvalid(f"bad count in {part!r}") from None
    return out


def cmd_gen(spec: str | dict[str, int], seed: int, out_dir) -> int:
    try:
        counts = parse_spec(spec) if isinstance(spec, str) else dict(spec)
        out, manifest = generate_corpus(counts, seed, out_dir)
    except SpecInvalid as exc:
        log.error("invalid corpus spec: %s", exc)
        return EXIT_CONFIG
    log.info("generated %d samples (manifest digest %s)", len(manifest.samples), manifest.digest[:16])
    print(out / "manifest.json")
    return EXIT_OK


def cmd_scan(cfg: RunConfig) -> int:
    index, images, failed = _corpus(cfg)
    rcfg, table, dbs = cfg.rule_config(), cfg.alias(), cfg.dbs()
    run = uuid.uuid4().hex[:12]
    for sha, status in sorted(failed.items()):
        log.warning("sample %s not parsed: %s", sha[:16], status)
        results_store_append({"kind": "unified_record", "run": run, "sample": sha, "status": status,
                              "tools": {}}, cfg.store_path)
    for sha in sorted(images):
        rec = scan_image(images[sha], dbs, rcfg, table=table)
        results_store_append({"kind": "unified_record", "run": run, "status": "OK", **rec.to_json()},
                             cfg.store_path)
    log.info("scan %s: %d records (%d unparsed) -> %s", run, len(index), len(failed), cfg.store_path)
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    index, images, failed = _corpus(cfg)
    registry, policy = cfg.unpackers(), cfg.policy()
    scans = _latest_scan(cfg)
    preds: dict[str, set] = {}
    for sha in images:
        fams = (scans.get(sha) or {}).get("tools", {})
        preds[sha] = {t.get("signature_match") for t in fams.values() if t.get("signature_match")}
    labels, verdicts = derive_oracle_labels({k: images[k].raw for k in sorted(images)}, preds, registry,
                                            policy, workers=cfg.workers)
    for v in verdicts:
        results_store_append(v, cfg.store_path)
    for lab in labels.values():
        results_store_append(lab, cfg.store_path)
    digest = snapshot_digest(labels)
    _write(_oracle_file(cfg), json.dumps({
        "digest": digest, "excluded_unparseable": len(failed), "policy": repr(policy),
        "labels": {k: v.to_json() for k, v in sorted(labels.items())}}, indent=1, sort_keys=True) + "\n")
    log.info("oracle %s: %d labels, %d contract runs", digest, len(labels), len(verdicts))
    print(_oracle_file(cfg))
    return EXIT_OK


def _families(oracle: dict[str, OracleLabel]) -> list[str]:
    return sorted({v.family for v in oracle.values()} - {NOT_PACKED, UNKNOWN_PACKED})


def build_report(cfg: RunConfig, images, oracle: dict[str, OracleLabel], n_failed: int) -> MetricsReport:
    rcfg, table, dbs = cfg.rule_config(), cfg.alias(), cfg.dbs()
    tool_preds = {tool: signature_predictions(images, dbs, profile, table)
                  for tool, profile in SIGNATURE_TOOLS.items()}
    # families a tool names but the oracle never confirms still get rows (all FP)
    predicted = {f for preds in tool_preds.values() for f in preds.values() if f}
    fams = sorted(set(_families(oracle)) | predicted)
    rows = family_report(tool_preds, oracle, fams)
    rows += packedness_report(heuristic_verdicts(images, rcfg), oracle)
    n_unknown = sum(v.family == UNKNOWN_PACKED for v in oracle.values())
    notes = (f"{n_unknown} UNKNOWN_PACKED samples excluded from family rows, counted as packed in 'packed' rows",
             f"{n_failed} unparseable samples excluded")
    return MetricsReport(tuple(rows), n_failed, notes)


def cmd_diagnose(cfg: RunConfig) -> int:
    oracle, digest = _load_oracle(cfg)
    _, images, failed = _corpus(cfg)
    images = {k: v for k, v in images.items() if k in oracle}
    if images.keys() != oracle.keys():
        raise OrderingError("corpus changed since the oracle run; rerun 'packval oracle'")
    report = build_report(cfg, images, oracle, len(failed))
    rcfg = cfg.rule_config()
    policy = SIGNATURE_TOOLS[cfg.target_tool]
    sig_scores = []
    for db in cfg.dbs():
        sig_scores += score_signatures(db, signature_match_log(db, images, policy), oracle, cfg.alias())
    profiles = profile_rules(rule_log(images, rcfg), oracle)
    results_store_append(report, cfg.store_path)
    for s in sig_scores:
        results_store_append(s, cfg.store_path)
    for p in profiles:
        results_store_append(p, cfg.store_path)
    out = {"oracle_digest": digest, "report": report.to_json(),
           "signature_scores": [s.to_json() for s in sig_scores],
           "rule_profiles": [p.to_json() for p in profiles]}
    path = _write(cfg.out_dir / "diagnose.json", json.dumps(out, indent=1, sort_keys=True) + "\n")
    print(path)
    return EXIT_OK


def _check_diagnose_fresh(cfg: RunConfig, digest: str) -> None:
    p = cfg.out_dir / "diagnose.json"
    if p.exists() and json.loads(p.read_text()).get("oracle_digest") != digest:
        raise OrderingError("diagnose.json was computed against a different oracle; rerun 'packval diagnose'")


def cmd_repair(cfg: RunConfig, kind: str) -> int:
    oracle, digest = _load_oracle(cfg)
    _check_diagnose_fresh(cfg, digest)
    _, images, _ = _corpus(cfg)
    images = {k: v for k, v in images.items() if k in oracle}
    table, th = cfg.alias(), cfg.thresholds()
    fams = _families(oracle)
    rdir = cfg.out_dir / "repair"
    summary: dict[str, Any] = {"kind": f"repair_{kind}", "oracle_digest": digest}
    if kind == "signature":
        policy = SIGNATURE_TOOLS[cfg.target_tool]
        dbs = cfg.dbs()
        donors = [(d, score_signatures(d, signature_match_log(d, images, policy), oracle, table))
                  for d in cfg.donors()]
        fixed_dbs = []
        for db in dbs:
            scores = score_signatures(db, signature_match_log(db, images, policy), oracle, table)
            plan = plan_signature_fix(db, scores, donors, oracle, th)
            fixed = apply_signature_fix(db, plan)
            fixed_dbs.append(fixed)
            _write(rdir / f"{db.name}.plan.json", plan.dumps())
            _write(rdir / f"{db.name}.repaired.txt", serialize_signature_db(fixed))
            results_store_append(plan, cfg.store_path)
        before = signature_predictions(images, dbs, policy, table)
        after = signature_predictions(images, fixed_dbs, policy, table)
        summary["recall"] = {f: [round(score_family(before, oracle, f).recall, 1),
                                 round(score_family(after, oracle, f).recall, 1)] for f in fams}
    elif kind == "heuristic":
        profiles = {p.rule: p for p in profile_rules(rule_log(images, cfg.rule_config()), oracle)}
        groups = _families(oracle) + ([UNKNOWN_PACKED] if any(v.family == UNKNOWN_PACKED for v in oracle.values()) else [])
        summary["tools"] = {}
        for tool, rs in TOOL_HEURISTICS.items():
            fixed = plan_heuristic_fix(rs, profiles, groups, th)
            plan = heuristic_plan(rs, fixed, profiles, oracle)
            results_store_append(plan, cfg.store_path)
            b, a = profile_ruleset(rs, profiles, oracle), profile_ruleset(fixed, profiles, oracle)
            summary["tools"][tool] = {"ruleset": fixed.to_json(), "plan": plan.to_json(),
                                      "recall": [round(b.metrics.recall, 1), round(a.metrics.recall, 1)],
                                      "precision": [round(b.metrics.precision, 1), round(a.metrics.precision, 1)]}
    elif kind == "unpacker":
        policy = SIGNATURE_TOOLS[cfg.target_tool]
        preds = signature_predictions(images, cfg.dbs(), policy, table)
        summary["modules"] = {}
        for spec in cfg.unpackers():
            if spec.kind is UnpackerKind.GENERIC or spec.families[0] not in MOCK_FAMILIES:
                continue
            module = build_unpacker_detector(spec, mock_extraction(spec.families[0]))
            attached = attach_family(preds, module, images)
            fam = module.family
            summary["modules"][module.id] = {
                "module": module.to_json(),
                "recall": [round(score_family(preds, oracle, fam).recall, 1),
                           round(score_family(attached, oracle, fam).recall, 1)]}
    else:
        raise ConfigError(f"unknown repair kind {kind!r}")
    path = _write(rdir / f"{kind}.summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(path)
    return EXIT_OK


def cmd_report(cfg: RunConfig, fmt: str = "json") -> int:
    oracle, _ = _load_oracle(cfg)
    _, images, failed = _corpus(cfg)
    images = {k: v for k, v in images.items() if k in oracle}
    report = build_report(cfg, images, oracle, len(failed))
    text = report.dumps(fmt)
    _write(cfg.out_dir / f"report.{fmt}", text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--corpus", help="directory of samples")
    common.add_argument("--registry", help="unpacker registry file")
    common.add_argument("--out", dest="out_dir", help="run directory for state and outputs")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--seed", type=int, help="seed for anything random")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="packval", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"packval {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--spec", default="MOCKX=50,MOCKR=50,MOCKN=50,unpacked=50")
    sub.add_parser("scan", parents=[common], help="run every emulated tool and store unified records")
    sub.add_parser("oracle", parents=[common], help="derive unpacking-validated labels")
    sub.add_parser("diagnose", parents=[common], help="score tools, signatures and rules")
    r = sub.add_parser("repair", parents=[common], help="plan and apply a fix")
    r.add_argument("--kind", choices=("signature", "heuristic", "unpacker"), default="signature")
    rp = sub.add_parser("report", parents=[common], help="emit the metrics table")
    rp.add_argument("--format", choices=("json", "csv"), default="json")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in ("corpus", "registry", "out_dir", "workers", "seed")}
    try:
        if args.command == "gen":
            cfg = load_config(args.config, overrides)
            return cmd_gen(args.spec, cfg.seed, cfg.corpus or cfg.out_dir)
        cfg = load_config(args.config, overrides).check()
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        cfg.store_path.parent.mkdir(parents=True, exist_ok=True)
        if args.command == "scan":
            return cmd_scan(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        if args.command == "diagnose":
            return cmd_diagnose(cfg)
        if args.command == "repair":
            return cmd_repair(cfg, args.kind)
        return cmd_report(cfg, args.format)
    except (ConfigError, BadRegistry, EmptyDb, IoError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (OrderingError, OracleMismatch, StalePlan) as exc:
        log.error("%s", exc)
        return EXIT_STALE
    except Exception:  # noqa: BLE001
        log.exception("internal failure")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
