from __future__ import annotations

from importlib import resources

import pytest

from casegen import planted_fault_db
from packval.diagnostics import (
    RuleProfile,
    SigRef,
    profile_rules,
    profile_ruleset,
    score_family,
    score_signatures,
)
from packval.oracle import default_registry
from packval.pipeline import rule_log, signature_match_log, signature_predictions
from packval.repair import (
    EmptyModule,
    FixKind,
    FixThresholds,
    OracleMismatch,
    RepairPlan,
    StalePlan,
    apply_signature_fix,
    attach_family,
    attach_packedness,
    build_unpacker_detector,
    heuristic_plan,
    mock_extraction,
    plan_heuristic_fix,
    plan_signature_fix,
)
from packval.rules import TOOL_HEURISTICS, RuleConfig, RuleId, RuleSet
from packval.signatures import Signature, load_signature_db, parse_signature_db, serialize_signature_db

FAMILIES = ("MOCKX", "MOCKR")


def donor_db():
    with resources.as_file(resources.files("packval.data").joinpath("donor_userdb.txt")) as p:
        return load_signature_db(p, "donor")


def scores(db, images, oracle, policy="peid"):
    return score_signatures(db, signature_match_log(db, images, policy), oracle)


def test_thresholds():
    th = FixThresholds()
    assert (th.faulty_accuracy_max, th.min_support, th.donor_accuracy_min, th.target_family_recall_min) == \
        (0.1, 3, 0.9, 50.0)
    assert FixThresholds.from_mapping({"min_support": 5, "other": 1}).min_support == 5
    with pytest.raises(ValueError):
        FixThresholds(faulty_accuracy_max=2)


def test_planted_fault_plan_and_apply(corpus, oracle):
    _, _, images = corpus
    target, donor = planted_fault_db(), donor_db()
    before = signature_predictions(images, [target], "peid")
    assert score_family(before, oracle, "MOCKX").recall == 0.0
    plan = plan_signature_fix(target, scores(target, images, oracle), [(donor, scores(donor, images, oracle))], oracle)
    assert [r.label for r in plan.removals] == ["ASPack v2.12 (planted)"]
    assert [s.label for s in plan.additions] == ["MOCKX v1.0 stub"]
    assert plan.rationale[0]["accuracy"] == 0.0 and plan.rationale[0]["matches"] >= 5
    fixed = apply_signature_fix(target, plan)
    assert len(fixed) == len(target) - 1 + 1
    after = signature_predictions(images, [fixed], "peid")
    for fam in FAMILIES:
        assert score_family(after, oracle, fam).recall >= 95.0
    th = FixThresholds()
    for sc in scores(fixed, images, oracle):
        assert not (sc.matches >= th.min_support and sc.accuracy is not None and sc.accuracy <= th.faulty_accuracy_max)
    assert serialize_signature_db(target) == serialize_signature_db(planted_fault_db())


def test_healthy_target_gets_empty_plan(corpus, oracle):
    _, _, images = corpus
    donor = donor_db()
    plan = plan_signature_fix(donor, scores(donor, images, oracle), [(donor, scores(donor, images, oracle))], oracle)
    assert plan.empty
    assert serialize_signature_db(apply_signature_fix(donor, plan)) == serialize_signature_db(donor)


def test_donor_duplicates_added_once(corpus, oracle):
    _, _, images = corpus
    target, donor = planted_fault_db(), donor_db()
    ds = scores(donor, images, oracle)
    plan = plan_signature_fix(target, scores(target, images, oracle), [(donor, ds), (donor, ds)], oracle)
    assert len({s.digest for s in plan.additions}) == len(plan.additions) == 1


def test_oracle_mismatch(corpus, oracle):
    _, _, images = corpus
    target = planted_fault_db()
    shifted = dict(oracle)
    first = next(iter(shifted))
    shifted[first] = "NOT_PACKED" if oracle[first].family != "NOT_PACKED" else "MOCKX"
    with pytest.raises(OracleMismatch):
        plan_signature_fix(target, scores(target, images, oracle), [], shifted)


def _db(n):
    return parse_signature_db("".join(f"[S{i}]\nsignature = {i + 1:02X}\n" for i in range(n)), "t")


def test_apply_accounting_and_staleness():
    db = _db(4)
    adds = (Signature.from_hex("A1", "AA"), Signature.from_hex("A2", "BB"))
    plan = RepairPlan(FixKind.SIGNATURE_FIX, "t", (SigRef.of(db, db.entries[1]),), adds,
                      ({"action": "remove"}, {"action": "add"}, {"action": "add"}))
    once = apply_signature_fix(db, plan)
    assert len(once) == 4 - 1 + 2 and [s.label for s in once.entries] == ["S0", "S2", "S3", "A1", "A2"]
    assert len(db) == 4
    with pytest.raises(StalePlan):
        apply_signature_fix(once, plan)
    assert apply_signature_fix(once, plan, idempotent=True) == once
    with pytest.raises(StalePlan):
        apply_signature_fix(parse_signature_db("[x]\nsignature = 01\n", "other"), plan)


def test_plan_validation_and_json():
    db = _db(2)
    with pytest.raises(ValueError):
        RepairPlan(FixKind.SIGNATURE_FIX, "t", (SigRef.of(db, db.entries[0]),), (), ())
    with pytest.raises(ValueError):
        RepairPlan(FixKind.SIGNATURE_FIX, "elsewhere", (SigRef.of(db, db.entries[0]),), (), ({},))
    plan = RepairPlan(FixKind.SIGNATURE_FIX, "t", (SigRef.of(db, db.entries[0]),),
                      (Signature.from_hex("A", "AA ?? BB", False),), ({"a": 1}, {"b": 2}), "d1")
    assert RepairPlan.from_json(plan.to_json()) == plan
    rplan = RepairPlan(FixKind.HEURISTIC_FIX, "r", (), (RuleId("qu1cksc0pe", "HasOverlay"),), ({},))
    assert RepairPlan.from_json(rplan.to_json()) == rplan


def _profile(rule, per, fired):
    from packval.diagnostics import Metrics
    return RuleProfile(rule, per, Metrics(0, 0, 0, 0), fired)


def test_heuristic_fix_examples():
    per_full = {"F": {"count": 2, "fired": 2, "recall": 100.0}}
    per_none = {"F": {"count": 2, "fired": 0, "recall": 0.0}}
    profiles = {"a.good": _profile("a.good", per_full, {"F": frozenset({"s1", "s2"})}),
                "b.blind": _profile("b.blind", per_none, {"F": frozenset()}),
                "c.other": _profile("c.other", per_full, {"F": frozenset({"s1", "s2"})})}
    healthy = RuleSet((RuleId.parse("a.good"),), name="h")
    assert plan_heuristic_fix(healthy, profiles, ["F"]) == healthy
    blind = RuleSet((RuleId.parse("b.blind"),), name="b")
    fixed = plan_heuristic_fix(blind, profiles, ["F"])
    assert fixed.members == (RuleId.parse("b.blind"), RuleId.parse("a.good"), RuleId.parse("c.other"))
    with pytest.raises(ValueError):
        from packval.rules import Combiner
        plan_heuristic_fix(RuleSet(blind.members, Combiner.ALL), profiles, ["F"])


def test_heuristic_fix_monotone_on_corpus(corpus, oracle):
    _, _, images = corpus
    profiles = {p.rule: p for p in profile_rules(rule_log(images, RuleConfig()), oracle)}
    fams = ["MOCKX", "MOCKR", "UNKNOWN_PACKED"]
    for tool, rs in TOOL_HEURISTICS.items():
        fixed = plan_heuristic_fix(rs, profiles, fams)
        assert fixed.members[:len(rs.members)] == rs.members
        pre, post = profile_ruleset(rs, profiles, oracle), profile_ruleset(fixed, profiles, oracle)
        for fam in pre.per_family:
            assert post.recall(fam) >= pre.recall(fam)
        plan = heuristic_plan(rs, fixed, profiles, oracle)
        assert len(plan.additions) == len(fixed.members) - len(rs.members)


def test_empty_module():
    (spec,) = [u for u in default_registry(False) if u.id == "mockx-unpacker"]
    with pytest.raises(EmptyModule):
        build_unpacker_detector(spec, ([], []), register=False)
    (generic,) = [u for u in default_registry(False) if u.id == "mock-generic"]
    with pytest.raises(ValueError):
        build_unpacker_detector(generic, mock_extraction("MOCKX"))


def test_mockx_module_lifts_recall(corpus, oracle):
    _, _, images = corpus
    (spec,) = [u for u in default_registry(False) if u.id == "mockx-unpacker"]
    module = build_unpacker_detector(spec, mock_extraction("MOCKX"), register=False)
    target = planted_fault_db()
    for tool in ("peid", "readpe", "app-peid", "pypackerdetect"):
        before = signature_predictions(images, [target], tool)
        after = attach_family(before, module, images)
        assert score_family(after, oracle, "MOCKX").recall == 100.0
        for fam in ("MOCKX", "MOCKR", "ASPack"):
            assert score_family(after, oracle, fam).recall >= score_family(before, oracle, fam).recall
    verdicts = {sid: False for sid in images}
    lifted = attach_packedness(verdicts, module, images)
    assert {sid for sid, v in lifted.items() if v} == {sid for sid, lab in oracle.items() if lab.family == "MOCKX"}
