from __future__ import annotations

import os
import shlex
import sys

import numpy as np
import pefile
import pytest

from oracles import histogram_entropy
from packval.corpus import random_base_pe
from packval.mock import generic_unpack, mock_pack
from packval.oracle import (
    NOT_PACKED,
    UNKNOWN_PACKED,
    BadRegistry,
    OracleLabel,
    Outcome,
    Provenance,
    UnpackerKind,
    ValidationPolicy,
    default_registry,
    derive_oracle_label,
    derive_oracle_labels,
    load_registry,
    oracle_digest,
    run_contract,
    validate_unpacked,
)
from packval.pe import parse_pe

PY = shlex.quote(sys.executable)
REG = default_registry(include_upx=False)


@pytest.fixture(scope="module")
def samples():
    base = random_base_pe(np.random.default_rng(11))
    return {"base": base, **{f: mock_pack(base, f, 3) for f in ("MOCKX", "MOCKR", "MOCKN")}}


def test_default_registry():
    by_id = {u.id: u for u in REG}
    assert by_id["mockx-unpacker"].kind is UnpackerKind.MOCK and by_id["mockx-unpacker"].families == ("MOCKX",)
    assert by_id["mock-generic"].kind is UnpackerKind.GENERIC and by_id["mock-generic"].families == ()
    assert {u.id for u in default_registry(include_upx=True)} - set(by_id) == {"upx"}


def test_registry_errors():
    ok = "a | MOCK | MOCKX | mock:MOCKX | 5\n"
    assert len(load_registry(ok)) == 1
    for bad in (ok + ok,
                "a | WEIRD | MOCKX | mock:MOCKX\n",
                "a | GENERIC | MOCKX | mock:generic\n",
                "a | CUSTOM |  | tool {in} {out}\n",
                "a | CUSTOM | UPX | upx -d {in}\n",
                "a | MOCK | MOCKX | mock:nope\n",
                "a | MOCK | MOCKX | mock:MOCKX | -1\n",
                "just one field\n"):
        with pytest.raises(BadRegistry):
            load_registry(bad)


def test_upx_template_expansion():
    (spec,) = load_registry("upx | CUSTOM | upx | upx -d {in} -o {out} | 60\n")
    assert spec.families == ("UPX",) and spec.timeout == 60
    assert spec.argv("/s/in.bin", "/s/out.bin") == ["upx", "-d", "/s/in.bin", "-o", "/s/out.bin"]
    (inner,) = load_registry("t | CUSTOM | UPX | tool --input={in} --output={out}\n")
    assert inner.argv("a", "b") == ["tool", "--input=a", "--output=b"]


def test_contract_outcomes(samples):
    packed = samples["MOCKX"]
    v = run_contract(packed, "MOCKX", REG)
    assert v.outcome is Outcome.CONFIRMED and v.unpacker_id == "mockx-unpacker" and v.validation.passed
    assert run_contract(packed, "MOCKR", REG).outcome is Outcome.VIOLATED
    assert run_contract(packed, "ASPack", REG).outcome is Outcome.NO_UNPACKER
    assert run_contract(samples["base"], "MOCKX", REG).outcome is Outcome.VIOLATED


def _proc_registry(command: str, timeout: float = 30) -> list:
    return load_registry(f"p | CUSTOM | MOCKX | {command} | {timeout}\n")


def test_child_process_contract(samples):
    packed = samples["MOCKX"]
    reg = _proc_registry(f"{PY} -m packval.mock_unpacker MOCKX {{in}} {{out}}")
    assert run_contract(packed, "MOCKX", reg).outcome is Outcome.CONFIRMED
    crash = run_contract(samples["MOCKR"], "MOCKX", reg)
    assert crash.outcome is Outcome.CRASH and "exit status 1" in crash.detail


def test_child_process_timeout_and_missing_output(samples):
    slow = _proc_registry(f"{PY} -c 'import time; time.sleep(10)' {{in}} {{out}}", 0.5)
    assert run_contract(samples["MOCKX"], "MOCKX", slow).outcome is Outcome.TIMEOUT
    silent = _proc_registry(f"{PY} -c pass {{in}} {{out}}")
    v = run_contract(samples["MOCKX"], "MOCKX", silent)
    assert v.outcome is Outcome.CRASH and "no output" in v.detail
    missing = _proc_registry("/nonexistent/unpacker {in} {out}")
    assert run_contract(samples["MOCKX"], "MOCKX", missing).outcome is Outcome.CRASH


def test_scratch_isolation(samples, tmp_path, monkeypatch):
    import tempfile
    from packval.oracle import run_unpacker

    monkeypatch.setattr(tempfile, "tempdir", str(tmp_path))
    script = "import os,sys; open(sys.argv[2],'w').write(os.getcwd())"
    (spec,) = _proc_registry(f"{PY} -c {shlex.quote(script)} {{in}} {{out}}")
    img = parse_pe(samples["MOCKX"])
    run_unpacker(spec, samples["MOCKX"], img, ValidationPolicy())
    assert os.listdir(tmp_path) == []
    run_unpacker(spec, samples["MOCKX"], img, ValidationPolicy(), keep_scratch=True)
    run_unpacker(spec, samples["MOCKX"], img, ValidationPolicy(), keep_scratch=True)
    dirs = sorted(os.listdir(tmp_path))
    assert len(dirs) == 2
    for d in dirs:
        assert (tmp_path / d / "unpacked.bin").read_text() == str(tmp_path / d)


def test_validation_examples(samples):
    packed = samples["MOCKX"]
    img = parse_pe(packed)
    assert validate_unpacked(img, samples["base"]).passed
    copy = validate_unpacked(img, packed)
    assert not copy.passed and not copy.checks["entropy_drop"] and not copy.checks["import_growth"]
    noise = validate_unpacked(img, np.random.default_rng(0).integers(0, 256, len(packed), dtype=np.uint8).tobytes())
    assert not noise.passed and not noise.checks["valid_pe"]


def test_policy_quorum():
    with pytest.raises(ValueError):
        ValidationPolicy(min_any=3)
    with pytest.raises(ValueError):
        ValidationPolicy(required=("bogus",))
    assert "valid_pe" in ValidationPolicy(required=("size_ratio",)).required


def test_recovered_payloads_pass_on_corpus(corpus):
    # deltas measured with the independent entropy oracle and pefile; the RLE
    # family compresses without randomizing, so its entropy drop is not
    # guaranteed and import growth carries the quorum
    _, manifest, images = corpus
    for sid, fam in manifest.samples.items():
        if fam == NOT_PACKED:
            continue
        raw = images[sid].raw
        rec = generic_unpack(raw)
        if fam != "MOCKR":
            assert histogram_entropy(raw) - histogram_entropy(rec) >= 0.5
        n_before = sum(len(e.imports) for e in pefile.PE(data=raw).DIRECTORY_ENTRY_IMPORT)
        n_after = sum(len(e.imports) for e in pefile.PE(data=rec).DIRECTORY_ENTRY_IMPORT)
        assert n_after > n_before
        assert validate_unpacked(images[sid], rec).passed


def test_label_guided_and_exhaustive(samples):
    packed = samples["MOCKX"]
    lab = derive_oracle_label(packed, {"MOCKX"}, REG)
    assert (lab.family, lab.provenance, lab.confirming_unpacker) == ("MOCKX", Provenance.LABEL_GUIDED, "mockx-unpacker")
    verdicts = []
    lab = derive_oracle_label(packed, {"UPX", "ASPack"}, REG, verdicts=verdicts)
    assert (lab.family, lab.provenance) == ("MOCKX", Provenance.EXHAUSTIVE)
    assert [v.outcome for v in verdicts[:2]] == [Outcome.NO_UNPACKER, Outcome.NO_UNPACKER]


def test_phase_two_skips_tried_unpackers(samples):
    verdicts = []
    lab = derive_oracle_label(samples["MOCKX"], {"MOCKR"}, REG, verdicts=verdicts)
    assert lab.confirming_unpacker == "mockx-unpacker" and lab.provenance is Provenance.EXHAUSTIVE
    assert [v.unpacker_id for v in verdicts] == ["mockr-unpacker", "mockx-unpacker"]


def test_unknown_packed_and_not_packed(samples):
    lab = derive_oracle_label(samples["MOCKN"], set(), REG)
    assert lab.family == UNKNOWN_PACKED and lab.confirming_unpacker is None
    assert lab.generic_unpacker == "mock-generic" and lab.packed
    base = derive_oracle_label(samples["base"], {None, "UNKNOWN"}, REG)
    assert base.family == NOT_PACKED and not base.packed
    with pytest.raises(ValueError):
        OracleLabel("x", UNKNOWN_PACKED, Provenance.EXHAUSTIVE, "u")


def test_budget(samples):
    verdicts = []
    lab = derive_oracle_label(samples["MOCKX"], {"MOCKR"}, REG, budget=1, verdicts=verdicts)
    assert lab.family == NOT_PACKED and len(verdicts) == 1


def test_label_json_and_digest(samples):
    lab = derive_oracle_label(samples["MOCKN"], set(), REG)
    assert OracleLabel.from_json(lab.to_json()) == lab
    a = {"s1": lab, "s2": OracleLabel("s2", NOT_PACKED, Provenance.EXHAUSTIVE)}
    assert oracle_digest(a) == oracle_digest(dict(reversed(list(a.items()))))
    assert oracle_digest(a) != oracle_digest({"s1": lab})


def test_parallel_matches_serial(corpus):
    _, _, images = corpus
    subset = {sid: img.raw for sid, img in list(images.items())[:24]}
    serial, _ = derive_oracle_labels(subset, {}, REG)
    parallel, _ = derive_oracle_labels(subset, {}, REG, workers=2)
    assert serial == parallel and list(parallel) == list(subset)


def test_oracle_reproduces_manifest(corpus, oracle):
    _, manifest, _ = corpus
    for sid, planted in manifest.samples.items():
        want = UNKNOWN_PACKED if planted == "MOCKN" else planted
        assert oracle[sid].family == want


def test_contract_asymmetry_on_corpus(corpus):
    _, _, images = corpus
    preds = {sid: {"MOCKX", "MOCKR"} for sid in images}
    _, verdicts = derive_oracle_labels({k: v.raw for k, v in images.items()}, preds, REG)
    outcomes = {v.outcome for v in verdicts}
    assert {Outcome.CONFIRMED, Outcome.VIOLATED} <= outcomes
    for v in verdicts:
        if v.outcome is Outcome.CONFIRMED:
            assert v.validation.passed
        if v.outcome is Outcome.VIOLATED:
            assert v.validation is not None and not v.validation.passed


def test_mock_reruns_identical(samples):
    a = derive_oracle_label(samples["MOCKR"], {"MOCKR"}, REG)
    b = derive_oracle_label(samples["MOCKR"], {"MOCKR"}, REG)
    assert a == b
