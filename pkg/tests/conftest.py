from __future__ import annotations

import pytest

from packval.corpus import generate_corpus, ingest
from packval.oracle import default_registry, derive_oracle_label
from packval.pipeline import load_images

CORPUS_SPEC = {"MOCKX": 50, "MOCKR": 50, "MOCKN": 50, "unpacked": 50}
CORPUS_SEED = 20240611


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """The standard 200-sample mock corpus, generated once per session."""
    out, manifest = generate_corpus(CORPUS_SPEC, CORPUS_SEED, tmp_path_factory.mktemp("corpus"))
    images, failed = load_images(ingest(out))
    assert not failed
    return out, manifest, images


@pytest.fixture(scope="session")
def oracle(corpus):
    _, _, images = corpus
    reg = default_registry(include_upx=False)
    return {sid: derive_oracle_label(img.raw, set(), reg) for sid, img in images.items()}


def pytest_terminal_summary(terminalreporter):
    from casegen import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, desc, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {desc} ({detail})")
