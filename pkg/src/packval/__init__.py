"""Validate packer-identification tools against unpacking-checked labels."""

from __future__ import annotations

__version__ = "0.1.0"

from .pe import PeImage, build_minimal_pe, entry_point_context, overlay_range, parse_pe
from .entropy import EntropyConfig, bintropy_decide, block_entropies, reminder_decide, shannon_entropy
from .signatures import Scope, Signature, SignatureDb, match_signatures, parse_signature_db, serialize_signature_db
from .normalize import canonicalize_label, unify
from .oracle import derive_oracle_label, run_contract, validate_unpacked
from .corpus import generate_corpus, ingest, results_store_append

__all__ = [
    "PeImage", "build_minimal_pe", "entry_point_context", "overlay_range", "parse_pe",
    "EntropyConfig", "bintropy_decide", "block_entropies", "reminder_decide", "shannon_entropy",
    "Scope", "Signature", "SignatureDb", "match_signatures", "parse_signature_db", "serialize_signature_db",
    "canonicalize_label", "unify",
    "derive_oracle_label", "run_contract", "validate_unpacked",
    "generate_corpus", "ingest", "results_store_append",
]
