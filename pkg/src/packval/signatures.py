"""PEiD userdb signature databases: parsing, canonical serialization, matching."""

from __future__ import annotations

import enum
import functools
import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .pe import PeImage, entry_point_context

log = logging.getLogger(__name__)

MAX_PATTERN = 2048


class Scope(enum.IntEnum):
    # value order is the default priority order
    ENTRY_POINT = 0
    ENTRY_SECTION = 1
    FULL_FILE = 2


class EmptyDb(ValueError):
    pass


@dataclass(frozen=True)
class Signature:
    label: str
    pattern: tuple[Optional[int], ...]
    ep_only: bool = True
    source_db: str = ""

    def __post_init__(self) -> None:
        if not self.pattern or len(self.pattern) > MAX_PATTERN:
            raise ValueError(f"pattern length {len(self.pattern)} outside 1..{MAX_PATTERN}")
        if all(b is None for b in self.pattern):
            raise ValueError("pattern needs at least one concrete byte")

    @classmethod
    def from_hex(cls, label: str, text: str, ep_only: bool = True, source_db: str = "") -> "Signature":
        return cls(label, _parse_pattern(text), ep_only, source_db)

    @property
    def pattern_text(self) -> str:
        return " ".join("??" if b is None else f"{b:02X}" for b in self.pattern)

    @property
    def digest(self) -> str:
        """Short digest of (pattern, ep_only); the identity used for dedup and plan refs."""
        h = hashlib.sha256(f"{self.pattern_text}|{self.ep_only}".encode()).hexdigest()
        return h[:16]

    def matches_at(self, data: bytes, offset: int) -> bool:
        if offset < 0 or offset + len(self.pattern) > len(data):
            return False
        for i, b in enumerate(self.pattern):
            if b is not None and data[offset + i] != b:
                return False
        return True

    def regex(self) -> re.Pattern[bytes]:
        return _compile(self.pattern)


@dataclass(frozen=True)
class SignatureDb:
    name: str
    entries: tuple[Signature, ...]
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def with_entries(self, entries: Iterable[Signature]) -> "SignatureDb":
        return SignatureDb(self.name, tuple(entries))


@dataclass(frozen=True)
class SignatureMatch:
    index: int  # position in the db's entries
    signature: Signature
    scope_hit: Scope
    offset: int


@functools.lru_cache(maxsize=8192)
def _compile(pattern: tuple[Optional[int], ...]) -> re.Pattern[bytes]:
    # lookahead so overlapping occurrences are all reported
    body = b"".join(b"." if b is None else re.escape(bytes([b])) for b in pattern)
    return re.compile(b"(?=" + body + b")", re.DOTALL)


_HEX = re.compile(r"^[0-9A-Fa-f]{2}$")


def _parse_pattern(text: str) -> tuple[Optional[int], ...]:
    out: list[Optional[int]] = []
    for tok in text.split():
        if tok == "??":
            out.append(None)
        elif _HEX.match(tok):
            out.append(int(tok, 16))
        elif "?" in tok and len(tok) == 2:
            raise ValueError(f"nibble wildcard {tok!r} is not supported")
        else:
            raise ValueError(f"bad pattern token {tok!r}")
    return tuple(out)


def parse_signature_db(text: str, name: str = "userdb") -> SignatureDb:
    """Parse PEiD userdb text.

    Malformed entries are skipped and reported in ``SignatureDb.diagnostics``.
    Raises :class:`EmptyDb` when nothing valid remains.
    """
    entries: list[Signature] = []
    diags: list[str] = []
    label: Optional[str] = None
    fields: dict[str, str] = {}

    def flush() -> None:
        nonlocal label, fields
        if label is None:
            return
        sig = fields.get("signature")
        if sig is None:
            diags.append(f"[{label}] skipped: no signature line")
        else:
            ep = fields.get("ep_only", "false").strip().lower()
            try:
                if ep not in ("true", "false"):
                    raise ValueError(f"bad ep_only value {ep!r}")
                entries.append(Signature(label, _parse_pattern(sig), ep == "true", name))
            except ValueError as exc:
                diags.append(f"[{label}] skipped: {exc}")
        label, fields = None, {}

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(";") or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            flush()
            label = line[1:-1]
            continue
        if "=" in line and label is not None:
            key, _, value = line.partition("=")
            key = key.strip().lower()
            if key in ("signature", "ep_only"):
                fields[key] = value.strip()
            else:
                diags.append(f"line {lineno}: unknown key {key!r} ignored")
            continue
        diags.append(f"line {lineno}: unparseable line ignored")
    flush()
    for d in diags:
        log.debug("%s: %s", name, d)
    if not entries:
        raise EmptyDb(f"{name}: no valid signatures ({len(diags)} diagnostics)")
    return SignatureDb(name, tuple(entries), tuple(diags))


def serialize_signature_db(db: SignatureDb) -> str:
    blocks = []
    for s in db.entries:
        blocks.append(f"[{s.label}]\nsignature = {s.pattern_text}\nep_only = {'true' if s.ep_only else 'false'}\n")
    return "\n".join(blocks)


def load_signature_db(path, name: Optional[str] = None) -> SignatureDb:
    from pathlib import Path
    p = Path(path)
    return parse_signature_db(p.read_text(encoding="utf-8", errors="replace"), name or p.stem)


def _scan(sig: Signature, data: bytes, start: int, end: int) -> list[int]:
    window = data[start:end]
    if len(sig.pattern) > len(window):
        return []
    return [m.start() + start for m in sig.regex().finditer(window)]


def match_signatures(db: SignatureDb, img: PeImage,
                     scopes: Iterable[Scope] = tuple(Scope)) -> list[SignatureMatch]:
    scopes = set(scopes)
    if not scopes:
        raise ValueError("at least one scope is required")
    data = img.raw
    ctx = entry_point_context(img)
    section_range = None
    if ctx.ep_section is not None:
        s = img.sections[ctx.ep_section]
        if s.raw_size:
            section_range = (s.raw_offset, min(s.raw_offset + s.raw_size, len(data)))
    out: list[SignatureMatch] = []
    for idx, sig in enumerate(db.entries):
        found: list[SignatureMatch] = []
        if Scope.ENTRY_POINT in scopes and ctx.ep_file_offset is not None:
            if sig.matches_at(data, ctx.ep_file_offset):
                found.append(SignatureMatch(idx, sig, Scope.ENTRY_POINT, ctx.ep_file_offset))
        if not sig.ep_only:
            if Scope.ENTRY_SECTION in scopes and section_range is not None:
                found += [SignatureMatch(idx, sig, Scope.ENTRY_SECTION, o)
                          for o in _scan(sig, data, *section_range)]
            if Scope.FULL_FILE in scopes:
                found += [SignatureMatch(idx, sig, Scope.FULL_FILE, o)
                          for o in _scan(sig, data, 0, len(data))]
        found.sort(key=lambda m: (m.offset, m.scope_hit))
        out += found
    return out


@dataclass(frozen=True)
class ScopePolicy:
    """Scope set and priority of one emulated signature tool."""

    name: str
    scopes: tuple[Scope, ...]


# EP-only for readpe; full three-scope for app-peid.
PROFILES: dict[str, ScopePolicy] = {
    "app-peid": ScopePolicy("app-peid", (Scope.ENTRY_POINT, Scope.ENTRY_SECTION, Scope.FULL_FILE)),
    "peid": ScopePolicy("peid", (Scope.ENTRY_POINT, Scope.ENTRY_SECTION)),
    "readpe": ScopePolicy("readpe", (Scope.ENTRY_POINT,)),
    "pypackerdetect": ScopePolicy("pypackerdetect", (Scope.ENTRY_POINT, Scope.FULL_FILE)),
}


def signature_predict(dbs: Sequence[SignatureDb], img: PeImage,
                      policy: ScopePolicy | str) -> Optional[str]:
    """Raw label of the first match under the policy's scope priority, or None."""
    if isinstance(policy, str):
        policy = PROFILES[policy]
    per_db = [match_signatures(db, img, policy.scopes) for db in dbs]
    for scope in policy.scopes:
        for matches in per_db:
            for m in matches:
                if m.scope_hit == scope:
                    return m.signature.label
    return None
