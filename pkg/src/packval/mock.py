"""Mock packer families with exact inverse unpackers.

Each family wraps a whole PE file into a new PE whose entry-point section
starts with a family stub, followed by a payload header and the transformed
original:

    stub (48 bytes) | magic (4) | length (4) | crc32 (4) | key (8) | payload

MOCKX xors with a keyed stream, MOCKR run-length encodes, MOCKN adds a keyed
stream and has no family-specific unpacker (only the generic one handles it).
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .pe import (
    BuildSpec,
    CANONICAL_DOS_MESSAGE,
    PeError,
    SectionSpec,
    build_minimal_pe,
    entry_point_context,
    parse_pe,
)

STUB_SIZE = 48
HEADER = struct.Struct("<4sIIQ")
LOADER_IMPORTS = (("kernel32.dll", ("LoadLibraryA", "GetProcAddress", "VirtualProtect")),)


class WrongFamily(ValueError):
    """The input does not carry this family's stub or payload."""


class InputNotPe(ValueError):
    pass


@dataclass(frozen=True)
class MockFamily:
    id: str
    stub_prefix: bytes
    stub_suffix: bytes
    marker: bytes
    magic: bytes
    section_names: tuple[str, ...]
    has_unpacker: bool
    dos_message: bytes = CANONICAL_DOS_MESSAGE + b".\r\r\n$"
    overlay: bool = False

    def stub(self, key: int, length: int) -> bytes:
        s = (self.stub_prefix + struct.pack("<I", key & 0xFFFFFFFF) + b"\xb9"
             + struct.pack("<I", length) + self.stub_suffix + self.marker)
        return s.ljust(STUB_SIZE, b"\x90")

    @property
    def signature_text(self) -> str:
        """userdb pattern of the stub with the two variable fields wildcarded."""
        def hx(b: bytes) -> list[str]:
            return [f"{x:02X}" for x in b]
        toks = hx(self.stub_prefix) + ["??"] * 4 + ["B9"] + ["??"] * 4 + hx(self.stub_suffix)
        return " ".join(toks)


MOCKX = MockFamily(
    "MOCKX", bytes.fromhex("60e8000000005d81ed"), bytes.fromhex("8db530000000ffe6"),
    b"MOCKX!", b"MXPK", ("MX0", "MX1"), True, overlay=True)
MOCKR = MockFamily(
    "MOCKR", bytes.fromhex("558bec83c4f0b8"), bytes.fromhex("e8000000005e56c3"),
    b"MOCKR!", b"MRPK", (".mrle", ".mrdat"), True)
MOCKN = MockFamily(
    "MOCKN", bytes.fromhex("eb064e58535455429c60be"), bytes.fromhex("31c9fcf3a49d"),
    b"MNX~", b"MNPK", (".mnx0", ".mnx1", ".mnxi"), False,
    dos_message=b"Packed by MNX - requires Win32.\r\n$")

FAMILIES: dict[str, MockFamily] = {f.id: f for f in (MOCKX, MOCKR, MOCKN)}


def _keystream(key: int, n: int, salt: int) -> np.ndarray:
    rng = np.random.default_rng([key, salt])
    return rng.integers(0, 256, n, dtype=np.uint8)


def rle_encode(data: bytes) -> bytes:
    """PackBits-style: 0..127 -> literal run of c+1 bytes, 128..255 -> repeat next byte c-125 times."""
    out = bytearray()
    i, n = 0, len(data)
    lit = bytearray()

    def flush() -> None:
        for j in range(0, len(lit), 128):
            chunk = lit[j:j + 128]
            out.append(len(chunk) - 1)
            out.extend(chunk)
        lit.clear()

    while i < n:
        b = data[i]
        run = 1
        while i + run < n and run < 130 and data[i + run] == b:
            run += 1
        if run >= 3:
            flush()
            out.append(run + 125)
            out.append(b)
            i += run
        else:
            lit.extend(data[i:i + run])
            i += run
    flush()
    return bytes(out)


def rle_decode(data: bytes, limit: int | None = None) -> bytes:
    """Inverse of :func:`rle_encode`; stops once ``limit`` bytes are produced."""
    out = bytearray()
    i, n = 0, len(data)
    while i < n and (limit is None or len(out) < limit):
        c = data[i]
        if c < 128:
            if i + 1 + c + 1 > n:
                raise WrongFamily("truncated literal run")
            out += data[i + 1:i + 2 + c]
            i += c + 2
        else:
            if i + 1 >= n:
                raise WrongFamily("truncated repeat run")
            out += bytes([data[i + 1]]) * (c - 125)
            i += 2
    return bytes(out)


def _transform(fam: MockFamily, data: bytes, key: int) -> bytes:
    if fam.id == "MOCKX":
        ks = _keystream(key, len(data), 0x58)
        return (np.frombuffer(data, np.uint8) ^ ks).tobytes()
    if fam.id == "MOCKR":
        return rle_encode(data)
    ks = _keystream(key, len(data), 0x4E)
    return ((np.frombuffer(data, np.uint8).astype(np.uint16) + ks) % 256).astype(np.uint8).tobytes()


def _invert(fam: MockFamily, payload: bytes, key: int, limit: int) -> bytes:
    if fam.id == "MOCKX":
        ks = _keystream(key, len(payload), 0x58)
        return (np.frombuffer(payload, np.uint8) ^ ks).tobytes()
    if fam.id == "MOCKR":
        return rle_decode(payload, limit)
    ks = _keystream(key, len(payload), 0x4E)
    return ((np.frombuffer(payload, np.uint8).astype(np.int16) - ks) % 256).astype(np.uint8).tobytes()


def mock_pack(pe: bytes, family: MockFamily | str, seed: int = 0) -> bytes:
    """Pack a PE file with a mock family. Deterministic per (input, family, seed)."""
    fam = FAMILIES[family] if isinstance(family, str) else family
    try:
        parse_pe(pe)
    except PeError as exc:
        raise InputNotPe(str(exc)) from None
    key = int.from_bytes(hashlib.sha256(struct.pack("<Q", seed & (2**64 - 1)) + fam.magic + pe).digest()[:8], "little")
    payload = _transform(fam, pe, key)
    header = HEADER.pack(fam.magic, len(pe), zlib.crc32(pe), key)
    body = fam.stub(key, len(pe)) + header + payload
    reserve = (len(pe) + 0xFFF) & ~0xFFF

    if fam.id == "MOCKX":
        sections = (
            SectionSpec(fam.section_names[0], b"", True, True, True, virtual_size=reserve),
            SectionSpec(fam.section_names[1], body, True, True, True),
        )
        entry, imp = 1, 1
    elif fam.id == "MOCKR":
        sections = (
            SectionSpec(fam.section_names[0], body, True, True, True),
            SectionSpec(fam.section_names[1], b"", True, True, False),
        )
        entry, imp = 0, 1
    else:
        sections = (
            SectionSpec(fam.section_names[0], b"", True, True, True, virtual_size=reserve),
            SectionSpec(fam.section_names[1], body, True, True, True),
            SectionSpec(fam.section_names[2], b"", True, False, False),
        )
        entry, imp = 1, 2
    arch = parse_pe(pe).arch
    overlay = b""
    if fam.overlay:
        overlay = b"MXOV" + hashlib.sha256(pe).digest()
    spec = BuildSpec(sections=sections, arch=arch, entry_section=entry, imports=LOADER_IMPORTS,
                     import_section=imp, dos_message=fam.dos_message, rich_header=False,
                     overlay=overlay)
    return build_minimal_pe(spec)


def _extract(packed: bytes, fam: MockFamily) -> bytes:
    try:
        img = parse_pe(packed)
    except PeError as exc:
        raise WrongFamily(f"not a PE: {exc}") from None
    ctx = entry_point_context(img, STUB_SIZE)
    off = ctx.ep_file_offset
    if off is None or ctx.padding or not ctx.ep_bytes.startswith(fam.stub_prefix) or fam.marker not in ctx.ep_bytes:
        raise WrongFamily(f"{fam.id} stub not found at entry point")
    hdr_at = off + STUB_SIZE
    if hdr_at + HEADER.size > len(packed):
        raise WrongFamily("payload header truncated")
    magic, length, crc, key = HEADER.unpack_from(packed, hdr_at)
    if magic != fam.magic:
        raise WrongFamily(f"payload magic {magic!r} is not {fam.id}")
    s = img.sections[ctx.ep_section]
    body_end = min(s.raw_offset + s.raw_size, len(packed))
    payload = packed[hdr_at + HEADER.size:body_end]
    if fam.id != "MOCKR":
        payload = payload[:length]
    out = _invert(fam, payload, key, length)
    if len(out) != length or zlib.crc32(out) != crc:
        raise WrongFamily("payload checksum mismatch")
    return out


def mock_unpack(packed: bytes, family: MockFamily | str) -> bytes:
    fam = FAMILIES[family] if isinstance(family, str) else family
    if not fam.has_unpacker:
        raise ValueError(f"{fam.id} has no unpacker")
    return _extract(packed, fam)


def generic_unpack(packed: bytes) -> bytes:
    """Stand-in for a generic (dump-based) unpacker: handles every mock family."""
    for fam in FAMILIES.values():
        try:
            return _extract(packed, fam)
        except WrongFamily:
            continue
    raise WrongFamily("no known stub at entry point")


MOCK_UNPACKERS: dict[str, Callable[[bytes], bytes]] = {
    "MOCKX": lambda b: mock_unpack(b, "MOCKX"),
    "MOCKR": lambda b: mock_unpack(b, "MOCKR"),
    "generic": generic_unpack,
}
