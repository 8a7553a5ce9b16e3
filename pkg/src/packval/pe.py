"""Portable Executable model: a lenient parser and a minimal image builder.

Mandatory headers (DOS header, PE signature, COFF header, the fixed part of
the optional header and the section table) are parsed strictly. Everything
past them (imports, resources, rich header) is parsed leniently: problems
are recorded in ``PeImage.notes`` instead of raising, because packed
samples are routinely malformed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

DOS_HEADER_SIZE = 0x40
PE_MAGIC = b"PE\x00\x00"
PE32_MAGIC = 0x10B
PE64_MAGIC = 0x20B

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

DIR_IMPORT = 1
DIR_RESOURCE = 2

CANONICAL_DOS_MESSAGE = b"This program cannot be run in DOS mode"

# 16-bit stub: push cs / pop ds / mov dx,0x0e / mov ah,9 / int 21h /
# mov ax,0x4c01 / int 21h, followed by the message it prints.
_DOS_STUB_CODE = bytes.fromhex("0e1fba0e00b409cd21b8014ccd21")

_MAX_IMPORT_DESCRIPTORS = 4096
_MAX_THUNKS = 65536


class PeError(ValueError):
    """Base class for mandatory-header failures."""


class NotPe(PeError):
    """Missing MZ or PE signature, or an unknown optional-header magic."""


class TruncatedHeaders(PeError):
    """The file ends inside the mandatory headers."""


class SpecInvalid(ValueError):
    """A BuildSpec cannot be laid out as requested."""


@dataclass(frozen=True)
class SectionInfo:
    name: str
    virtual_addr: int
    virtual_size: int
    raw_offset: int
    raw_size: int
    characteristics: int
    truncated: bool = False

    @property
    def readable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_READ)

    @property
    def writable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_WRITE)

    @property
    def executable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_EXECUTE)

    @property
    def virtual_end(self) -> int:
        return self.virtual_addr + max(self.virtual_size, self.raw_size)

    def contains_rva(self, rva: int) -> bool:
        return self.virtual_addr <= rva < self.virtual_end


@dataclass(frozen=True)
class PeImage:
    arch: str  # "PE32" or "PE64"
    entry_point_rva: int
    image_size: int
    headers_size: int
    sections: tuple[SectionInfo, ...]
    imports: tuple[tuple[str, int], ...]
    dos_stub_message: bytes
    rich_header_present: bool
    resource_dir: Optional[tuple[int, int]]
    import_dir: Optional[tuple[int, int]]
    raw: bytes = field(repr=False)
    notes: tuple[str, ...] = ()

    @property
    def import_count(self) -> int:
        return sum(n for _, n in self.imports)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    def section_data(self, index: int) -> bytes:
        s = self.sections[index]
        if s.raw_size == 0:
            return b""
        return self.raw[s.raw_offset:s.raw_offset + s.raw_size]

    def rva_to_offset(self, rva: int) -> Optional[int]:
        """Map an RVA to a file offset, or None when it has no file backing."""
        for s in self.sections:
            if s.contains_rva(rva):
                delta = rva - s.virtual_addr
                if delta < s.raw_size:
                    return s.raw_offset + delta
                return None
        if rva < self.headers_size:
            return rva
        return None


@dataclass(frozen=True)
class EpContext:
    ep_section: Optional[int]
    ep_file_offset: Optional[int]
    ep_bytes: bytes
    padding: int = 0


def _cstr(data: bytes, offset: int, limit: int = 256) -> Optional[bytes]:
    if offset < 0 or offset >= len(data):
        return None
    end = data.find(b"\x00", offset, offset + limit)
    if end < 0:
        return None
    return data[offset:end]


def _find_rich(data: bytes, end: int) -> Optional[int]:
    """Return the offset of the decoded ``DanS`` marker, if a rich header exists."""
    pos = data.rfind(b"Rich", DOS_HEADER_SIZE, end)
    if pos < 0 or pos + 8 > len(data):
        return None
    (key,) = struct.unpack_from("<I", data, pos + 4)
    cur = pos - 4
    while cur >= DOS_HEADER_SIZE:
        (v,) = struct.unpack_from("<I", data, cur)
        if v ^ key == 0x536E6144:  # "DanS"
            return cur
        cur -= 4
    return None


def parse_pe(data: bytes) -> PeImage:
    """Parse ``data`` into a :class:`PeImage`.

    Raises :class:`NotPe` or :class:`TruncatedHeaders`; never anything else.
    """
    data = bytes(data)
    if len(data) < 2 or data[:2] != b"MZ":
        raise NotPe("missing MZ signature")
    if len(data) < DOS_HEADER_SIZE + 4:
        raise TruncatedHeaders("file ends inside the DOS header")
    (e_lfanew,) = struct.unpack_from("<I", data, 0x3C)
    if e_lfanew + 24 > len(data):
        raise TruncatedHeaders("file ends before the COFF header is complete")
    if data[e_lfanew:e_lfanew + 4] != PE_MAGIC:
        raise NotPe("missing PE signature")

    (_machine, n_sections, _ts, _symptr, _nsyms, opt_size, _chars) = struct.unpack_from(
        "<HHIIIHH", data, e_lfanew + 4)
    opt = e_lfanew + 24
    if opt + 2 > len(data):
        raise TruncatedHeaders("file ends before the optional header magic")
    (magic,) = struct.unpack_from("<H", data, opt)
    if magic == PE32_MAGIC:
        arch, fixed, ndirs_at = "PE32", 96, 92
    elif magic == PE64_MAGIC:
        arch, fixed, ndirs_at = "PE64", 112, 108
    else:
        raise NotPe(f"unknown optional header magic {magic:#x}")
    if opt + fixed > len(data):
        raise TruncatedHeaders("file ends inside the optional header")

    notes: list[str] = []
    (entry,) = struct.unpack_from("<I", data, opt + 16)
    (image_size, headers_size) = struct.unpack_from("<II", data, opt + 56)
    (n_dirs,) = struct.unpack_from("<I", data, opt + ndirs_at)
    avail = max(0, min(opt_size, len(data) - opt) - fixed) // 8
    n_dirs = min(n_dirs, 16, avail)
    dirs = [struct.unpack_from("<II", data, opt + fixed + 8 * i) for i in range(n_dirs)]
    if opt_size < fixed:
        notes.append("optional header size smaller than its fixed part")

    table = opt + opt_size
    if table + 40 * n_sections > len(data):
        raise TruncatedHeaders("file ends inside the section table")
    sections = []
    for i in range(n_sections):
        raw_name, vsize, va, rsize, roff = struct.unpack_from("<8sIIII", data, table + 40 * i)
        (chars,) = struct.unpack_from("<I", data, table + 40 * i + 36)
        name = raw_name.split(b"\x00", 1)[0].decode("latin-1")
        truncated = rsize > 0 and roff + rsize > len(data)
        if truncated:
            notes.append(f"section {i} ({name}) raw data extends past end of file")
        sections.append(SectionInfo(name, va, vsize, roff, rsize, chars, truncated))

    stub_end = e_lfanew
    rich_at = _find_rich(data, min(e_lfanew, len(data)))
    if rich_at is not None:
        stub_end = rich_at
    stub = data[DOS_HEADER_SIZE:max(DOS_HEADER_SIZE, stub_end)].rstrip(b"\x00")

    img = PeImage(
        arch=arch, entry_point_rva=entry, image_size=image_size,
        headers_size=headers_size, sections=tuple(sections), imports=(),
        dos_stub_message=stub, rich_header_present=rich_at is not None,
        resource_dir=None, import_dir=None, raw=data, notes=(),
    )

    resource_dir = None
    if len(dirs) > DIR_RESOURCE and dirs[DIR_RESOURCE][0]:
        resource_dir = dirs[DIR_RESOURCE]
    import_dir = None
    imports: tuple[tuple[str, int], ...] = ()
    if len(dirs) > DIR_IMPORT and dirs[DIR_IMPORT][0]:
        import_dir = dirs[DIR_IMPORT]
        imports = _parse_imports(img, import_dir[0], notes)

    return PeImage(
        arch=arch, entry_point_rva=entry, image_size=image_size,
        headers_size=headers_size, sections=tuple(sections), imports=imports,
        dos_stub_message=stub, rich_header_present=rich_at is not None,
        resource_dir=resource_dir, import_dir=import_dir, raw=data,
        notes=tuple(notes),
    )


def _parse_imports(img: PeImage, rva: int, notes: list[str]) -> tuple[tuple[str, int], ...]:
    data = img.raw
    off = img.rva_to_offset(rva)
    if off is None:
        notes.append("import directory does not resolve to file data")
        return ()
    thunk_size, thunk_fmt = (8, "<Q") if img.arch == "PE64" else (4, "<I")
    out = []
    for i in range(_MAX_IMPORT_DESCRIPTORS):
        d = off + 20 * i
        if d + 20 > len(data):
            notes.append("import descriptor truncated")
            break
        oft, _ts, _fwd, name_rva, ft = struct.unpack_from("<IIIII", data, d)
        if not (oft or name_rva or ft):
            break
        name_off = img.rva_to_offset(name_rva)
        name = _cstr(data, name_off) if name_off is not None else None
        if name is None:
            notes.append(f"import descriptor {i} has an unreadable dll name")
            dll = ""
        else:
            dll = name.decode("latin-1")
        thunks = img.rva_to_offset(oft or ft)
        count = 0
        if thunks is None:
            notes.append(f"import descriptor {i} thunk array does not resolve")
        else:
            while count < _MAX_THUNKS:
                t = thunks + thunk_size * count
                if t + thunk_size > len(data):
                    notes.append(f"import descriptor {i} thunk array truncated")
                    break
                (v,) = struct.unpack_from(thunk_fmt, data, t)
                if v == 0:
                    break
                count += 1
        out.append((dll, count))
    return tuple(out)


def entry_point_context(img: PeImage, window: int = 64) -> EpContext:
    ep = img.entry_point_rva
    ep_section = None
    for i, s in enumerate(img.sections):
        if s.contains_rva(ep):
            ep_section = i
            break
    if ep_section is not None:
        s = img.sections[ep_section]
        delta = ep - s.virtual_addr
        offset = s.raw_offset + delta if delta < s.raw_size else None
    else:
        offset = ep if ep < img.headers_size else None
    if offset is None:
        return EpContext(ep_section, None, b"", 0)
    chunk = img.raw[offset:offset + window]
    pad = window - len(chunk)
    return EpContext(ep_section, offset, chunk + b"\x00" * pad, pad)


def overlay_range(img: PeImage) -> Optional[tuple[int, int]]:
    end = img.headers_size
    for s in img.sections:
        if s.raw_size > 0:
            end = max(end, s.raw_offset + s.raw_size)
    if len(img.raw) > end:
        return end, len(img.raw) - end
    return None


# --------------------------------------------------------------------------
# builder
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SectionSpec:
    name: str
    content: bytes = b""
    readable: bool = True
    writable: bool = False
    executable: bool = False
    virtual_size: Optional[int] = None
    virtual_addr: Optional[int] = None

    @property
    def characteristics(self) -> int:
        flags = SCN_CNT_CODE if self.executable else SCN_CNT_INITIALIZED_DATA
        if self.readable:
            flags |= SCN_MEM_READ
        if self.writable:
            flags |= SCN_MEM_WRITE
        if self.executable:
            flags |= SCN_MEM_EXECUTE
        return flags


@dataclass(frozen=True)
class BuildSpec:
    """Layout request for :func:`build_minimal_pe`.

    The entry point is either ``entry_rva`` verbatim or ``entry_offset``
    bytes into section ``entry_section``. Imports, when given, are appended
    to section ``import_section`` (default: the last section).
    """

    sections: tuple[SectionSpec, ...]
    arch: str = "PE32"
    entry_section: int = 0
    entry_offset: int = 0
    entry_rva: Optional[int] = None
    require_entry_in_section: bool = True
    imports: tuple[tuple[str, tuple[str, ...]], ...] = ()
    import_section: Optional[int] = None
    resource_section: Optional[int] = None
    dos_message: bytes = CANONICAL_DOS_MESSAGE + b".\r\r\n$"
    rich_header: bool = True
    overlay: bytes = b""
    timestamp: int = 0


FILE_ALIGN = 0x200
SECTION_ALIGN = 0x1000


def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


def _rich_blob(entries: Sequence[tuple[int, int]], key: int) -> bytes:
    words = [0x536E6144, 0, 0, 0]
    for compid, count in entries:
        words += [compid, count]
    body = b"".join(struct.pack("<I", w ^ key) for w in words)
    return body + b"Rich" + struct.pack("<I", key)


def _import_blob(imports, base_rva: int, pe64: bool) -> tuple[bytes, int, int]:
    """Serialize an import directory placed at ``base_rva``.

    Returns (blob, directory rva, directory size).
    """
    n = len(imports)
    desc_size = 20 * (n + 1)
    tsize = 8 if pe64 else 4
    fmt = "<Q" if pe64 else "<I"
    # layout: descriptors | thunk arrays (OFT) | thunk arrays (FT) | hint/names | dll names
    thunk_arrays = [tsize * (len(funcs) + 1) for _, funcs in imports]
    oft_at = desc_size
    ft_at = oft_at + sum(thunk_arrays)
    names_at = ft_at + sum(thunk_arrays)
    strings = bytearray()
    name_rvas = []
    func_rvas = []
    for dll, funcs in imports:
        rvas = []
        for f in funcs:
            rvas.append(base_rva + names_at + len(strings))
            entry = struct.pack("<H", 0) + f.encode("latin-1") + b"\x00"
            if len(entry) % 2:
                entry += b"\x00"
            strings += entry
        func_rvas.append(rvas)
    for dll, _ in imports:
        name_rvas.append(base_rva + names_at + len(strings))
        strings += dll.encode("latin-1") + b"\x00"

    blob = bytearray(names_at)
    oft_cur, ft_cur = oft_at, ft_at
    for i, (dll, funcs) in enumerate(imports):
        struct.pack_into("<IIIII", blob, 20 * i, base_rva + oft_cur, 0, 0, name_rvas[i], base_rva + ft_cur)
        for j, r in enumerate(func_rvas[i]):
            struct.pack_into(fmt, blob, oft_cur + tsize * j, r)
            struct.pack_into(fmt, blob, ft_cur + tsize * j, r)
        oft_cur += thunk_arrays[i]
        ft_cur += thunk_arrays[i]
    return bytes(blob) + bytes(strings), base_rva, desc_size


def build_minimal_pe(spec: BuildSpec) -> bytes:
    """Lay out ``spec`` as a PE file. Output is a pure function of ``spec``."""
    if spec.arch not in ("PE32", "PE64"):
        raise SpecInvalid(f"unknown arch {spec.arch!r}")
    if not spec.sections:
        raise SpecInvalid("at least one section is required")
    if len(spec.sections) > 96:
        raise SpecInvalid("too many sections")
    for s in spec.sections:
        if len(s.name.encode("latin-1")) > 8:
            raise SpecInvalid(f"section name {s.name!r} longer than 8 bytes")
    pe64 = spec.arch == "PE64"
    n = len(spec.sections)
    imp_idx = spec.import_section if spec.import_section is not None else n - 1
    if spec.imports and not 0 <= imp_idx < n:
        raise SpecInvalid("import_section out of range")

    opt_size = 240 if pe64 else 224
    e_lfanew_unaligned = DOS_HEADER_SIZE + len(_DOS_STUB_CODE) + len(spec.dos_message)
    rich = b""
    if spec.rich_header:
        key = int.from_bytes(hashlib.sha256(repr(spec).encode()).digest()[:4], "little")
        rich = _rich_blob([(0x00FF7809, 1), (0x01047809, len(spec.sections))], key)
    rich_at = _align(e_lfanew_unaligned, 8)
    e_lfanew = _align(rich_at + len(rich), 8)
    headers_end = e_lfanew + 24 + opt_size + 40 * n
    headers_size = _align(headers_end, FILE_ALIGN)

    # virtual layout first; import blob size depends on its rva
    contents = [bytearray(s.content) for s in spec.sections]
    imp_extra = 0
    if spec.imports:
        imp_extra = 8 + len(_import_blob(spec.imports, 0, pe64)[0])
    vas: list[int] = []
    cur = SECTION_ALIGN
    for i, s in enumerate(spec.sections):
        va = s.virtual_addr if s.virtual_addr is not None else cur
        vas.append(va)
        vsize_guess = max(len(s.content), s.virtual_size or 0, 1)
        if spec.imports and i == imp_idx:
            vsize_guess = max(len(s.content) + imp_extra, s.virtual_size or 0, 1)
        cur = _align(va + vsize_guess, SECTION_ALIGN)

    import_dir = (0, 0)
    if spec.imports:
        pad = (-len(contents[imp_idx])) % 8
        contents[imp_idx] += b"\x00" * pad
        base = vas[imp_idx] + len(contents[imp_idx])
        blob, rva, size = _import_blob(spec.imports, base, pe64)
        contents[imp_idx] += blob
        import_dir = (rva, size)

    vsizes = [max(len(c), s.virtual_size or 0) for c, s in zip(contents, spec.sections)]
    # re-check overlap with final sizes
    spans = sorted((vas[i], vas[i] + max(vsizes[i], 1), i) for i in range(n))
    for (a0, a1, i), (b0, _b1, j) in zip(spans, spans[1:]):
        if b0 < a1:
            raise SpecInvalid(f"sections {i} and {j} overlap in virtual address space")
    if spans[0][0] < headers_size:
        raise SpecInvalid("section overlaps the headers")
    image_size = _align(max(va + max(v, 1) for va, v in zip(vas, vsizes)), SECTION_ALIGN)

    if spec.entry_rva is not None:
        entry = spec.entry_rva
    else:
        if not 0 <= spec.entry_section < n:
            raise SpecInvalid("entry_section out of range")
        entry = vas[spec.entry_section] + spec.entry_offset
    if spec.require_entry_in_section:
        if not any(va <= entry < va + max(v, 1) for va, v in zip(vas, vsizes)):
            raise SpecInvalid("entry point lies outside every section")

    resource_dir = (0, 0)
    if spec.resource_section is not None:
        if not 0 <= spec.resource_section < n:
            raise SpecInvalid("resource_section out of range")
        r = spec.resource_section
        resource_dir = (vas[r], max(len(contents[r]), 1))

    out = bytearray(headers_size)
    out[0:2] = b"MZ"
    struct.pack_into("<HHHHH", out, 2, 0x90, 3, 0, 4, 0)
    struct.pack_into("<H", out, 0x18, 0x40)
    struct.pack_into("<I", out, 0x3C, e_lfanew)
    stub = _DOS_STUB_CODE + spec.dos_message
    out[DOS_HEADER_SIZE:DOS_HEADER_SIZE + len(stub)] = stub
    out[rich_at:rich_at + len(rich)] = rich

    machine = 0x8664 if pe64 else 0x14C
    chars = 0x0022 if pe64 else 0x0102
    out[e_lfanew:e_lfanew + 4] = PE_MAGIC
    struct.pack_into("<HHIIIHH", out, e_lfanew + 4, machine, n, spec.timestamp, 0, 0, opt_size, chars)
    opt = e_lfanew + 24
    struct.pack_into("<HBB", out, opt, PE64_MAGIC if pe64 else PE32_MAGIC, 14, 0)
    code_size = sum(_align(len(c), FILE_ALIGN) for c, s in zip(contents, spec.sections) if s.executable)
    struct.pack_into("<IIII", out, opt + 4, code_size, 0, 0, entry)
    if pe64:
        struct.pack_into("<I", out, opt + 20, vas[0])
        struct.pack_into("<Q", out, opt + 24, 0x140000000)
        base_fixed = 112
    else:
        struct.pack_into("<II", out, opt + 20, vas[0], vas[0])
        struct.pack_into("<I", out, opt + 28, 0x400000)
        base_fixed = 96
    struct.pack_into("<II", out, opt + 32, SECTION_ALIGN, FILE_ALIGN)
    struct.pack_into("<HHHHHH", out, opt + 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<II", out, opt + 56, image_size, headers_size)
    struct.pack_into("<HH", out, opt + 68, 3, 0x8140)
    if pe64:
        struct.pack_into("<QQQQ", out, opt + 72, 0x100000, 0x1000, 0x100000, 0x1000)
    else:
        struct.pack_into("<IIII", out, opt + 72, 0x100000, 0x1000, 0x100000, 0x1000)
    struct.pack_into("<I", out, opt + base_fixed - 4, 16)
    dirs = opt + base_fixed
    struct.pack_into("<II", out, dirs + 8 * DIR_IMPORT, *import_dir)
    struct.pack_into("<II", out, dirs + 8 * DIR_RESOURCE, *resource_dir)

    table = opt + opt_size
    raw_cur = headers_size
    body = bytearray()
    for i, s in enumerate(spec.sections):
        c = bytes(contents[i])
        rsize = _align(len(c), FILE_ALIGN) if c else 0
        roff = raw_cur if rsize else 0
        name = s.name.encode("latin-1").ljust(8, b"\x00")
        struct.pack_into("<8sIIII", out, table + 40 * i, name, vsizes[i], vas[i], rsize, roff)
        struct.pack_into("<I", out, table + 40 * i + 36, s.characteristics)
        body += c + b"\x00" * (rsize - len(c))
        raw_cur += rsize
    return bytes(out) + bytes(body) + spec.overlay
