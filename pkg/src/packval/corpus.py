"""Sample ingestion, the synthetic mock corpus, and the JSONL results store."""

from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import os
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import numpy as np

from .mock import FAMILIES, mock_pack
from .pe import BuildSpec, CANONICAL_DOS_MESSAGE, NotPe, PeError, SectionSpec, SpecInvalid, build_minimal_pe, parse_pe

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
NOT_PACKED = "NOT_PACKED"
UNPACKED_KEY = "unpacked"


class IoError(OSError):
    pass


# --------------------------------------------------------------------------- ingest

@dataclass(frozen=True)
class SampleEntry:
    sha256: str
    paths: tuple[str, ...]
    size: int
    arch: Optional[str]
    status: str  # OK | NOT_PE | TRUNCATED


@dataclass(frozen=True)
class SampleIndex:
    entries: tuple[SampleEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def by_sha(self) -> dict[str, SampleEntry]:
        return {e.sha256: e for e in self.entries}

    def ok(self) -> list[SampleEntry]:
        return [e for e in self.entries if e.status == "OK"]


def _probe(path: Path) -> tuple[str, str, int, Optional[str], str]:
    data = path.read_bytes()
    sha = hashlib.sha256(data).hexdigest()
    try:
        img = parse_pe(data)
        return sha, str(path), len(data), img.arch, "OK"
    except NotPe:
        return sha, str(path), len(data), None, "NOT_PE"
    except PeError:
        return sha, str(path), len(data), None, "TRUNCATED"


def ingest(directory, workers: int = 1, skip: Iterable[str] = ("manifest.json",)) -> SampleIndex:
    """Recursively hash and probe every file under ``directory``."""
    root = Path(directory)
    if not root.is_dir():
        raise IoError(f"not a readable directory: {root}")
    skip = set(skip)
    try:
        files = sorted(p for p in root.rglob("*") if p.is_file() and p.name not in skip)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                probes = list(pool.map(_probe, files))
        else:
            probes = [_probe(p) for p in files]
    except OSError as exc:
        raise IoError(str(exc)) from exc
    merged: dict[str, list] = {}
    for sha, path, size, arch, status in probes:
        if sha in merged:
            merged[sha][1].append(path)
        else:
            merged[sha] = [sha, [path], size, arch, status]
    entries = tuple(SampleEntry(sha, tuple(paths), size, arch, status)
                    for sha, paths, size, arch, status in sorted(merged.values()))
    return SampleIndex(entries)


# --------------------------------------------------------------------------- generator

_DLLS = {
    "kernel32.dll": ("GetModuleHandleA", "GetProcAddress", "LoadLibraryA", "ExitProcess", "CreateFileA",
                     "ReadFile", "WriteFile", "CloseHandle", "GetLastError", "VirtualAlloc",
                     "HeapAlloc", "HeapFree", "GetCommandLineA", "Sleep", "GetTickCount"),
    "user32.dll": ("MessageBoxA", "CreateWindowExA", "ShowWindow", "GetMessageA", "DispatchMessageA",
                   "DefWindowProcA", "RegisterClassA", "PostQuitMessage"),
    "advapi32.dll": ("RegOpenKeyExA", "RegQueryValueExA", "RegCloseKey", "OpenProcessToken"),
    "msvcrt.dll": ("printf", "malloc", "free", "memcpy", "strlen", "exit", "_initterm"),
    "ws2_32.dll": ("WSAStartup", "socket", "connect", "send", "recv", "closesocket"),
}

# a skewed opcode-like alphabet: instruction-ish bytes with realistic repetition
_CODE_ALPHABET = np.arange(256)
_CODE_WEIGHTS = 1.0 / (1.0 + np.arange(256)) ** 1.1
_CODE_WEIGHTS /= _CODE_WEIGHTS.sum()
_CODE_PERM = np.random.default_rng(0x7E47).permutation(256)


def _code_bytes(rng: np.random.Generator, n: int) -> bytes:
    idx = rng.choice(_CODE_ALPHABET, size=n, p=_CODE_WEIGHTS)
    return _CODE_PERM[idx].astype(np.uint8).tobytes()


def _text_bytes(rng: np.random.Generator, n: int) -> bytes:
    words = [b"error", b"file", b"open", b"config", b"%s", b"%d\n", b"Usage: ", b"settings",
             b"window", b"class", b"value", b"path", b"temp", b"data", b"\x00"]
    out = bytearray()
    while len(out) < n:
        out += words[int(rng.integers(len(words)))]
        if rng.random() < 0.3:
            out += b"\x00"
    return bytes(out[:n])


def _data_bytes(rng: np.random.Generator, n: int) -> bytes:
    arr = np.zeros(n, dtype=np.uint8)
    k = n // 4
    pos = rng.integers(0, n, size=k)
    arr[pos] = rng.integers(0, 256, size=k, dtype=np.uint8)
    return arr.tobytes()


def random_base_spec(rng: np.random.Generator) -> BuildSpec:
    """A plausible unpacked program layout; every draw comes from ``rng``."""
    arch = "PE64" if rng.random() < 0.4 else "PE32"
    text_size = int(rng.integers(1, 12)) * 512 + int(rng.integers(0, 512))
    sections = [SectionSpec(".text", _code_bytes(rng, text_size), True, bool(rng.random() < 0.05), True)]
    sections.append(SectionSpec(".rdata", _text_bytes(rng, int(rng.integers(256, 4096)))))
    sections.append(SectionSpec(".data", _data_bytes(rng, int(rng.integers(128, 3072))), True, True, False))
    resource_section = None
    r = rng.random()
    if r < 0.35:
        # icons and bitmaps: mostly structured, sometimes already-compressed media
        if rng.random() < 0.3:
            rsrc = rng.integers(0, 256, size=int(rng.integers(1024, 8192)), dtype=np.uint8).tobytes()
        else:
            rsrc = _data_bytes(rng, int(rng.integers(512, 4096)))
        resource_section = len(sections)
        sections.append(SectionSpec(".rsrc", rsrc))
    if rng.random() < 0.4:
        sections.append(SectionSpec(".reloc", _data_bytes(rng, int(rng.integers(64, 512)))))

    n_dlls = int(rng.integers(1, 4))
    dll_names = list(_DLLS)
    chosen = sorted(rng.choice(len(dll_names), size=n_dlls, replace=False))
    imports = []
    total = 0
    for i in chosen:
        funcs = _DLLS[dll_names[i]]
        k = int(rng.integers(2, len(funcs) + 1))
        pick = tuple(funcs[j] for j in sorted(rng.choice(len(funcs), size=k, replace=False)))
        imports.append((dll_names[i], pick))
        total += k
    if total < 4:
        # a real program imports at least a handful of functions
        have = dict(imports)
        k32 = have.get("kernel32.dll", ())
        k32 += tuple(f for f in _DLLS["kernel32.dll"] if f not in k32)[:4 - total]
        have["kernel32.dll"] = k32
        imports = sorted(have.items())

    dos = CANONICAL_DOS_MESSAGE + b".\r\r\n$"
    if rng.random() < 0.08:
        dos = b"This program must be run under Win32\r\n$"
    overlay = b""
    if rng.random() < 0.15:
        overlay = _text_bytes(rng, int(rng.integers(16, 600)))
    return BuildSpec(
        sections=tuple(sections), arch=arch, entry_section=0,
        entry_offset=int(rng.integers(0, max(1, text_size - 64))),
        imports=tuple(imports), import_section=1, resource_section=resource_section,
        dos_message=dos, rich_header=bool(rng.random() < 0.85), overlay=overlay,
        timestamp=int(rng.integers(0x40000000, 0x68000000)))


def random_base_pe(rng: np.random.Generator) -> bytes:
    return build_minimal_pe(random_base_spec(rng))


@dataclass(frozen=True)
class GroundTruthManifest:
    samples: dict[str, str]
    seed: int
    generator_version: str = GENERATOR_VERSION
    spec: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"seed": self.seed, "generator_version": self.generator_version,
                "spec": dict(self.spec), "samples": dict(sorted(self.samples.items()))}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "GroundTruthManifest":
        return cls(dict(obj["samples"]), int(obj["seed"]), str(obj.get("generator_version", "")),
                   dict(obj.get("spec", {})))

    @classmethod
    def load(cls, path) -> "GroundTruthManifest":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(str(exc)) from exc


def _validate_corpus_spec(spec: Mapping[str, int]) -> dict[str, int]:
    out = {}
    for key, n in spec.items():
        if key != UNPACKED_KEY and key not in FAMILIES and key != "UPX":
            raise SpecInvalid(f"unknown corpus class {key!r}")
        if not isinstance(n, int) or isinstance(n, bool) or n < 0:
            raise SpecInvalid(f"count for {key!r} must be a non-negative integer, got {n!r}")
        out[key] = n
    if out.get("UPX") and shutil.which("upx") is None:
        raise SpecInvalid("UPX samples requested but no upx executable on PATH")
    return out


def upx_pack(pe: bytes, timeout: float = 60) -> bytes:
    """Pack with the host's UPX binary (only used when one is installed)."""
    with tempfile.TemporaryDirectory(prefix="packval-upx-") as d:
        src, dst = os.path.join(d, "in.exe"), os.path.join(d, "out.exe")
        Path(src).write_bytes(pe)
        subprocess.run(["upx", "-q", "-o", dst, src], check=True, capture_output=True, timeout=timeout)
        return Path(dst).read_bytes()


def generate_corpus(spec: Mapping[str, int], seed: int, out_dir) -> tuple[Path, GroundTruthManifest]:
    """Write a labelled synthetic corpus to ``out_dir``; a pure function of (spec, seed).

    ``spec`` maps MOCKX/MOCKR/MOCKN (and UPX when installed) and ``unpacked``
    to counts. Files are named by their SHA-256.
    """
    counts = _validate_corpus_spec(spec)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    rng = np.random.default_rng(seed)
    samples: dict[str, str] = {}
    plan = [(UNPACKED_KEY, counts.get(UNPACKED_KEY, 0))]
    plan += [(k, counts[k]) for k in sorted(counts) if k != UNPACKED_KEY]
    for klass, n in plan:
        made = 0
        while made < n:
            base = random_base_pe(rng)
            if klass == UNPACKED_KEY:
                data, label = base, NOT_PACKED
            elif klass == "UPX":
                try:
                    data = upx_pack(base)
                except (subprocess.SubprocessError, OSError) as exc:
                    log.warning("upx refused a generated sample: %s", exc)
                    continue
                label = "UPX"
            else:
                data, label = mock_pack(base, klass, int(rng.integers(0, 2**32))), klass
            sha = hashlib.sha256(data).hexdigest()
            if sha in samples:
                continue
            (out / f"{sha}.exe").write_bytes(data)
            samples[sha] = label
            made += 1
    manifest = GroundTruthManifest(samples, seed, GENERATOR_VERSION, counts)
    (out / "manifest.json").write_text(manifest.dumps())
    return out, manifest


# --------------------------------------------------------------------------- results store

def _record_json(record: Any) -> dict[str, Any]:
    if hasattr(record, "to_json"):
        obj = record.to_json()
    elif isinstance(record, Mapping):
        obj = dict(record)
    else:
        raise TypeError(f"cannot serialize {type(record).__name__}")
    if "kind" not in obj:
        obj = {"kind": type(record).__name__, **obj}
    return obj


def results_store_append(record: Any, store_path) -> None:
    """Append one record as a single JSON line.

    The line goes out in one ``write`` on an ``O_APPEND`` descriptor while
    holding an exclusive ``flock``, so concurrent appenders never interleave.
    """
    line = (json.dumps(_record_json(record), sort_keys=True, separators=(",", ":")) + "\n").encode()
    try:
        fd = os.open(os.fspath(store_path), os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        view = memoryview(line)
        while view:
            n = os.write(fd, view)
            view = view[n:]
    except OSError as exc:
        raise IoError(str(exc)) from exc
    finally:
        os.close(fd)  # closing releases the lock


def results_store_extend(records: Iterable[Any], store_path) -> int:
    n = 0
    for r in records:
        results_store_append(r, store_path)
        n += 1
    return n


def read_store(store_path, kind: Optional[str] = None) -> list[dict[str, Any]]:
    """Read every complete record; a torn final line (crash mid-write) is ignored."""
    try:
        text = Path(store_path).read_text()
    except FileNotFoundError:
        return []
    except OSError as exc:
        raise IoError(str(exc)) from exc
    lines = text.split("\n")
    if lines and lines[-1] != "":
        log.warning("%s: ignoring unterminated final line", store_path)
    out = [json.loads(line) for line in lines[:-1] if line]
    return [r for r in out if kind is None or r.get("kind") == kind]
