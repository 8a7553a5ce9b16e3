"""Independent reference implementations the package is checked against.

Nothing here imports packval: each oracle is a direct transcription of the
definition, written for clarity rather than speed.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Optional, Sequence


def histogram_entropy(data: bytes) -> float:
    if not data:
        return 0.0
    counts = Counter(data)
    n = len(data)
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def chunk_entropies(data: bytes, block: int = 256, skip_zero: bool = True) -> list[float]:
    out = []
    for i in range(0, len(data), block):
        chunk = data[i:i + block]
        if skip_zero and all(b == 0 for b in chunk):
            continue
        out.append(histogram_entropy(chunk))
    return out


def naive_positions(pattern: Sequence[Optional[int]], data: bytes, start: int = 0, end: Optional[int] = None) -> list[int]:
    end = len(data) if end is None else end
    hits = []
    for pos in range(start, end - len(pattern) + 1):
        ok = True
        for k, p in enumerate(pattern):
            if p is not None and data[pos + k] != p:
                ok = False
                break
        if ok:
            hits.append(pos)
    return hits


def confusion(pairs: Sequence[tuple[bool, bool]]) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) from (predicted, actual) pairs."""
    tp = sum(1 for p, a in pairs if p and a)
    fp = sum(1 for p, a in pairs if p and not a)
    fn = sum(1 for p, a in pairs if not p and a)
    tn = sum(1 for p, a in pairs if not p and not a)
    return tp, fp, fn, tn


def brute_positions(pattern: Sequence[Optional[int]], data: bytes, start: int = 0, end: Optional[int] = None) -> list[int]:
    """Same contract as :func:`naive_positions`, vectorized over candidate offsets."""
    import numpy as np

    end = len(data) if end is None else end
    n = end - start - len(pattern) + 1
    if n <= 0:
        return []
    arr = np.frombuffer(data, dtype=np.uint8)[start:end]
    ok = np.ones(n, dtype=bool)
    for k, p in enumerate(pattern):
        if p is not None:
            ok &= arr[k:k + n] == p
    return [int(i) + start for i in np.flatnonzero(ok)]


def expected_matches(patterns: Sequence[tuple[Sequence[Optional[int]], bool]], data: bytes,
                     ep_offset: Optional[int], section: Optional[tuple[int, int]],
                     scopes: set[str], positions=brute_positions) -> set[tuple[int, str, int]]:
    """Reference match set {(index, scope, offset)} for the three signature scopes.

    ``patterns`` holds (pattern, ep_only) pairs. An ep_only pattern may only
    match at the entry point; the other two scopes are plain scans.
    """
    out = set()
    for idx, (pat, ep_only) in enumerate(patterns):
        if "EP" in scopes and ep_offset is not None and ep_offset + len(pat) <= len(data):
            if all(p is None or data[ep_offset + k] == p for k, p in enumerate(pat)):
                out.add((idx, "EP", ep_offset))
        if ep_only:
            continue
        if "ES" in scopes and section is not None:
            out |= {(idx, "ES", o) for o in positions(pat, data, *section)}
        if "FF" in scopes:
            out |= {(idx, "FF", o) for o in positions(pat, data)}
    return out


def pefile_ep_layout(data: bytes) -> tuple[Optional[int], Optional[tuple[int, int]]]:
    """(EP file offset, raw range of the EP section) as read by pefile."""
    import pefile

    pe = pefile.PE(data=data, fast_load=True)
    ep = pe.OPTIONAL_HEADER.AddressOfEntryPoint
    sec = pe.get_section_by_rva(ep)
    if sec is None:
        return None, None
    offset = sec.PointerToRawData + (ep - sec.VirtualAddress)
    if sec.SizeOfRawData == 0:
        return None, None
    end = min(sec.PointerToRawData + sec.SizeOfRawData, len(data))
    return (offset if offset < end else None), (sec.PointerToRawData, end)
