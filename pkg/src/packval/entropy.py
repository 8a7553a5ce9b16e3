"""Shannon entropy primitives and the entropy-based packedness detectors."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .pe import PeImage, entry_point_context


class BintropyMode(enum.Enum):
    FULL_FILE = "FULL_FILE"
    PER_SECTION = "PER_SECTION"
    OR_COMBINE = "OR_COMBINE"
    AND_COMBINE = "AND_COMBINE"


# Variant names used in the published Bintropy results.
BINTROPY_VARIANTS: dict[str, BintropyMode] = {
    "m0": BintropyMode.FULL_FILE,
    "m1": BintropyMode.PER_SECTION,
    "m0/m1": BintropyMode.OR_COMBINE,
    "m0&m1": BintropyMode.AND_COMBINE,
}

# detector ids that are all the same whole-file threshold predicate
WHOLEFILE_ALIASES = ("pypeid.heur1", "readpe.heur1", "qu1cksc0pe.IsPacked")


@dataclass(frozen=True)
class EntropyConfig:
    block_size: int = 256
    bintropy_avg_threshold: float = 6.677
    bintropy_max_threshold: float = 7.199
    reminder_ep_entropy_threshold: float = 6.85
    wholefile_threshold: float = 7.0
    exclude_zero_blocks: bool = True
    include_partial_block: bool = True

    def __post_init__(self) -> None:
        for name in ("bintropy_avg_threshold", "bintropy_max_threshold",
                     "reminder_ep_entropy_threshold", "wholefile_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 8.0:
                raise ValueError(f"{name}={v} outside [0, 8]")
        if self.block_size < 16:
            raise ValueError("block_size must be at least 16")

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> "EntropyConfig":
        return cls(**dict(m))


@dataclass(frozen=True)
class PackednessVerdict:
    packed: bool
    detector_id: str
    evidence: dict[str, Any] = field(default_factory=dict)


def _entropy_of_counts(counts: np.ndarray, n: int) -> float:
    if n == 0:
        return 0.0
    p = counts[counts > 0] / n
    return float(-(p * np.log2(p)).sum())


def shannon_entropy(data: bytes) -> float:
    """Entropy of the byte histogram, in bits per byte."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    return _entropy_of_counts(counts, len(data))


def block_entropies(data: bytes, cfg: EntropyConfig = EntropyConfig()) -> list[float]:
    arr = np.frombuffer(data, dtype=np.uint8)
    bs = cfg.block_size
    out = []
    stop = len(arr) if cfg.include_partial_block else len(arr) - len(arr) % bs
    for start in range(0, stop, bs):
        block = arr[start:start + bs]
        if cfg.exclude_zero_blocks and not block.any():
            continue
        out.append(_entropy_of_counts(np.bincount(block, minlength=256), len(block)))
    return out


def _bintropy_over(data: bytes, cfg: EntropyConfig) -> tuple[bool, float, float]:
    ents = block_entropies(data, cfg)
    if not ents:
        return False, 0.0, 0.0
    avg, top = float(np.mean(ents)), float(max(ents))
    packed = avg > cfg.bintropy_avg_threshold and top > cfg.bintropy_max_threshold
    return packed, avg, top


def bintropy_decide(img: PeImage, cfg: EntropyConfig = EntropyConfig(),
                    mode: BintropyMode | str = BintropyMode.FULL_FILE) -> PackednessVerdict:
    """Bintropy: packed when both average and maximum block entropy exceed thresholds.

    ``mode`` may also be one of the variant names in :data:`BINTROPY_VARIANTS`.
    """
    if isinstance(mode, str):
        mode = BINTROPY_VARIANTS.get(mode) or BintropyMode(mode)
    full, avg, top = _bintropy_over(img.raw, cfg)
    evidence: dict[str, Any] = {
        "mode": mode.value,
        "full_file": {"avg_block_entropy": avg, "max_block_entropy": top, "packed": full},
    }
    per_section = False
    if mode is not BintropyMode.FULL_FILE:
        sections = []
        for i, s in enumerate(img.sections):
            hit, savg, stop = _bintropy_over(img.section_data(i), cfg)
            sections.append({"section": s.name, "avg_block_entropy": savg,
                             "max_block_entropy": stop, "packed": hit})
            per_section = per_section or hit
        evidence["per_section"] = sections
    if mode is BintropyMode.FULL_FILE:
        packed = full
    elif mode is BintropyMode.PER_SECTION:
        packed = per_section
    elif mode is BintropyMode.OR_COMBINE:
        packed = full or per_section
    else:
        packed = full and per_section
    return PackednessVerdict(packed, f"Bintropy.{mode.value}", evidence)


def reminder_decide(img: PeImage, cfg: EntropyConfig = EntropyConfig()) -> PackednessVerdict:
    """REMINDer: the entry-point section is writable and its data has high entropy."""
    ctx = entry_point_context(img)
    if ctx.ep_section is None:
        return PackednessVerdict(False, "REMINDer.heur1",
                                 {"ep_section": None, "writable": False, "ep_section_entropy": None})
    s = img.sections[ctx.ep_section]
    ent = shannon_entropy(img.section_data(ctx.ep_section))
    packed = s.writable and ent > cfg.reminder_ep_entropy_threshold
    return PackednessVerdict(packed, "REMINDer.heur1",
                             {"ep_section": s.name, "writable": s.writable, "ep_section_entropy": ent})


def wholefile_entropy_decide(img: PeImage, cfg: EntropyConfig = EntropyConfig(),
                             detector_id: str = "pypeid.heur1") -> PackednessVerdict:
    ent = shannon_entropy(img.raw)
    return PackednessVerdict(ent > cfg.wholefile_threshold, detector_id,
                             {"file_entropy": ent, "threshold": cfg.wholefile_threshold})
