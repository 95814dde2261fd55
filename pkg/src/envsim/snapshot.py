"""Offline preprocessing: synthetic snapshot images, pool dedup and template build."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .mempool import PoolKind, PoolStore, content_hash, dedup_insert
from .mmtemplate import (MappingKind, MmTemplate, Prot, VmaDescriptor, mmt_add_map, mmt_create,
                         mmt_setup_pt)
from .simcore import stable_hash
from .units import PAGE_SIZE, pages_for
from .workload import FunctionProfile

IMAGE_BASE_VA = 0x400000
_KEY_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class SharingSpec:
    """Fractions of an image whose content also appears in other images.

    ``same_language`` pages are shared with functions on the same runtime
    (this includes the ``cross_language`` part shared with everyone).
    """

    same_language: float = 0.4
    cross_language: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.cross_language <= self.same_language <= 1.0:
            raise ValueError("need 0 <= cross_language <= same_language <= 1")


NO_SHARING = SharingSpec(0.0, 0.0)


def _namespace_keys(namespace: str, n: int) -> np.ndarray:
    base = np.uint64(stable_hash(namespace) & _KEY_MASK)
    return base + np.arange(n, dtype=np.uint64)


@dataclass
class SnapshotImage:
    function_id: str
    language: str
    regions: list = field(default_factory=list)  # (VmaDescriptor, uint64 content keys)

    @property
    def pages(self) -> int:
        return sum(len(keys) for _, keys in self.regions)

    @property
    def total_bytes(self) -> int:
        return sum(v.length for v, _ in self.regions)

    def content_keys(self) -> np.ndarray:
        return np.concatenate([keys for _, keys in self.regions]) if self.regions else np.empty(0, np.uint64)

    def to_manifest(self) -> dict:
        return {
            "function_id": self.function_id,
            "language": self.language,
            "total_bytes": self.total_bytes,
            "regions": [
                {**v.to_dict(), "pages": int(len(k)), "first_key": int(k[0]), "last_key": int(k[-1])}
                for v, k in self.regions
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_manifest(), sort_keys=True, indent=1)


def build_snapshot(profile: FunctionProfile, sharing: Optional[SharingSpec] = None,
                   rng: Optional[np.random.Generator] = None) -> SnapshotImage:
    """Describe ``profile``'s process image as VMAs with synthetic page contents.

    The first pages hold runtime content shared across images (common base,
    then the language base); the rest are unique to the function.  Region
    sizes are drawn at random, file-backed regions come first.
    """
    sharing = sharing or SharingSpec()
    rng = rng or np.random.default_rng(stable_hash(profile.id))
    npages = pages_for(profile.image_bytes)
    n_common = int(round(sharing.cross_language * npages))
    n_lang = int(round(sharing.same_language * npages)) - n_common
    n_unique = npages - n_common - n_lang
    keys = np.concatenate([
        _namespace_keys("base:common", n_common),
        _namespace_keys(f"base:{profile.language}", n_lang),
        _namespace_keys(f"fn:{profile.id}", n_unique),
    ])

    nvma = max(1, min(profile.vma_count, npages))
    weights = rng.dirichlet(np.ones(nvma))
    sizes = 1 + np.floor(weights * (npages - nvma)).astype(np.int64)
    sizes[-1] += npages - int(sizes.sum())
    n_file = int(round((1.0 - profile.anon_fraction) * npages))

    img = SnapshotImage(profile.id, profile.language)
    va, pos = IMAGE_BASE_VA, 0
    for i, n in enumerate(sizes):
        n = int(n)
        file_backed = pos < n_file
        vma = VmaDescriptor(
            va_start=va,
            length=n * PAGE_SIZE,
            prot=Prot.READ | Prot.EXEC if file_backed else Prot.READ | Prot.WRITE,
            mapping_kind=MappingKind.FILE_BACKED if file_backed else MappingKind.ANONYMOUS,
            file_ref=f"{profile.id}/file{i}" if file_backed else None,
        )
        img.regions.append((vma, keys[pos:pos + n]))
        pos += n
        va += (n + 1) * PAGE_SIZE  # one unmapped guard page between regions
    return img


Assignment = Union[PoolKind, str, Sequence, Callable[[int], PoolKind]]


def _page_kinds(assignment: Assignment, npages: int) -> list:
    """Expand an assignment into (first_page, end_page, kind) ranges over image pages."""
    if isinstance(assignment, (PoolKind, str)):
        return [(0, npages, PoolKind(assignment))]
    ranges = sorted((int(a), int(b), PoolKind(k)) for a, b, k in assignment)
    pos = 0
    for a, b, _ in ranges:
        if a != pos or b <= a:
            raise ValueError("pool assignment must tile the image without gaps or overlaps")
        pos = b
    if pos != npages:
        raise ValueError(f"pool assignment covers {pos} of {npages} pages")
    return ranges


def build_template(img: SnapshotImage, pools: dict, assignment: Assignment = PoolKind.CXL) -> MmTemplate:
    """Dedup every page into its assigned pool and build the matching template.

    ``pools`` maps PoolKind to PoolStore.  PoolFull propagates.
    """
    tpl = mmt_create(img.function_id)
    ranges = _page_kinds(assignment, img.pages)
    bounds = [(a, b, k) for a, b, k in ranges]

    page = 0
    for vma, keys in img.regions:
        mmt_add_map(tpl, vma.va_start, vma.length, vma.prot, "private", vma.file_ref, vma.file_off)
        n = len(keys)
        for a, b, kind in bounds:
            lo, hi = max(a, page), min(b, page + n)
            if lo >= hi:
                continue
            store: PoolStore = pools[kind]
            offsets = np.fromiter(
                (dedup_insert(store, content_hash(int(k))).offset for k in keys[lo - page:hi - page]),
                dtype=np.int64, count=hi - lo)
            # one setup call per run of pool-contiguous pages
            breaks = np.flatnonzero(np.diff(offsets) != PAGE_SIZE) + 1
            starts = np.concatenate([[0], breaks])
            ends = np.concatenate([breaks, [len(offsets)]])
            for s, e in zip(starts, ends):
                va = vma.va_start + (lo - page + int(s)) * PAGE_SIZE
                mmt_setup_pt(tpl, va, int(e - s) * PAGE_SIZE, int(offsets[s]), store)
        page += n
    return tpl
