"""Level-1 dataset protocols, stratified splits and manifest integrity checks.

Positives are always with-text scenes pushed through text removal. Negatives
depend on the protocol:

1. manually erased twins
2. scenes that never contained text
3. manually erased twins that were additionally pushed through text removal
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from istr.corpus import ImageRecord, Step, apply_str_oracle, erase_manual

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE = "positive", "negative"
SPLITS = ("train", "val", "test")
# 2,199 of 2,749 training scenes go to training, the rest to validation
DEFAULT_TRAIN_FRACTION = 2199 / 2749

_EXPECTED_NEGATIVE = {
    1: [Step.RENDERED_WITH_TEXT, Step.MANUAL_ERASE],
    2: [Step.RENDERED_TEXT_FREE],
    3: [Step.RENDERED_WITH_TEXT, Step.MANUAL_ERASE, Step.STR_APPLIED],
}
_EXPECTED_POSITIVE = [Step.RENDERED_WITH_TEXT, Step.STR_APPLIED]


class ProtocolError(ValueError):
    pass


@dataclass
class ManifestEntry:
    image_id: str
    label: str
    split: str
    protocol: int
    source_id: str = ""


@dataclass
class DatasetManifest:
    protocol: int
    entries: list[ManifestEntry]
    seed: int = 0
    # derived images keyed by image_id; not part of the on-disk manifest
    records: dict[str, ImageRecord] = field(default_factory=dict, repr=False)

    @property
    def counts(self) -> dict[tuple[str, str], int]:
        return dict(Counter((e.label, e.split) for e in self.entries))

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def record(self, entry: ManifestEntry) -> ImageRecord:
        return self.records[entry.image_id]

    def labeled(self, split: str) -> tuple[list[ImageRecord], list[int]]:
        entries = self.split(split)
        return [self.records[e.image_id] for e in entries], [int(e.label == POSITIVE) for e in entries]


def build_protocol(corpus: Sequence[ImageRecord], protocol: int, str_method: str = "mean_fill",
                   seed: int = 0, mask_dilation: int = 2,
                   remover: Callable[[ImageRecord], ImageRecord] | None = None) -> DatasetManifest:
    """Derive positives and negatives for one protocol.

    Train-pool records land in ``train`` (call ``split_manifest`` to carve out
    validation); test-pool records land in ``test``. ``remover`` replaces the
    built-in removal oracle, e.g. with ``apply_external_str``.
    """
    if protocol not in (1, 2, 3):
        raise ProtocolError(f"protocol must be 1, 2 or 3, got {protocol}")
    with_text = [r for r in corpus if r.steps == [Step.RENDERED_WITH_TEXT]]
    text_free = [r for r in corpus if r.steps == [Step.RENDERED_TEXT_FREE] and not r.regions]
    if not with_text:
        raise ProtocolError("corpus has no with-text records to build positives from")

    if remover is None:
        def remover(rec):
            return apply_str_oracle(rec, str_method, mask_dilation, seed)

    rng = np.random.default_rng(seed)
    records: dict[str, ImageRecord] = {}
    entries: list[ManifestEntry] = []

    def add(rec: ImageRecord, label: str):
        if rec.id in records:
            raise ProtocolError(f"duplicate derived image id {rec.id}")
        records[rec.id] = rec
        entries.append(ManifestEntry(rec.id, label, "test" if rec.test_pool else "train", protocol, rec.source_id))

    for pool in (False, True):
        pos_src = [r for r in with_text if r.test_pool == pool]
        if protocol in (1, 3):
            missing = [r.id for r in pos_src if r.twin is None]
            if missing:
                raise ProtocolError(f"protocol {protocol}: {len(missing)} with-text records lack a text-free twin "
                                    f"(e.g. {missing[0]})")
            neg_src = pos_src
        else:
            pool_free = sorted((r for r in text_free if r.test_pool == pool), key=lambda r: r.id)
            if len(pool_free) < len(pos_src):
                raise ProtocolError(f"protocol 2 needs {len(pos_src)} never-text "
                                    f"{'test' if pool else 'train'}-pool records, corpus has {len(pool_free)}")
            pick = rng.choice(len(pool_free), size=len(pos_src), replace=False) if pos_src else []
            neg_src = [pool_free[i] for i in sorted(pick)]

        for rec in pos_src:
            add(remover(rec), POSITIVE)
        for rec in neg_src:
            if protocol == 1:
                add(erase_manual(rec), NEGATIVE)
            elif protocol == 2:
                add(rec, NEGATIVE)
            else:
                add(remover(erase_manual(rec)), NEGATIVE)

    return DatasetManifest(protocol, entries, seed, records)


def split_manifest(manifest: DatasetManifest, train_fraction: float = DEFAULT_TRAIN_FRACTION,
                   seed: int | None = None) -> DatasetManifest:
    """Stratified train/val split of the non-test entries.

    Each class gets ``floor(train_fraction * n)`` training entries. Both classes
    are ordered by source scene and shuffled with the same permutation, so a
    positive and its erased twin end up in the same split.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    seed = manifest.seed if seed is None else seed
    pool = [e for e in manifest.entries if e.split != "test"]
    out = [ManifestEntry(**vars(e)) for e in manifest.entries if e.split == "test"]
    by_label = {lab: sorted((e for e in pool if e.label == lab), key=lambda e: (e.source_id, e.image_id))
                for lab in (POSITIVE, NEGATIVE)}
    for label, items in by_label.items():
        n = len(items)
        n_train = int(np.floor(train_fraction * n))
        if n and (n_train == 0 or n_train == n):
            raise ValueError(f"train_fraction {train_fraction} leaves an empty split for {n} {label} entries")
        perm = np.random.default_rng(seed).permutation(n)
        for rank, idx in enumerate(perm):
            e = items[idx]
            out.append(ManifestEntry(e.image_id, e.label, "train" if rank < n_train else "val",
                                     e.protocol, e.source_id))
    out.sort(key=lambda e: (SPLITS.index(e.split), e.label != POSITIVE, e.image_id))
    return DatasetManifest(manifest.protocol, out, seed, manifest.records)


def verify_manifest(manifest: DatasetManifest, records: dict[str, ImageRecord] | None = None) -> list[str]:
    """Invariant violations as human-readable strings; empty means consistent."""
    violations: list[str] = []
    counts = manifest.counts
    for split in sorted({e.split for e in manifest.entries}):
        pos, neg = counts.get((POSITIVE, split), 0), counts.get((NEGATIVE, split), 0)
        if pos != neg:
            violations.append(f"class imbalance in {split}: {pos} positive vs {neg} negative")

    seen: dict[str, str] = {}
    for e in manifest.entries:
        if e.split not in SPLITS:
            violations.append(f"unknown split {e.split!r} for {e.image_id}")
        if e.protocol != manifest.protocol:
            violations.append(f"protocol mismatch: {e.image_id} tagged {e.protocol}, manifest is {manifest.protocol}")
        if e.image_id in seen and seen[e.image_id] != e.split:
            violations.append(f"split overlap: {e.image_id} in {seen[e.image_id]} and {e.split}")
        elif e.image_id in seen:
            violations.append(f"duplicate entry: {e.image_id}")
        seen.setdefault(e.image_id, e.split)

    records = manifest.records if records is None else records
    if records:
        for e in manifest.entries:
            rec = records.get(e.image_id)
            if rec is None:
                violations.append(f"missing record: {e.image_id}")
                continue
            expected = _EXPECTED_POSITIVE if e.label == POSITIVE else _EXPECTED_NEGATIVE.get(manifest.protocol)
            if rec.steps != expected:
                violations.append(f"provenance mismatch: {e.image_id} ({e.label}) has "
                                  f"{[s.value for s in rec.steps]}")
    return violations


MANIFEST_FIELDS = ("image_id", "label", "split", "protocol", "source_id")


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Tab-separated, one entry per line, fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# protocol={manifest.protocol} seed={manifest.seed}", "\t".join(MANIFEST_FIELDS)]
    lines += ["\t".join(str(getattr(e, f)) for f in MANIFEST_FIELDS) for e in manifest.entries]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path, records: dict[str, ImageRecord] | None = None) -> DatasetManifest:
    meta, entries, header = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            meta.update(kv.split("=", 1) for kv in line[1:].split())
            continue
        if not line.strip():
            continue
        cols = line.split("\t")
        if header is None:
            header = cols
            continue
        row = dict(zip(header, cols))
        entries.append(ManifestEntry(row["image_id"], row["label"], row["split"], int(row["protocol"]),
                                     row.get("source_id", "")))
    return DatasetManifest(int(meta["protocol"]), entries, int(meta.get("seed", 0)), records or {})
