"""Association pairs derived from question supervision.

Every question whose gold set holds h >= 2 passages contributes all C(h, 2)
unordered co-occurrence pairs. Pairs are stored in first-seen order; the
dedup key is the lexicographically sorted id tuple, so (a, b) and (b, a)
collapse. Ablation constructors (label shuffling, similarity-matched
positives) live here too, alongside the split-leakage statistics.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from assocrank.embeddings import EmbeddingMatrix

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation")
SPLIT_MODES = ("transductive", "inductive")


@dataclass
class QuestionRecord:
    question_id: str
    question_text: str
    gold_passage_ids: list[str]
    gold_answer: str
    split: str

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"record {self.question_id!r}: unknown split {self.split!r}")
        if len(set(self.gold_passage_ids)) != len(self.gold_passage_ids):
            raise ValueError(f"record {self.question_id!r}: duplicate gold passage ids")

    def to_json_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "question_text": self.question_text,
            "gold_passage_ids": self.gold_passage_ids,
            "gold_answer": self.gold_answer,
            "split": self.split,
        }


def load_records(path: str) -> list[QuestionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            try:
                rec = QuestionRecord(
                    question_id=raw["question_id"],
                    question_text=raw["question_text"],
                    gold_passage_ids=list(raw["gold_passage_ids"]),
                    gold_answer=raw["gold_answer"],
                    split=raw["split"],
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
            rec.validate()
            records.append(rec)
    return records


def save_records(records: list[QuestionRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")


def canonical(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class AssocPairSet:
    """Ordered, deduplicated pair collection with per-pair split provenance."""

    pairs: list[tuple[str, str]] = field(default_factory=list)
    pair_splits: list[frozenset[str]] = field(default_factory=list)
    provenance: str = "cooccurrence"

    def __post_init__(self):
        if len(self.pair_splits) != len(self.pairs):
            raise ValueError("pair_splits must align with pairs")
        seen = set()
        for a, b in self.pairs:
            if a == b:
                raise ValueError(f"self-pair {a!r}")
            key = canonical(a, b)
            if key in seen:
                raise ValueError(f"duplicate unordered pair {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, pair: tuple[str, str]) -> bool:
        key = canonical(*pair)
        return any(canonical(a, b) == key for a, b in self.pairs)

    @property
    def source_splits(self) -> set[str]:
        out: set[str] = set()
        for splits in self.pair_splits:
            out |= splits
        return out


def extract_pairs(records: list[QuestionRecord]) -> AssocPairSet:
    """All C(h, 2) gold co-occurrence pairs, deduplicated across questions.

    Questions with fewer than two gold passages carry no co-occurrence signal
    and are skipped (logged once with a count). Split provenance merges when
    the same pair shows up in several splits.
    """
    pairs: list[tuple[str, str]] = []
    splits: dict[tuple[str, str], set[str]] = {}
    skipped = 0
    for rec in records:
        rec.validate()
        if len(rec.gold_passage_ids) < 2:
            skipped += 1
            continue
        for a, b in itertools.combinations(sorted(rec.gold_passage_ids), 2):
            key = canonical(a, b)
            if key not in splits:
                splits[key] = set()
                pairs.append(key)
            splits[key].add(rec.split)
    if skipped:
        logger.warning("skipped %d records with fewer than 2 gold passages", skipped)
    return AssocPairSet(
        pairs=pairs,
        pair_splits=[frozenset(splits[p]) for p in pairs],
        provenance="cooccurrence",
    )


def split_policy(pair_set: AssocPairSet, mode: str) -> AssocPairSet:
    """transductive keeps every pair; inductive keeps only pairs backed by at
    least one train-split question."""
    if mode not in SPLIT_MODES:
        raise ValueError(f"mode must be one of {SPLIT_MODES}, got {mode!r}")
    if mode == "transductive":
        return AssocPairSet(
            pairs=list(pair_set.pairs),
            pair_splits=list(pair_set.pair_splits),
            provenance=pair_set.provenance,
        )
    keep = [i for i, splits in enumerate(pair_set.pair_splits) if "train" in splits]
    return AssocPairSet(
        pairs=[pair_set.pairs[i] for i in keep],
        pair_splits=[pair_set.pair_splits[i] for i in keep],
        provenance=pair_set.provenance,
    )


def shuffle_pairs(pair_set: AssocPairSet, seed: int) -> AssocPairSet:
    """Break the association signal: permute the right-hand elements.

    Left and right multisets are preserved exactly, so marginal id
    frequencies match the real pair set; only the pairing is destroyed.
    Permutations are re-rolled (with targeted swaps) until no self-pairs or
    duplicate unordered pairs remain.
    """
    n = len(pair_set.pairs)
    if n < 2:
        raise ValueError("need at least 2 pairs to shuffle")
    lefts = [a for a, _ in pair_set.pairs]
    rights = [b for _, b in pair_set.pairs]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    for _ in range(200):
        cand = [(lefts[i], rights[perm[i]]) for i in range(n)]
        counts: dict[tuple[str, str], int] = {}
        for a, b in cand:
            if a != b:
                key = canonical(a, b)
                counts[key] = counts.get(key, 0) + 1
        bad = [
            i
            for i, (a, b) in enumerate(cand)
            if a == b or counts[canonical(a, b)] > 1
        ]
        if not bad:
            return AssocPairSet(
                pairs=cand,
                pair_splits=[frozenset()] * n,
                provenance="shuffled",
            )
        for i in bad:
            j = int(rng.integers(n))
            perm[i], perm[j] = perm[j], perm[i]
    raise RuntimeError("could not find a collision-free shuffle; pair set too degenerate")


def similar_positive_pairs(matrix: EmbeddingMatrix, count: int) -> AssocPairSet:
    """Similarity-matched control pairs: each passage with its nearest
    neighbour by inner product, ranked by similarity, top `count` kept after
    unordered dedup."""
    if matrix.rows < 2:
        raise ValueError("need at least 2 passages")
    data = matrix.data.astype(np.float64)
    best: dict[tuple[str, str], float] = {}
    block = 512
    for start in range(0, matrix.rows, block):
        sims = data[start : start + block] @ data.T
        for local in range(sims.shape[0]):
            i = start + local
            sims[local, i] = -np.inf
            j = int(np.argmax(sims[local]))
            key = canonical(matrix.ids[i], matrix.ids[j])
            sim = float(sims[local, j])
            if key not in best or sim > best[key]:
                best[key] = sim
    if count > len(best):
        raise ValueError(f"requested {count} pairs but only {len(best)} nearest-neighbour pairs exist")
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:count]
    return AssocPairSet(
        pairs=[key for key, _ in ranked],
        pair_splits=[frozenset()] * count,
        provenance="similar_positives",
    )


@dataclass
class OverlapStats:
    passage_id_overlap: float
    gold_title_overlap: float
    duplicate_pair_fraction: float

    def to_json_dict(self) -> dict:
        return {
            "passage_id_overlap": self.passage_id_overlap,
            "gold_title_overlap": self.gold_title_overlap,
            "duplicate_pair_fraction": self.duplicate_pair_fraction,
        }


_CHUNK_SUFFIX = re.compile(r"_\d+$")


def _title_of(passage_id: str) -> str:
    """Chunk ids conventionally end in _<n>; the stem identifies the source
    document and stands in for its title."""
    return _CHUNK_SUFFIX.sub("", passage_id)


def overlap_stats(
    train_records: list[QuestionRecord], val_records: list[QuestionRecord]
) -> OverlapStats:
    """Leakage statistics between two record sets.

    Fractions are over the distinct validation-side items: gold passage ids,
    their title stems, and canonical pairs that also occur on the train side.
    """
    train_ids = {pid for rec in train_records for pid in rec.gold_passage_ids}
    val_ids = {pid for rec in val_records for pid in rec.gold_passage_ids}
    if not val_ids:
        raise ValueError("validation records contribute no gold passage ids")
    id_overlap = len(val_ids & train_ids) / len(val_ids)

    train_titles = {_title_of(pid) for pid in train_ids}
    val_titles = {_title_of(pid) for pid in val_ids}
    title_overlap = len(val_titles & train_titles) / len(val_titles)

    def pair_keys(records: list[QuestionRecord]) -> set[tuple[str, str]]:
        out = set()
        for rec in records:
            if len(rec.gold_passage_ids) >= 2:
                out.update(itertools.combinations(sorted(rec.gold_passage_ids), 2))
        return out

    train_pairs = pair_keys(train_records)
    val_pairs = pair_keys(val_records)
    if not val_pairs:
        raise ValueError("validation records contribute no pairs")
    dup = len(val_pairs & train_pairs) / len(val_pairs)
    return OverlapStats(id_overlap, title_overlap, dup)


def save_pairs(pair_set: AssocPairSet, path: str) -> None:
    """Two-column tab-separated text, one pair per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in pair_set.pairs:
            fh.write(f"{a}\t{b}\n")


def load_pairs(path: str, provenance: str = "file") -> AssocPairSet:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two tab-separated ids")
            pairs.append((parts[0], parts[1]))
    return AssocPairSet(
        pairs=pairs, pair_splits=[frozenset()] * len(pairs), provenance=provenance
    )
