"""Tag normalization, per-item tag sentences and the frequency-filtered vocabulary."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import IO, Iterable, Mapping

from .errors import EmptyCorpusError, FormatError, UnknownTagError

DEFAULT_MIN_COUNT = 10


@dataclass(frozen=True)
class TagSentence:
    item_id: int
    tags: tuple[str, ...]


class Vocabulary:
    """Tag <-> dense id bijection with per-tag occurrence counts.

    ``counts`` are the totals observed before min-count filtering.
    """

    def __init__(self, tags: Iterable[str], counts: Mapping[str, int], min_count: int = 1):
        self.tags: list[str] = list(tags)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tags)}
        if len(self.index) != len(self.tags):
            raise ValueError("duplicate tag in vocabulary")
        self.counts: dict[str, int] = {t: int(counts[t]) for t in self.tags}
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.tags)

    def __contains__(self, tag: object) -> bool:
        return tag in self.index

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.tags == other.tags
            and self.counts == other.counts
        )

    def id(self, tag: str) -> int:
        try:
            return self.index[tag]
        except KeyError:
            raise UnknownTagError(tag) from None

    def write(self, fh: IO[str]) -> None:
        for t in self.tags:
            fh.write(f"{t}\t{self.counts[t]}\n")

    @classmethod
    def read(cls, fh: IO[str], min_count: int = 1) -> "Vocabulary":
        tags, counts = [], {}
        for line in fh:
            if not line.strip():
                continue
            try:
                tag, count = line.rstrip("\n").rsplit("\t", 1)
                counts[tag] = int(count)
            except ValueError:
                raise FormatError(f"bad vocabulary line: {line!r}") from None
            tags.append(tag)
        return cls(tags, counts, min_count)


def normalize_tag(raw: str) -> str:
    """Lowercase, NFC, trim and collapse whitespace. An empty result means drop."""
    text = unicodedata.normalize("NFC", raw).lower()
    # casefolding can denormalize a few code points; renormalize
    return " ".join(unicodedata.normalize("NFC", text).split())


def build_sentences(item_tags: Mapping[int, Iterable[str]]) -> list[TagSentence]:
    """One deduplicated sentence per item with at least one surviving tag,
    in ascending item order, tags in first-appearance order."""
    sentences = []
    for item in sorted(item_tags):
        seen: dict[str, None] = {}
        for raw in item_tags[item]:
            tag = normalize_tag(raw)
            if tag:
                seen.setdefault(tag, None)
        if seen:
            sentences.append(TagSentence(item, tuple(seen)))
    return sentences


def build_vocabulary(
    sentences: Iterable[TagSentence], min_count: int = DEFAULT_MIN_COUNT
) -> tuple[Vocabulary, list[TagSentence]]:
    """Drop tags occurring fewer than ``min_count`` times.

    Vocabulary ids follow descending count, ties broken alphabetically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    sentences = list(sentences)
    counts = Counter(t for s in sentences for t in s.tags)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    vocab = Vocabulary(kept, counts, min_count)
    filtered = []
    for s in sentences:
        tags = tuple(t for t in s.tags if t in vocab.index)
        if tags:
            filtered.append(TagSentence(s.item_id, tags))
    if not filtered:
        raise EmptyCorpusError(f"no tag survives min_count={min_count}")
    return vocab, filtered


def write_sentences(sentences: Iterable[TagSentence], item_keys: list[str], fh: IO[str]) -> None:
    for s in sentences:
        fh.write("\t".join([item_keys[s.item_id], *s.tags]) + "\n")


def read_sentences(fh: IO[str], item_ids: Mapping[str, int]) -> list[TagSentence]:
    out = []
    for line in fh:
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        out.append(TagSentence(item_ids[parts[0]], tuple(parts[1:])))
    return out
