"""Play-log and tag ingestion, sessionization, implicit ratings and splitting.

Play logs follow the Last.fm listening-history layout: six TAB-separated
columns ``user, timestamp, artist-id, artist-name, track-id, track-name``
with an ISO-8601 UTC timestamp and no header. Tags come from a CSV file
with an ``artist_mbid`` and a ``tags`` column.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import EmptyInputError, FormatError, PreconditionError

log = logging.getLogger(__name__)

DEFAULT_GAP_SECONDS = 900


class Interner:
    """Bijection between raw string keys and dense integers from 0."""

    def __init__(self, keys: Iterable[str] = ()):
        self._to_id: dict[str, int] = {}
        self._keys: list[str] = []
        for k in keys:
            self.intern(k)

    def intern(self, key: str) -> int:
        idx = self._to_id.get(key)
        if idx is None:
            idx = len(self._keys)
            self._to_id[key] = idx
            self._keys.append(key)
        return idx

    def id(self, key: str) -> int:
        return self._to_id[key]

    def get(self, key: str, default: int | None = None) -> int | None:
        return self._to_id.get(key, default)

    def key(self, idx: int) -> str:
        return self._keys[idx]

    def keys(self) -> list[str]:
        return list(self._keys)

    def as_dict(self) -> dict[str, int]:
        return dict(self._to_id)

    def __contains__(self, key: object) -> bool:
        return key in self._to_id

    def __len__(self) -> int:
        return len(self._keys)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Interner) and self._keys == other._keys


@dataclass
class Catalog:
    users: Interner = field(default_factory=Interner)
    items: Interner = field(default_factory=Interner)
    artists: Interner = field(default_factory=Interner)
    track_to_artist: dict[int, int] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)


@dataclass(frozen=True, slots=True)
class PlayEvent:
    user_id: int
    timestamp: int
    artist_id: int
    track_id: int


@dataclass(frozen=True)
class Session:
    user_id: int
    session_index: int
    items: tuple[int, ...]
    timestamps: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class TagAssignment:
    artist_id: str
    raw_tags: list[str]


@dataclass
class RatingMatrix:
    """Sparse user x item implicit ratings plus the play counts behind them."""

    n_users: int
    n_items: int
    ratings: dict[tuple[int, int], float]
    play_counts: dict[tuple[int, int], int]

    def __len__(self) -> int:
        return len(self.ratings)

    def get(self, user: int, item: int, default: float | None = None) -> float | None:
        return self.ratings.get((user, item), default)

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(users, items, ratings) arrays in ascending (user, item) order."""
        keys = sorted(self.ratings)
        users = np.array([k[0] for k in keys], dtype=np.int64)
        items = np.array([k[1] for k in keys], dtype=np.int64)
        vals = np.array([self.ratings[k] for k in keys], dtype=np.float64)
        return users, items, vals

    def user_items(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for u, i in sorted(self.ratings):
            out[u].append(i)
        return dict(out)

    def dense(self) -> np.ndarray:
        """Ratings as an n_users x n_items array with 0 for missing entries."""
        mat = np.zeros((self.n_users, self.n_items))
        for (u, i), r in self.ratings.items():
            mat[u, i] = r
        return mat


@dataclass
class ParseResult:
    events: list[PlayEvent]
    catalog: Catalog
    skipped: int


def parse_timestamp(text: str) -> int:
    """Parse an ISO-8601 timestamp as UTC and return whole epoch seconds."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(math.floor(dt.timestamp()))


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_play_log(stream: IO[str] | Iterable[str]) -> ParseResult:
    """Parse a six-column TSV play log.

    Malformed lines (wrong column count, bad or non-positive timestamp,
    empty user) are counted in ``skipped`` and otherwise ignored. Rows with
    an empty track or artist MBID fall back to a key built from the names,
    as the Last.fm dumps leave many MBIDs blank.
    """
    catalog = Catalog()
    rows: list[tuple[int, int, int, int, int]] = []
    skipped = 0
    for lineno, line in enumerate(stream):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            skipped += 1
            continue
        user, ts_text, artist_id, artist_name, track_id, track_name = parts
        if not user or not ts_text:
            skipped += 1
            continue
        try:
            ts = parse_timestamp(ts_text)
        except ValueError:
            skipped += 1
            continue
        artist_key = artist_id or artist_name
        if ts <= 0 or not artist_key:
            skipped += 1
            continue
        track_key = track_id or f"{artist_key}::{track_name}"
        u = catalog.users.intern(user)
        a = catalog.artists.intern(artist_key)
        t = catalog.items.intern(track_key)
        catalog.track_to_artist.setdefault(t, a)
        rows.append((u, ts, lineno, a, t))
    if not rows:
        raise EmptyInputError("play log contains no parseable lines")
    if skipped:
        log.info("skipped %d malformed play-log lines", skipped)
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    events = [PlayEvent(u, ts, a, t) for u, ts, _, a, t in rows]
    return ParseResult(events, catalog, skipped)


def segment_sessions(
    events: Sequence[PlayEvent], gap_seconds: int = DEFAULT_GAP_SECONDS
) -> list[Session]:
    """Cut each user's plays wherever consecutive plays are more than
    ``gap_seconds`` apart. A gap of exactly ``gap_seconds`` stays in-session."""
    if gap_seconds <= 0:
        raise ValueError("gap_seconds must be positive")
    sessions: list[Session] = []
    items: list[int] = []
    stamps: list[int] = []
    prev: PlayEvent | None = None
    index = 0

    def flush(user: int) -> None:
        nonlocal index
        if items:
            sessions.append(Session(user, index, tuple(items), tuple(stamps)))
            index += 1
            items.clear()
            stamps.clear()

    for ev in events:
        if prev is not None:
            if (ev.user_id, ev.timestamp) < (prev.user_id, prev.timestamp):
                raise PreconditionError("events must be sorted by (user, timestamp)")
            if ev.user_id != prev.user_id:
                flush(prev.user_id)
                index = 0
            elif ev.timestamp - prev.timestamp > gap_seconds:
                flush(prev.user_id)
        items.append(ev.track_id)
        stamps.append(ev.timestamp)
        prev = ev
    if prev is not None:
        flush(prev.user_id)
    return sessions


def session_events(sessions: Iterable[Session], catalog: Catalog) -> Iterator[PlayEvent]:
    """Flatten sessions back into play events."""
    for s in sessions:
        for item, ts in zip(s.items, s.timestamps):
            yield PlayEvent(s.user_id, ts, catalog.track_to_artist.get(item, -1), item)


def derive_implicit_ratings(events: Iterable[PlayEvent], catalog: Catalog) -> RatingMatrix:
    """Map play counts to ratings in [1, 5] through the per-user percentile.

    pct(u, i) is the share of u's distinct items whose count is <= c(u, i);
    the rating is ``1 + 4 * pct``.
    """
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for ev in events:
        counts[(ev.user_id, ev.track_id)] += 1
    per_user: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for (u, i), c in counts.items():
        per_user[u].append((i, c))

    ratings: dict[tuple[int, int], float] = {}
    for u, played in per_user.items():
        cs = np.sort(np.array([c for _, c in played]))
        n = len(cs)
        for i, c in played:
            at_or_below = int(np.searchsorted(cs, c, side="right"))
            ratings[(u, i)] = 1.0 + 4.0 * at_or_below / n
    return RatingMatrix(catalog.n_users, catalog.n_items, ratings, dict(counts))


def parse_tag_assignments(
    stream: IO[str] | Iterable[str], sep: str = ";"
) -> list[TagAssignment]:
    """Read the ``artist_mbid,tags`` CSV; ``sep`` splits the tag column."""
    reader = csv.DictReader(stream)
    fields = reader.fieldnames or []
    missing = {"artist_mbid", "tags"} - set(fields)
    if missing:
        raise FormatError(f"tag file lacks required column(s): {', '.join(sorted(missing))}")
    out = []
    for row in reader:
        raw = row.get("tags") or ""
        tags = [t for t in raw.split(sep) if t.strip()] if raw.strip() else []
        out.append(TagAssignment((row.get("artist_mbid") or "").strip(), tags))
    return out


def join_item_tags(catalog: Catalog, assignments: Iterable[TagAssignment]) -> dict[int, list[str]]:
    """Give every catalog track the raw tags of its artist (empty if untagged)."""
    by_artist: dict[str, list[str]] = defaultdict(list)
    for a in assignments:
        by_artist[a.artist_id].extend(a.raw_tags)
    out: dict[int, list[str]] = {}
    for item in range(catalog.n_items):
        artist = catalog.track_to_artist.get(item)
        key = catalog.artists.key(artist) if artist is not None else None
        out[item] = list(by_artist.get(key, [])) if key is not None else []
    return out


def split_sessions(
    sessions: Sequence[Session], train_fraction: float = 0.8, rng_seed: int = 0
) -> tuple[list[Session], list[Session]]:
    """Per-user random split; each user keeps floor(f * n), at least 1, in train.

    Both halves keep the input order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    by_user: dict[int, list[int]] = defaultdict(list)
    for pos, s in enumerate(sessions):
        by_user[s.user_id].append(pos)
    test_pos: set[int] = set()
    for user in sorted(by_user):
        positions = by_user[user]
        n = len(positions)
        if n < 2:
            log.info("user %d has a single session; kept entirely in train", user)
            continue
        n_train = max(1, math.floor(train_fraction * n + 1e-9))
        perm = rng.permutation(n)
        test_pos.update(positions[j] for j in perm[n_train:])
    train = [s for p, s in enumerate(sessions) if p not in test_pos]
    test = [s for p, s in enumerate(sessions) if p in test_pos]
    return train, test


# --- persistence -----------------------------------------------------------

def write_catalog(catalog: Catalog, fh: IO[str]) -> None:
    """Lines ``user|artist<TAB>raw`` and ``track<TAB>raw<TAB>artist-raw``, in id order."""
    for key in catalog.users.keys():
        fh.write(f"user\t{key}\n")
    for key in catalog.artists.keys():
        fh.write(f"artist\t{key}\n")
    for idx, key in enumerate(catalog.items.keys()):
        artist = catalog.track_to_artist.get(idx)
        fh.write(f"track\t{key}\t{catalog.artists.key(artist) if artist is not None else ''}\n")


def read_catalog(fh: IO[str]) -> Catalog:
    catalog = Catalog()
    pending: list[tuple[int, str]] = []
    for line in fh:
        parts = line.rstrip("\n").split("\t")
        kind = parts[0]
        if kind == "user":
            catalog.users.intern(parts[1])
        elif kind == "artist":
            catalog.artists.intern(parts[1])
        elif kind == "track":
            t = catalog.items.intern(parts[1])
            if len(parts) > 2 and parts[2]:
                pending.append((t, parts[2]))
        else:
            raise FormatError(f"unknown catalog record kind {kind!r}")
    for t, artist in pending:
        catalog.track_to_artist[t] = catalog.artists.id(artist)
    return catalog


def write_sessions(sessions: Iterable[Session], catalog: Catalog, fh: IO[str]) -> None:
    for s in sessions:
        user = catalog.users.key(s.user_id)
        for item, ts in zip(s.items, s.timestamps):
            fh.write(f"{user}\t{s.session_index}\t{catalog.items.key(item)}\t{ts}\n")


def read_sessions(fh: IO[str], catalog: Catalog) -> list[Session]:
    sessions: list[Session] = []
    cur: tuple[int, int] | None = None
    items: list[int] = []
    stamps: list[int] = []
    for line in fh:
        if not line.strip():
            continue
        user, idx, track, ts = line.rstrip("\n").split("\t")
        key = (catalog.users.id(user), int(idx))
        if key != cur:
            if cur is not None:
                sessions.append(Session(cur[0], cur[1], tuple(items), tuple(stamps)))
            cur, items, stamps = key, [], []
        items.append(catalog.items.id(track))
        stamps.append(int(ts))
    if cur is not None:
        sessions.append(Session(cur[0], cur[1], tuple(items), tuple(stamps)))
    return sessions


def write_ratings(ratings: RatingMatrix, catalog: Catalog, fh: IO[str]) -> None:
    for u, i in sorted(ratings.ratings):
        fh.write(
            f"{catalog.users.key(u)}\t{catalog.items.key(i)}\t"
            f"{ratings.play_counts[(u, i)]}\t{ratings.ratings[(u, i)]!r}\n"
        )


def read_ratings(fh: IO[str], catalog: Catalog) -> RatingMatrix:
    ratings: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    for line in fh:
        if not line.strip():
            continue
        user, item, count, rating = line.rstrip("\n").split("\t")
        key = (catalog.users.id(user), catalog.items.id(item))
        ratings[key] = float(rating)
        counts[key] = int(count)
    return RatingMatrix(catalog.n_users, catalog.n_items, ratings, counts)


def write_item_tags(item_tags: dict[int, list[str]], catalog: Catalog, fh: IO[str]) -> None:
    """One line per item: ``item<TAB>tag1<TAB>tag2...`` (raw tags)."""
    for item in sorted(item_tags):
        tags = [t.replace("\t", " ") for t in item_tags[item]]
        fh.write("\t".join([catalog.items.key(item), *tags]) + "\n")


def read_item_tags(fh: IO[str], catalog: Catalog) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for line in fh:
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        out[catalog.items.id(parts[0])] = parts[1:]
    return out
