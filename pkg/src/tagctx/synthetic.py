"""Planted-context synthetic listening data in the ingest file formats.

Every item belongs to one latent context and its (single) artist is tagged
with a few tags from that context's private pool, plus an occasional tag
from a shared noise pool. Each item carries only a small subset of its
pool, so two items of the same context often share no tag at all; the
context is only recoverable through tag co-occurrence across items.

Contexts are ordered along a latent axis (think calm -> energetic):
adjacent contexts share a few "bridge" descriptors, and an item picks one
of the bridge tags it borders with probability ``bridge_prob``. Setting
``bridge_prob=0`` makes the contexts exchangeable.

A session draws a context from the user's context mix and then each play
comes from that context with probability ``fidelity`` (else from the whole
catalog), weighted by the user's personal item affinities.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .ingest import format_timestamp

BASE_TIME = 1_230_768_000  # 2009-01-01T00:00:00Z


@dataclass(frozen=True)
class SyntheticSpec:
    n_contexts: int = 4
    items_per_context: int = 50
    tags_per_context: int = 16
    tags_per_item: int = 3
    noise_tags: int = 8
    noise_prob: float = 0.3
    bridge_tags: int = 3
    bridge_prob: float = 0.9
    users: int = 30
    sessions_per_user: int = 40
    session_length: int = 10
    fidelity: float = 0.9
    popularity_exponent: float = 0.8
    taste_sigma: float = 1.0
    context_concentration: float = 2.0

    def __post_init__(self):
        if self.n_contexts < 1 or self.items_per_context < 1 or self.users < 1:
            raise ValueError("contexts, items and users must be positive")
        if not 0.5 < self.fidelity <= 1.0:
            raise ValueError("fidelity must lie in (0.5, 1]")
        if not 1 <= self.tags_per_item <= self.tags_per_context:
            raise ValueError("tags_per_item must lie in [1, tags_per_context]")
        if self.session_length < 1 or self.sessions_per_user < 1:
            raise ValueError("sessions need at least one play")

    @property
    def n_items(self) -> int:
        return self.n_contexts * self.items_per_context


@dataclass
class SyntheticData:
    play_lines: list[str]
    tag_csv: str
    item_context: dict[str, int]  # track key -> context
    tag_context: dict[str, int]   # tag -> context, -1 for noise tags

    def play_log(self) -> str:
        return "".join(line + "\n" for line in self.play_lines)


def context_tag(c: int, j: int) -> str:
    return f"ctx{c} tag{j}"


def noise_tag(j: int) -> str:
    return f"noise{j}"


def bridge_tag(c: int, j: int) -> str:
    """The j-th descriptor shared by contexts c and c + 1."""
    return f"bridge{c}-{c + 1} tag{j}"


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> SyntheticData:
    rng = np.random.default_rng(seed)
    n_items, C = spec.n_items, spec.n_contexts
    item_ctx = np.repeat(np.arange(C), spec.items_per_context)
    tracks = [f"track{i:05d}" for i in range(n_items)]
    artists = [f"artist{i:05d}" for i in range(n_items)]

    tag_context = {context_tag(c, j): c for c in range(C) for j in range(spec.tags_per_context)}
    tag_context.update({noise_tag(j): -1 for j in range(spec.noise_tags)})
    tag_context.update({bridge_tag(c, j): -1 for c in range(C - 1) for j in range(spec.bridge_tags)})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["artist_mbid", "tags"])
    for i in range(n_items):
        picks = rng.choice(spec.tags_per_context, spec.tags_per_item, replace=False)
        tags = [context_tag(int(item_ctx[i]), int(j)) for j in sorted(picks)]
        if spec.noise_tags and rng.random() < spec.noise_prob:
            tags.append(noise_tag(int(rng.integers(spec.noise_tags))))
        c = int(item_ctx[i])
        sides = [b for b in (c - 1, c) if 0 <= b < C - 1]
        if spec.bridge_tags and sides and rng.random() < spec.bridge_prob:
            side = sides[int(rng.integers(len(sides)))]
            tags.append(bridge_tag(side, int(rng.integers(spec.bridge_tags))))
        writer.writerow([artists[i], ";".join(tags)])

    # global per-context popularity (Zipf over a random within-context ranking)
    popularity = np.empty(n_items)
    for c in range(C):
        members = np.flatnonzero(item_ctx == c)
        ranks = rng.permutation(len(members)) + 1
        popularity[members] = ranks ** -spec.popularity_exponent

    lines = []
    for u in range(spec.users):
        user = f"user{u:03d}"
        taste = popularity * rng.lognormal(0.0, spec.taste_sigma, n_items)
        mix = rng.dirichlet(np.full(C, spec.context_concentration))
        per_ctx = []
        for c in range(C):
            w = np.where(item_ctx == c, taste, 0.0)
            per_ctx.append(w / w.sum())
        overall = taste / taste.sum()
        t = BASE_TIME + int(rng.integers(0, 86_400))
        for _ in range(spec.sessions_per_user):
            c = int(rng.choice(C, p=mix))
            for q in range(spec.session_length):
                dist = per_ctx[c] if rng.random() < spec.fidelity else overall
                item = int(rng.choice(n_items, p=dist))
                lines.append("\t".join([user, format_timestamp(t), artists[item],
                                        f"Artist {item}", tracks[item], f"Song {item}"]))
                if q < spec.session_length - 1:
                    t += int(rng.integers(120, 601))
            t += int(rng.integers(3_600, 2 * 86_400))
    item_context = {tracks[i]: int(item_ctx[i]) for i in range(n_items)}
    return SyntheticData(lines, buf.getvalue(), item_context, tag_context)


def two_community_spec(**overrides) -> SyntheticSpec:
    """Two exchangeable communities of 40 items each, perfectly faithful sessions."""
    base = dict(n_contexts=2, items_per_context=40, fidelity=1.0, bridge_prob=0.0,
                users=5, sessions_per_user=5)
    base.update(overrides)
    return SyntheticSpec(**base)
