"""PCA over tag vectors and the per-item mean PCA value used as context coordinate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable, Mapping

import numpy as np

from .embedding import EmbeddingModel
from .errors import DimensionError, FormatError
from .tagcorpus import Vocabulary, normalize_tag


@dataclass
class PcaModel:
    mean: np.ndarray          # (D,)
    components: np.ndarray    # (K, D), orthonormal rows
    eigenvalues: np.ndarray   # (K,), descending

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def write(self, fh: IO[str]) -> None:
        k, d = self.components.shape
        fh.write(f"{k} {d}\n")
        fh.write(" ".join(f"{v:.17g}" for v in self.mean) + "\n")
        for row in self.components:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        fh.write(" ".join(f"{v:.17g}" for v in self.eigenvalues) + "\n")

    @classmethod
    def read(cls, fh: IO[str]) -> "PcaModel":
        try:
            k, d = (int(x) for x in fh.readline().split())
            mean = np.array([float(x) for x in fh.readline().split()])
            comps = np.array([[float(x) for x in fh.readline().split()] for _ in range(k)])
            eig = np.array([float(x) for x in fh.readline().split()])
        except ValueError as exc:
            raise FormatError(f"malformed PCA file: {exc}") from None
        if mean.shape != (d,) or comps.shape != (k, d) or eig.shape != (k,):
            raise FormatError("PCA file dimensions do not match its header")
        return cls(mean, comps, eig)


def fit_pca(vectors: np.ndarray, n_components: int) -> PcaModel:
    """Eigendecompose the sample covariance (divisor M-1) and keep the top K pairs.

    Each component is flipped so that its largest-magnitude entry is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("vectors must be a 2-D array")
    m, d = x.shape
    if m < 2:
        raise DimensionError("PCA needs at least two vectors")
    if not 1 <= n_components <= min(m, d):
        raise DimensionError(f"n_components={n_components} outside [1, {min(m, d)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (m - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:n_components]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean, comps, evals)


def project(pca: PcaModel, vector: np.ndarray) -> np.ndarray:
    """``components @ (vector - mean)``; accepts one vector or a stack of rows."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape[-1] != pca.mean.shape[0]:
        raise DimensionError(f"expected dimension {pca.mean.shape[0]}, got {v.shape[-1]}")
    return (v - pca.mean) @ pca.components.T


def reconstruct(pca: PcaModel, coords: np.ndarray) -> np.ndarray:
    return np.asarray(coords) @ pca.components + pca.mean


@dataclass
class ItemContextIndex:
    values: dict[int, float]
    n_items: int | None = None

    @property
    def coverage(self) -> float:
        if not self.n_items:
            return 0.0
        return len(self.values) / self.n_items

    def get(self, item: int) -> float | None:
        return self.values.get(item)

    def __contains__(self, item: object) -> bool:
        return item in self.values

    def __len__(self) -> int:
        return len(self.values)

    def write(self, fh: IO[str], item_keys: list[str]) -> None:
        for item in sorted(self.values):
            fh.write(f"{item_keys[item]}\t{self.values[item]!r}\n")

    @classmethod
    def read(cls, fh: IO[str], item_ids: Mapping[str, int], n_items: int | None = None):
        values = {}
        for line in fh:
            if line.strip():
                key, val = line.rstrip("\n").split("\t")
                values[item_ids[key]] = float(val)
        return cls(values, n_items)


def tag_pca_values(pca: PcaModel, model: EmbeddingModel) -> np.ndarray:
    """First-component coordinate of every vocabulary tag's input vector."""
    return project(pca, model.input_vectors)[:, 0]


def item_mean_pca(
    item_tags: Mapping[int, Iterable[str]],
    pca: PcaModel,
    model: EmbeddingModel,
    n_items: int | None = None,
) -> ItemContextIndex:
    """Mean 1-D PCA value over each item's distinct in-vocabulary tags."""
    per_tag = tag_pca_values(pca, model)
    idx = model.vocab.index
    values = {}
    for item, tags in item_tags.items():
        ids = {idx[t] for t in (normalize_tag(r) for r in tags) if t in idx}
        if ids:
            values[item] = float(np.mean(per_tag[sorted(ids)]))
    return ItemContextIndex(values, n_items)


def emit_scatter(
    vocab: Vocabulary,
    model: EmbeddingModel,
    min_count: float,
    out: IO[str],
    pca: PcaModel | None = None,
) -> int:
    """Write ``tag x y count`` rows for tags whose count is >= ``min_count``.

    The 2-D PCA is fitted on the whole vocabulary unless one is supplied.
    Returns the number of data rows written.
    """
    if pca is None:
        pca = fit_pca(model.input_vectors, 2)
    if pca.n_components < 2:
        raise DimensionError("scatter output needs a PCA with at least 2 components")
    coords = project(pca, model.input_vectors)
    out.write("tag\tx\ty\tcount\n")
    rows = 0
    for i, tag in enumerate(vocab.tags):
        if vocab.counts[tag] >= min_count:
            out.write(f"{tag}\t{coords[i, 0]:.9g}\t{coords[i, 1]:.9g}\t{vocab.counts[tag]}\n")
            rows += 1
    return rows
