"""Skip-gram tag embeddings trained with a full softmax output layer.

Each tag sentence is an unordered tag set, so the context window is the
whole sentence: a sentence of k tags contributes every ordered pair of
distinct tags. For an input tag ``l`` and output tag ``o``::

    p(o | l) = exp(out[o] . in[l]) / sum_t exp(out[t] . in[l])

and training minimizes the mean negative log-likelihood of all pairs by
plain per-pair SGD with exact gradients (no sampling approximation).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import DivergenceError, FormatError, UnknownTagError, UntrainableCorpusError
from .tagcorpus import TagSentence, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 50
    epochs: int = 20
    learning_rate: float = 0.025
    min_lr_fraction: float = 1e-4
    rng_seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        # epochs == 0 is accepted and means "leave the model untouched"
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class EmbeddingModel:
    vocab: Vocabulary
    input_vectors: np.ndarray
    output_vectors: np.ndarray
    loss_trace: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.input_vectors.shape[1]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.vocab, self.input_vectors.copy(), self.output_vectors.copy(), list(self.loss_trace)
        )

    def _id(self, tag: str | int) -> int:
        if isinstance(tag, (int, np.integer)):
            if not 0 <= tag < len(self.vocab):
                raise UnknownTagError(tag)
            return int(tag)
        return self.vocab.id(tag)

    def write(self, fh: IO[str]) -> None:
        """Text format: ``|V| D`` header, then input rows, then output rows."""
        n, d = self.input_vectors.shape
        fh.write(f"{n} {d}\n")
        for block in (self.input_vectors, self.output_vectors):
            for tag, row in zip(self.vocab.tags, block):
                fh.write(tag + " " + " ".join(f"{v:.9g}" for v in row) + "\n")

    @classmethod
    def read(cls, fh: IO[str], vocab: Vocabulary) -> "EmbeddingModel":
        header = fh.readline().split()
        if len(header) != 2:
            raise FormatError("embedding header must be '|V| D'")
        n, d = int(header[0]), int(header[1])
        blocks = []
        for _ in range(2):
            rows = np.empty((n, d))
            for i in range(n):
                parts = fh.readline().rstrip("\n").rsplit(" ", d)
                if len(parts) != d + 1 or parts[0] != vocab.tags[i]:
                    raise FormatError(f"embedding row {i} does not match vocabulary")
                rows[i] = [float(x) for x in parts[1:]]
            blocks.append(rows)
        return cls(vocab, blocks[0], blocks[1])


def init_model(vocab: Vocabulary, config: TrainConfig) -> EmbeddingModel:
    """Inputs uniform in [-0.5/D, 0.5/D], outputs zero."""
    if len(vocab) < 2:
        raise UntrainableCorpusError(f"vocabulary of size {len(vocab)} cannot be trained")
    rng = np.random.default_rng(config.rng_seed)
    d = config.dim
    w_in = (rng.random((len(vocab), d)) - 0.5) / d
    return EmbeddingModel(vocab, w_in, np.zeros((len(vocab), d)))


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_distribution(model: EmbeddingModel, input_tag: str | int) -> np.ndarray:
    """p(. | input_tag) over the whole vocabulary."""
    h = model.input_vectors[model._id(input_tag)]
    return np.exp(_log_softmax(model.output_vectors @ h))


def softmax_prob(model: EmbeddingModel, input_tag: str | int, output_tag: str | int) -> float:
    return float(softmax_distribution(model, input_tag)[model._id(output_tag)])


def training_pairs(sentence: TagSentence | Sequence[str]) -> list[tuple[str, str]]:
    """All ordered pairs of distinct tags in the sentence."""
    tags = sentence.tags if isinstance(sentence, TagSentence) else tuple(sentence)
    return list(permutations(tags, 2))


def pair_ids(vocab: Vocabulary, sentences: Iterable[TagSentence]) -> np.ndarray:
    """Every sentence's training pairs as a (P, 2) array of vocabulary ids."""
    rows = []
    for s in sentences:
        ids = [vocab.index[t] for t in s.tags if t in vocab.index]
        rows.extend(permutations(ids, 2))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _as_ids(model: EmbeddingModel, pairs) -> np.ndarray:
    arr = np.asarray(pairs)
    if arr.size and arr.dtype.kind not in "iu":
        arr = np.array([[model._id(a), model._id(b)] for a, b in pairs], dtype=np.int64)
    return arr.reshape(-1, 2)


def nll_loss(model: EmbeddingModel, pairs) -> float:
    """Mean of -log p(o | l) over ``pairs`` (tag strings or vocabulary ids)."""
    ids = _as_ids(model, pairs)
    if len(ids) == 0:
        raise ValueError("loss is undefined for an empty pair list")
    logp = _log_softmax(model.input_vectors[ids[:, 0]] @ model.output_vectors.T)
    return float(-logp[np.arange(len(ids)), ids[:, 1]].mean())


def nll_gradients(model: EmbeddingModel, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of :func:`nll_loss` w.r.t. (input_vectors, output_vectors)."""
    ids = _as_ids(model, pairs)
    n = len(ids)
    h = model.input_vectors[ids[:, 0]]
    g = np.exp(_log_softmax(h @ model.output_vectors.T))
    g[np.arange(n), ids[:, 1]] -= 1.0
    g /= n
    grad_out = g.T @ h
    grad_in = np.zeros_like(model.input_vectors)
    np.add.at(grad_in, ids[:, 0], g @ model.output_vectors)
    return grad_in, grad_out


def sgd_pass(
    w_in: np.ndarray,
    w_out: np.ndarray,
    pairs: np.ndarray,
    lr: np.ndarray,
    epoch: int = 0,
) -> float:
    """Apply one SGD step per row of ``pairs`` in order, in place.

    ``lr[k]`` is the step size for pair ``k``. Returns the mean pre-update loss.
    """
    total = 0.0
    for k in range(len(pairs)):
        l, o = pairs[k]
        h = w_in[l]
        s = w_out @ h
        s -= s.max()
        e = np.exp(s)
        z = e.sum()
        loss = math.log(z) - s[o]
        if not math.isfinite(loss):
            raise DivergenceError(epoch)
        total += loss
        g = e / z
        g[o] -= 1.0
        step = lr[k]
        grad_h = w_out.T @ g
        w_out -= step * np.outer(g, h)
        w_in[l] -= step * grad_h
    return total / max(len(pairs), 1)


def train(
    model: EmbeddingModel, sentences: Iterable[TagSentence], config: TrainConfig
) -> EmbeddingModel:
    """Train a copy of ``model``; the returned model carries the per-epoch
    full-corpus mean NLL in ``loss_trace``."""
    trained = model.copy()
    pairs = pair_ids(model.vocab, sentences)
    if config.epochs == 0:
        return trained
    if len(pairs) == 0:
        raise UntrainableCorpusError("corpus yields no training pairs")

    rng = np.random.default_rng([config.rng_seed, 1])
    total_steps = config.epochs * len(pairs)
    floor = config.learning_rate * config.min_lr_fraction
    w_in, w_out = trained.input_vectors, trained.output_vectors
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs)) if config.shuffle else np.arange(len(pairs))
        t = np.arange(epoch * len(pairs), (epoch + 1) * len(pairs))
        lr = np.maximum(config.learning_rate * (1.0 - t / total_steps), floor)
        sgd_pass(w_in, w_out, pairs[order], lr, epoch)
        loss = nll_loss(trained, pairs)
        if not (math.isfinite(loss) and np.isfinite(w_in).all() and np.isfinite(w_out).all()):
            raise DivergenceError(epoch)
        trained.loss_trace.append(loss)
        log.debug("epoch %d loss %.6f", epoch, loss)
    return trained


def tag_vector(model: EmbeddingModel, tag: str | int, which: str = "input") -> np.ndarray:
    if which == "input":
        return model.input_vectors[model._id(tag)].copy()
    if which == "output":
        return model.output_vectors[model._id(tag)].copy()
    raise ValueError("which must be 'input' or 'output'")


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.where(norms == 0, 1.0, norms)
    return unit @ unit.T
