"""Context-free collaborative filtering: user-based k-NN, SVD, SVD++ and NMF.

Every model scores the whole catalog for a user through ``score_all``.
Scores are left unclamped for ranking (clamping creates artificial ties);
``predict`` returns the rating clamped to [1, 5].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .errors import ColdUserError, DivergenceError, FormatError
from .ingest import RatingMatrix

log = logging.getLogger(__name__)

RATING_MIN, RATING_MAX = 1.0, 5.0
METHODS = ("knn", "svd", "svdpp", "nmf")


@dataclass
class CandidateList:
    user: int
    items: np.ndarray
    scores: np.ndarray
    exclusions: frozenset[int] = frozenset()

    def __len__(self) -> int:
        return len(self.items)


class Recommender:
    n_users: int
    n_items: int
    user_seen: np.ndarray

    def _check_user(self, user: int) -> None:
        if not (0 <= user < self.n_users and self.user_seen[user]):
            raise ColdUserError(user)

    def knows(self, user: int) -> bool:
        return 0 <= user < self.n_users and bool(self.user_seen[user])

    def score_all(self, user: int) -> np.ndarray:
        raise NotImplementedError

    def score(self, user: int, item: int) -> float:
        return float(self.score_all(user)[item])

    def predict(self, user: int, item: int) -> float:
        return float(np.clip(self.score(user, item), RATING_MIN, RATING_MAX))


def top_m(model: Recommender, user: int, m: int, exclusions: Iterable[int] = ()) -> CandidateList:
    """The ``m`` best-scoring non-excluded items, ties broken by ascending item id."""
    if m < 1:
        raise ValueError("m must be >= 1")
    excluded = frozenset(int(i) for i in exclusions)
    scores = model.score_all(user)
    keep = np.ones(len(scores), dtype=bool)
    keep[[i for i in excluded if 0 <= i < len(scores)]] = False
    eligible = np.flatnonzero(keep)
    if len(eligible) == 0:
        return CandidateList(user, eligible, np.empty(0), excluded)
    s = scores[eligible]
    order = np.lexsort((eligible, -s))[:m]
    return CandidateList(user, eligible[order], s[order], excluded)


# --- k-NN ------------------------------------------------------------------

def user_similarities(dense: np.ndarray, mask: np.ndarray, kind: str = "cosine",
                      min_overlap: int = 2) -> np.ndarray:
    """User-user similarity over co-rated items.

    ``cosine`` centers each rating on the user's overall mean; ``pearson``
    centers on the means over the co-rated items of each pair. Pairs with
    fewer than ``min_overlap`` co-rated items, or zero variance, get 0.
    """
    m = mask.astype(np.float64)
    x = np.where(mask, dense, 0.0)
    overlap = m @ m.T
    with np.errstate(invalid="ignore", divide="ignore"):
        if kind == "cosine":
            counts = m.sum(axis=1)
            means = np.divide(x.sum(axis=1), counts, out=np.zeros(len(x)), where=counts > 0)
            c = np.where(mask, x - means[:, None], 0.0)
            num = c @ c.T
            den = np.sqrt((c * c) @ m.T) * np.sqrt(m @ (c * c).T)
        elif kind == "pearson":
            su = x @ m.T
            sv = su.T
            n = np.where(overlap > 0, overlap, 1.0)
            cov = x @ x.T - su * sv / n
            var_u = (x * x) @ m.T - su * su / n
            var_v = var_u.T
            num = cov
            den = np.sqrt(np.clip(var_u, 0, None) * np.clip(var_v, 0, None))
        else:
            raise ValueError(f"unknown similarity {kind!r}")
        sim = np.where((overlap >= min_overlap) & (den > 1e-12), num / den, 0.0)
    np.fill_diagonal(sim, 0.0)
    # drop round-off so exact ties (e.g. +-1 on two co-rated items) break by user id
    return np.round(np.clip(sim, -1.0, 1.0), 12)


class KnnModel(Recommender):
    """User-based neighborhood model with mean-centered aggregation::

        score(u, i) = mean_u + sum_v sim(u,v) (r_vi - mean_v) / sum_v |sim(u,v)|

    over the neighbors v in u's top-k list that rated i, and ``mean_u``
    when none did.
    """

    variant = "knn"

    def __init__(self, dense: np.ndarray, mask: np.ndarray, k: int, similarity: str,
                 means: np.ndarray, neighbors: list[np.ndarray], neighbor_sims: list[np.ndarray]):
        self.dense, self.mask = dense, mask
        self.k, self.similarity = k, similarity
        self.means = means
        self.neighbors, self.neighbor_sims = neighbors, neighbor_sims
        self.n_users, self.n_items = dense.shape
        self.user_seen = mask.any(axis=1)

    def score_all(self, user: int) -> np.ndarray:
        self._check_user(user)
        nb, sims = self.neighbors[user], self.neighbor_sims[user]
        base = np.full(self.n_items, self.means[user])
        if len(nb) == 0:
            return base
        rated = self.mask[nb].astype(np.float64)
        dev = np.where(self.mask[nb], self.dense[nb] - self.means[nb, None], 0.0)
        num = sims @ dev
        den = np.abs(sims) @ rated
        return np.where(den > 0, base + num / np.where(den > 0, den, 1.0), base)

    def write(self, fh: IO[str]) -> None:
        fh.write(f"variant knn\ndims {self.n_users} {self.n_items}\n")
        fh.write(f"k {self.k}\nsimilarity {self.similarity}\n")
        users, items = np.nonzero(self.mask)
        _write_array(fh, "ratings", np.column_stack([users, items, self.dense[users, items]]))
        _write_array(fh, "means", self.means)
        for u in range(self.n_users):
            _write_array(fh, f"neighbors_{u}",
                         np.column_stack([self.neighbors[u], self.neighbor_sims[u]]).reshape(-1, 2))


def train_knn(ratings: RatingMatrix, k: int = 40, similarity: str = "cosine") -> KnnModel:
    if k < 1:
        raise ValueError("k must be >= 1")
    dense = ratings.dense()
    mask = np.zeros(dense.shape, dtype=bool)
    for (u, i) in ratings.ratings:
        mask[u, i] = True
    counts = mask.sum(axis=1)
    means = np.divide(dense.sum(axis=1), counts, out=np.zeros(len(dense)), where=counts > 0)
    sim = user_similarities(dense, mask, similarity)
    neighbors, neighbor_sims = [], []
    ids = np.arange(len(dense))
    for u in range(len(dense)):
        # negatively correlated users would push toward disliked items; keep positive ones
        cand = ids[(sim[u] > 0) & (ids != u)]
        order = np.lexsort((cand, -sim[u, cand]))[:k]
        neighbors.append(cand[order])
        neighbor_sims.append(sim[u, cand[order]])
    return KnnModel(dense, mask, k, similarity, means, neighbors, neighbor_sims)


# --- matrix factorization --------------------------------------------------

@dataclass(frozen=True)
class MfConfig:
    factors: int = 20
    epochs: int = 30
    lr: float = 0.005
    reg: float = 0.02
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.factors < 1 or self.epochs < 0 or self.lr <= 0 or self.reg < 0:
            raise ValueError(f"invalid MF configuration {self}")


@dataclass
class MfModel(Recommender):
    variant: str
    mu: float
    user_bias: np.ndarray
    item_bias: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    implicit_factors: np.ndarray | None
    user_items: list[np.ndarray]
    user_seen: np.ndarray
    item_seen: np.ndarray
    user_means: np.ndarray
    rmse_trace: list[float] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    def user_vector(self, user: int) -> np.ndarray:
        p = self.user_factors[user]
        if self.variant == "svdpp":
            rated = self.user_items[user]
            if len(rated):
                p = p + self.implicit_factors[rated].sum(axis=0) / math.sqrt(len(rated))
        return p

    def score_all(self, user: int) -> np.ndarray:
        self._check_user(user)
        p = self.user_vector(user)
        if self.variant == "nmf":
            scores = self.item_factors @ p
            return np.where(self.item_seen, scores, self.user_means[user])
        scores = self.mu + self.user_bias[user] + self.item_bias + self.item_factors @ p
        return np.where(self.item_seen, scores, self.mu + self.user_bias[user])

    def write(self, fh: IO[str]) -> None:
        fh.write(f"variant {self.variant}\n")
        fh.write(f"dims {self.n_users} {self.n_items} {self.user_factors.shape[1]}\n")
        fh.write(f"mu {self.mu!r}\n")
        _write_array(fh, "user_bias", self.user_bias)
        _write_array(fh, "item_bias", self.item_bias)
        _write_array(fh, "user_factors", self.user_factors)
        _write_array(fh, "item_factors", self.item_factors)
        if self.implicit_factors is not None:
            _write_array(fh, "implicit_factors", self.implicit_factors)
        _write_array(fh, "user_means", self.user_means)
        _write_array(fh, "item_seen", self.item_seen.astype(np.float64))
        pairs = [(u, i) for u, items in enumerate(self.user_items) for i in items]
        _write_array(fh, "rated", np.array(pairs, dtype=np.float64).reshape(-1, 2))


def _prepare(ratings: RatingMatrix):
    users, items, vals = ratings.triples()
    if len(vals) == 0:
        raise ValueError("cannot factorize an empty rating matrix")
    m, n = ratings.n_users, ratings.n_items
    user_items = [np.empty(0, dtype=np.int64) for _ in range(m)]
    for u, rated in ratings.user_items().items():
        user_items[u] = np.array(rated, dtype=np.int64)
    user_seen = np.zeros(m, dtype=bool)
    user_seen[users] = True
    item_seen = np.zeros(n, dtype=bool)
    item_seen[items] = True
    sums = np.bincount(users, vals, minlength=m)
    counts = np.bincount(users, minlength=m)
    user_means = np.divide(sums, counts, out=np.zeros(m), where=counts > 0)
    return users, items, vals, user_items, user_seen, item_seen, user_means


def _rmse(model: MfModel, users, items, vals) -> float:
    if model.variant == "nmf":
        est = np.einsum("ij,ij->i", model.user_factors[users], model.item_factors[items])
    else:
        pu = np.stack([model.user_vector(u) for u in range(model.n_users)])
        est = (model.mu + model.user_bias[users] + model.item_bias[items]
               + np.einsum("ij,ij->i", pu[users], model.item_factors[items]))
    return float(np.sqrt(np.mean((vals - est) ** 2)))


def _finite(model: MfModel) -> bool:
    arrays = [model.user_bias, model.item_bias, model.user_factors, model.item_factors]
    if model.implicit_factors is not None:
        arrays.append(model.implicit_factors)
    return math.isfinite(model.mu) and all(np.isfinite(a).all() for a in arrays)


def _svd_epoch(model: MfModel, users, items, vals, order, cfg: MfConfig) -> None:
    mu, bu, bi = model.mu, model.user_bias, model.item_bias
    P, Q = model.user_factors, model.item_factors
    lr, reg = cfg.lr, cfg.reg
    for k in order:
        u, i, r = users[k], items[k], vals[k]
        pu, qi = P[u], Q[i]
        err = r - (mu + bu[u] + bi[i] + pu @ qi)
        bu[u] += lr * (err - reg * bu[u])
        bi[i] += lr * (err - reg * bi[i])
        pu_old = pu.copy()
        P[u] += lr * (err * qi - reg * pu)
        Q[i] += lr * (err * pu_old - reg * qi)


def _svdpp_epoch(model: MfModel, users, items, vals, rng, cfg: MfConfig,
                 by_user: list[np.ndarray]) -> None:
    """One SGD pass visiting users in random order, each user's ratings shuffled.

    Within a user's block every rating applies the same affine update
    ``y_j <- a*y_j + b`` to all of that user's implicit factors, so the
    update is accumulated in (scale, offset) form and applied once per block.
    The result equals applying it rating by rating.
    """
    mu, bu, bi = model.mu, model.user_bias, model.item_bias
    P, Q, Y = model.user_factors, model.item_factors, model.implicit_factors
    lr, reg = cfg.lr, cfg.reg
    shrink = 1.0 - lr * reg
    for u in rng.permutation(len(by_user)):
        idx = by_user[u]
        if len(idx) == 0:
            continue
        rated = model.user_items[u]
        norm = 1.0 / math.sqrt(len(rated))
        y_sum = Y[rated].sum(axis=0)
        scale, offset = 1.0, np.zeros(Y.shape[1])
        n_rated = len(rated)
        for k in idx[rng.permutation(len(idx))]:
            i, r = items[k], vals[k]
            # current sum of y_j is scale * y_sum + n_rated * offset
            implicit = norm * (scale * y_sum + n_rated * offset)
            qi = Q[i].copy()
            p_eff = P[u] + implicit
            err = r - (mu + bu[u] + bi[i] + qi @ p_eff)
            bu[u] += lr * (err - reg * bu[u])
            bi[i] += lr * (err - reg * bi[i])
            P[u] += lr * (err * qi - reg * P[u])
            Q[i] += lr * (err * p_eff - reg * qi)
            scale *= shrink
            offset = shrink * offset + lr * err * norm * qi
        Y[rated] = scale * Y[rated] + offset


def _nmf_epoch(model: MfModel, users, items, vals, cfg: MfConfig) -> None:
    """Regularized multiplicative updates, users first then items."""
    P, Q = model.user_factors, model.item_factors
    m, n = P.shape[0], Q.shape[0]
    n_u = np.bincount(users, minlength=m)[:, None]
    n_i = np.bincount(items, minlength=n)[:, None]
    tiny = 1e-12

    est = np.einsum("ij,ij->i", P[users], Q[items])
    num = np.zeros_like(P)
    den = np.zeros_like(P)
    np.add.at(num, users, Q[items] * vals[:, None])
    np.add.at(den, users, Q[items] * est[:, None])
    den += n_u * cfg.reg * P
    np.divide(P * num, den, out=P, where=den > tiny)

    est = np.einsum("ij,ij->i", P[users], Q[items])
    num = np.zeros_like(Q)
    den = np.zeros_like(Q)
    np.add.at(num, items, P[users] * vals[:, None])
    np.add.at(den, items, P[users] * est[:, None])
    den += n_i * cfg.reg * Q
    np.divide(Q * num, den, out=Q, where=den > tiny)


def train_mf(ratings: RatingMatrix, variant: str = "svd", config: MfConfig = MfConfig()) -> MfModel:
    """Fit SVD, SVD++ (SGD on squared error with L2) or NMF (multiplicative updates)."""
    if variant not in ("svd", "svdpp", "nmf"):
        raise ValueError(f"unknown MF variant {variant!r}")
    users, items, vals, user_items, user_seen, item_seen, user_means = _prepare(ratings)
    m, n, f = ratings.n_users, ratings.n_items, config.factors
    rng = np.random.default_rng(config.seed)
    if variant == "nmf":
        P = rng.uniform(0.0, 1.0, (m, f))
        Q = rng.uniform(0.0, 1.0, (n, f))
        mu = 0.0
    else:
        P = rng.normal(0.0, config.init_std, (m, f))
        Q = rng.normal(0.0, config.init_std, (n, f))
        mu = float(vals.mean())
    Y = rng.normal(0.0, config.init_std, (n, f)) if variant == "svdpp" else None
    model = MfModel(variant, mu, np.zeros(m), np.zeros(n), P, Q, Y, user_items,
                    user_seen, item_seen, user_means)
    by_user = [np.flatnonzero(users == u) for u in range(m)] if variant == "svdpp" else []

    for epoch in range(config.epochs):
        if variant == "svd":
            _svd_epoch(model, users, items, vals, rng.permutation(len(vals)), config)
        elif variant == "svdpp":
            _svdpp_epoch(model, users, items, vals, rng, config, by_user)
        else:
            _nmf_epoch(model, users, items, vals, config)
        if not _finite(model):
            raise DivergenceError(epoch, "parameter")
        model.rmse_trace.append(_rmse(model, users, items, vals))
        log.debug("%s epoch %d rmse %.5f", variant, epoch, model.rmse_trace[-1])
    return model


def train_cf(ratings: RatingMatrix, method: str, *, k: int = 40, similarity: str = "cosine",
             mf: MfConfig = MfConfig()) -> Recommender:
    if method == "knn":
        return train_knn(ratings, k, similarity)
    return train_mf(ratings, method, mf)


# --- persistence -----------------------------------------------------------

def _write_array(fh: IO[str], name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    fh.write(f"array {name} {arr.shape[0]} {arr.shape[1]}\n")
    for row in arr:
        fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def _read_blocks(fh: IO[str]) -> tuple[dict[str, list[str]], dict[str, np.ndarray]]:
    header: dict[str, list[str]] = {}
    arrays: dict[str, np.ndarray] = {}
    line = fh.readline()
    while line:
        parts = line.split()
        if not parts:
            line = fh.readline()
            continue
        if parts[0] == "array":
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            data = np.empty((rows, cols))
            for r in range(rows):
                data[r] = [float(x) for x in fh.readline().split()]
            arrays[name] = data
        else:
            header[parts[0]] = parts[1:]
        line = fh.readline()
    return header, arrays


def read_model(fh: IO[str]) -> Recommender:
    header, arrays = _read_blocks(fh)
    try:
        variant = header["variant"][0]
        dims = [int(x) for x in header["dims"]]
    except (KeyError, IndexError):
        raise FormatError("model file lacks variant/dims header") from None
    if variant == "knn":
        m, n = dims
        dense = np.zeros((m, n))
        mask = np.zeros((m, n), dtype=bool)
        for u, i, r in arrays["ratings"]:
            dense[int(u), int(i)] = r
            mask[int(u), int(i)] = True
        neighbors = [arrays[f"neighbors_{u}"][:, 0].astype(np.int64) for u in range(m)]
        sims = [arrays[f"neighbors_{u}"][:, 1].copy() for u in range(m)]
        return KnnModel(dense, mask, int(header["k"][0]), header["similarity"][0],
                        arrays["means"][:, 0], neighbors, sims)
    m, n, _ = dims
    user_items = [[] for _ in range(m)]
    for u, i in arrays["rated"]:
        user_items[int(u)].append(int(i))
    user_seen = np.array([len(x) > 0 for x in user_items])
    return MfModel(
        variant, float(header["mu"][0]), arrays["user_bias"][:, 0], arrays["item_bias"][:, 0],
        arrays["user_factors"], arrays["item_factors"], arrays.get("implicit_factors"),
        [np.array(x, dtype=np.int64) for x in user_items], user_seen,
        arrays["item_seen"][:, 0] > 0, arrays["user_means"][:, 0],
    )


def write_candidates(lists: Iterable[CandidateList], user_keys: list[str],
                     item_keys: list[str], fh: IO[str]) -> None:
    for cl in lists:
        for rank, (item, s) in enumerate(zip(cl.items, cl.scores), start=1):
            fh.write(f"{user_keys[cl.user]}\t{rank}\t{item_keys[item]}\t{s:.9g}\n")
