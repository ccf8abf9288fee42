"""Server-side codebook lifecycle.

One codebook per layer comes from k-means over a gradient simulated on the
server's public data; the rest are k-means over pseudo-centroids pooled from
the previous round's clients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .learning import Dataset, Model, ModelState, TrainConfig, local_train
from .pq_codec import Codebook, CodecError, PseudoCentroidSet, is_power_of_two, split_subvectors
from .seeding import derive_rng, derive_seed


class DegenerateClusteringWarning(UserWarning):
    """Fewer distinct points than clusters; duplicate centroids were emitted."""


@dataclass(frozen=True)
class KMeansConfig:
    K: int
    max_iters: int = 25
    seed: int = 0
    tol: float = 1e-6

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0
    degenerate: bool = False

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(points, weights, K, rng) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((K, points.shape[1]))
    p = weights / weights.sum() if weights.sum() > 0 else np.full(n, 1.0 / n)
    centers[0] = points[rng.choice(n, p=p)]
    closest = np.einsum("nd,nd->n", points - centers[0], points - centers[0])
    for j in range(1, K):
        score = weights * closest
        if score.sum() <= 0:
            # weighted mass exhausted: fall back to plain distance, then to uniform
            score = closest.copy()
        if score.sum() <= 0:
            score = np.ones(n)
        centers[j] = points[rng.choice(n, p=score / score.sum())]
        d = points - centers[j]
        closest = np.minimum(closest, np.einsum("nd,nd->n", d, d))
    return centers


def kmeans(points, cfg: KMeansConfig, weights=None) -> KMeansResult:
    """Weighted Lloyd iterations from a k-means++ start.

    Deterministic for a given ``cfg.seed``. Empty clusters are re-seeded to the
    points farthest from their current centroid. When there are fewer distinct
    points than ``K`` duplicate centroids are returned and a
    :class:`DegenerateClusteringWarning` is raised.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("kmeans needs at least one point")
    n, K = X.shape[0], cfg.K
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.shape[0] != n:
            raise ValueError("weights must have one entry per point")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
    if w.sum() <= 0:
        w = np.ones(n)

    degenerate = np.unique(X, axis=0).shape[0] < K
    if degenerate:
        warnings.warn(
            f"{np.unique(X, axis=0).shape[0]} distinct points for K={K}",
            DegenerateClusteringWarning,
            stacklevel=2,
        )

    rng = np.random.default_rng(cfg.seed)
    C = _kmeanspp(X, w, K, rng)
    dist = _sq_dist(X, C)
    labels = np.argmin(dist, axis=1)
    history = [float(w @ dist[np.arange(n), labels])]
    it = 0
    for it in range(1, cfg.max_iters + 1):
        mass = np.bincount(labels, weights=w, minlength=K)
        count = np.bincount(labels, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X * w[:, None])
        new = C.copy()
        heavy = mass > 0
        new[heavy] = sums[heavy] / mass[heavy, None]
        # clusters holding only zero-weight points: any centroid is optimal, take their plain mean
        light = (mass <= 0) & (count > 0)
        if np.any(light):
            plain = np.zeros_like(C)
            np.add.at(plain, labels, X)
            new[light] = plain[light] / count[light, None]
        empty = np.flatnonzero(count == 0)
        if empty.size:
            own = np.einsum("nd,nd->n", X - new[labels], X - new[labels])
            # farthest by weighted distance, then plain distance, then index
            far = np.lexsort((np.arange(n), -own, -(w * own)))
            far = [i for i in far if own[i] > 0][: empty.size]
            for j, i in zip(empty, far):
                new[j] = X[i]
        shift = float(np.max(np.linalg.norm(new - C, axis=1)))
        C = new
        dist = _sq_dist(X, C)
        labels = np.argmin(dist, axis=1)
        history.append(float(w @ dist[np.arange(n), labels]))
        if shift < cfg.tol:
            break
    return KMeansResult(C, labels, history, it, degenerate)


def enforce_zero_codeword(cb: Codebook) -> Codebook:
    """Replace the smallest-norm codeword (lowest index on ties) by exact zero."""
    cw = np.array(cb.codewords, dtype=np.float32)
    norms = np.einsum("kd,kd->k", cw.astype(np.float64), cw.astype(np.float64))
    cw[int(np.argmin(norms))] = 0.0
    return Codebook(cw, cb.layer_id, cb.codebook_index)


@dataclass(frozen=True)
class CodebookSet:
    layer_id: int
    codebooks: tuple
    round: int = 0

    def __post_init__(self):
        books = tuple(self.codebooks)
        if not books:
            raise ValueError("a CodebookSet needs at least one codebook")
        shapes = {cb.codewords.shape for cb in books}
        if len(shapes) != 1:
            raise ValueError(f"codebooks in a set must share (K, D), got {sorted(shapes)}")
        for n, cb in enumerate(books):
            if cb.codebook_index != n or cb.layer_id != self.layer_id:
                raise ValueError("codebook indices must run 0..M-1 with a common layer_id")
        object.__setattr__(self, "codebooks", books)

    @property
    def M(self) -> int:
        return len(self.codebooks)

    @property
    def K(self) -> int:
        return self.codebooks[0].K

    @property
    def D(self) -> int:
        return self.codebooks[0].D

    def __getitem__(self, n: int) -> Codebook:
        return self.codebooks[n]

    def __len__(self):
        return len(self.codebooks)

    def __iter__(self):
        return iter(self.codebooks)

    def stacked(self) -> np.ndarray:
        return np.stack([cb.codewords for cb in self.codebooks])


@dataclass(frozen=True)
class CodebookGenConfig:
    """Knobs for :func:`generate_codebooks` beyond the codebook geometry."""

    seed: int = 0
    max_iters: int = 25
    tol: float = 1e-6
    weighted: bool = True
    sample_per_part: Optional[int] = None


def _finalize(centroids, layer_id, index) -> Codebook:
    return enforce_zero_codeword(Codebook(centroids, layer_id, index))


def _cluster(points, K, seed, gen: CodebookGenConfig, weights=None) -> np.ndarray:
    cfg = KMeansConfig(K=K, max_iters=gen.max_iters, seed=seed, tol=gen.tol)
    return kmeans(points, cfg, weights=weights).centroids


def partition_pool(n_points: int, parts: int, rng) -> list[np.ndarray]:
    """Shuffle ``range(n_points)`` and cut it into ``parts`` equal slices.

    The remainder goes to the last slice.
    """
    order = rng.permutation(n_points)
    size = n_points // parts
    out = [order[i * size:(i + 1) * size] for i in range(parts - 1)]
    out.append(order[(parts - 1) * size:])
    return out


def pool_pseudo_centroids(sets: Sequence[PseudoCentroidSet], D: int) -> tuple[np.ndarray, np.ndarray]:
    if not sets:
        return np.zeros((0, D)), np.zeros(0, dtype=np.int64)
    pts = np.concatenate([s.centroids for s in sets]).reshape(-1, D)
    counts = np.concatenate([s.usage_counts for s in sets])
    return pts, counts


def generate_codebooks(
    public_grad,
    pseudo,
    M: int,
    K: int,
    D: int,
    gen: CodebookGenConfig = CodebookGenConfig(),
    previous=None,
    round: int = 0,
) -> list[CodebookSet]:
    """Build the next round's ``M`` codebooks for every layer.

    ``public_grad`` is a per-layer list of update vectors, or None when the
    server holds no public data. ``pseudo`` maps each layer (by position) to
    the pseudo-centroid sets collected this round; ``previous`` is last round's
    per-layer :class:`CodebookSet` list, used to carry forward codebooks whose
    pseudo-centroid part came up empty.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if not is_power_of_two(K):
        raise CodecError(f"K must be a power of two, got {K}")
    if public_grad is None and pseudo is None:
        raise ValueError("need public gradients or pseudo-centroids")
    n_layers = len(public_grad) if public_grad is not None else len(pseudo)
    out = []
    for layer in range(n_layers):
        def seed(*tag):
            return derive_seed(gen.seed, "kmeans", round, layer, *tag)

        sets = list(pseudo[layer]) if pseudo is not None else []
        points, counts = pool_pseudo_centroids(sets, D)
        books: list[np.ndarray] = []
        if public_grad is not None:
            subs, _ = split_subvectors(public_grad[layer], D)
            books.append(_cluster(subs, K, seed("public", 0), gen))
            parts = M - 1
            if points.shape[0] == 0:
                # bootstrap: no client feedback yet, replicate with fresh seeds
                for i in range(1, M):
                    books.append(_cluster(subs, K, seed("public", i), gen))
                parts = 0
        else:
            parts = M
            if points.shape[0] == 0:
                # cold start with neither public data nor client feedback
                books.extend(np.zeros((K, D)) for _ in range(M))
                parts = 0

        if parts:
            rng = derive_rng(gen.seed, "shuffle", round, layer)
            for i, idx in enumerate(partition_pool(points.shape[0], parts, rng)):
                slot = len(books)
                if gen.sample_per_part is not None and idx.size > gen.sample_per_part:
                    idx = np.sort(rng.choice(idx, gen.sample_per_part, replace=False))
                if idx.size == 0:
                    if previous is not None:
                        books.append(np.asarray(previous[layer][slot].codewords, dtype=np.float64))
                    else:
                        books.append(np.zeros((K, D)))
                    continue
                w = counts[idx] if gen.weighted else None
                books.append(_cluster(points[idx], K, seed("pseudo", i), gen, weights=w))

        out.append(CodebookSet(layer, tuple(_finalize(b, layer, n) for n, b in enumerate(books)), round))
    return out


def simulate_public_gradient(model: Model, state: ModelState, public: Optional[Dataset], cfg: TrainConfig):
    """One local epoch on the server's public data, as a client would run it.

    Returns the per-layer update vectors, or None when there is no public
    data (the caller then skips the public codebook).
    """
    if public is None or len(public) == 0:
        return None
    return local_train(model, state, public, cfg)
