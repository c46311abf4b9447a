"""Knowledge base of (context, horizon) windows with frozen context embeddings.

Search is an exact flat cosine scan, optionally sharded across threads. Each
shard keeps its local top-K (ties included) and the shards are merged by
(similarity desc, id asc), which gives the same answer as one full sort.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from core import numerics as nx
from core.data import Window, normalize_window
from core.errors import ConfigurationError, DomainError
from core.model import ModelParams, encode
from core.numerics import Tensor
from core.thread_manager import ThreadManager

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KBEntry:
    id: int
    context: Tensor
    horizon: Tensor
    embedding: Tensor
    source_id: Optional[tuple[str, int]]


@dataclass(frozen=True)
class RetrievalResult:
    ids: np.ndarray
    similarities: Tensor
    horizons: Tensor


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class KnowledgeBase:
    """Immutable after construction; queries are read-only and safe to run concurrently."""

    def __init__(self, T: int, L: int, d: int, contexts: Tensor, horizons: Tensor, embeddings: Tensor,
                 encoder_hash: bytes, sources: Optional[Sequence[Optional[tuple[str, int]]]] = None,
                 threads: int = 1):
        n = contexts.shape[0]
        if contexts.shape != (n, T) or horizons.shape != (n, L) or embeddings.shape != (n, d):
            raise ConfigurationError(
                f"KB arrays disagree: contexts {contexts.shape}, horizons {horizons.shape}, "
                f"embeddings {embeddings.shape} for T={T}, L={L}, d={d}"
            )
        if len(encoder_hash) != 32:
            raise ConfigurationError(f"encoder hash must be 32 bytes, got {len(encoder_hash)}")
        self.T, self.L, self.d = T, L, d
        self.ids = _freeze(np.arange(n, dtype=np.int64))
        self.contexts = _freeze(contexts.astype(np.float64))
        self.horizons = _freeze(horizons.astype(np.float64))
        self.embeddings = _freeze(embeddings.astype(np.float64))
        self.norms = _freeze(np.sqrt(np.sum(self.embeddings * self.embeddings, axis=1)))
        self.encoder_hash = bytes(encoder_hash)
        self.sources: list[Optional[tuple[str, int]]] = list(sources) if sources is not None else [None] * n
        if len(self.sources) != n:
            raise ConfigurationError(f"{len(self.sources)} source ids for {n} entries")
        self.threads = threads
        self._by_source = {tuple(s): i for i, s in enumerate(self.sources) if s is not None}

    def __len__(self) -> int:
        return self.ids.shape[0]

    def entry(self, i: int) -> KBEntry:
        return KBEntry(int(self.ids[i]), self.contexts[i], self.horizons[i], self.embeddings[i], self.sources[i])

    def id_for_source(self, source_id: Optional[tuple[str, int]]) -> Optional[int]:
        if source_id is None:
            return None
        return self._by_source.get(tuple(source_id))

    def is_stale(self, params: ModelParams) -> bool:
        """True when `params` carries a different encoder than the one the embeddings came from."""
        return params.encoder_hash() != self.encoder_hash

    # ---------- search ----------
    def _scan(self, q: Tensor, K: int, lo: int, hi: int, exclude_id: Optional[int]) -> tuple[np.ndarray, Tensor]:
        sims = nx.cosine_rows(self.embeddings[lo:hi], q, self.norms[lo:hi])
        ids = self.ids[lo:hi]
        if exclude_id is not None and lo <= exclude_id < hi:
            keep = ids != exclude_id
            sims, ids = sims[keep], ids[keep]
        if ids.shape[0] > K:
            neg = -sims
            kth = np.partition(neg, K - 1)[K - 1]
            cand = np.flatnonzero(neg <= kth)   # ties at the boundary stay in
            sims, ids = sims[cand], ids[cand]
        return ids, sims

    def top_k(self, q: Tensor, K: int, exclude_id: Optional[int] = None,
              threads: Optional[int] = None) -> RetrievalResult:
        """Exact top-K by cosine similarity, descending; ties go to the smaller id."""
        n = len(self)
        excluded = exclude_id is not None and 0 <= exclude_id < n
        available = n - (1 if excluded else 0)
        if K < 1 or K > available:
            raise DomainError(f"top_k: K={K} but only {available} eligible entries (n={n})")
        q = nx.as_tensor(q)
        if q.shape != (self.d,):
            raise DomainError(f"top_k: query has shape {q.shape}, KB embeddings have d={self.d}")

        manager = ThreadManager(threads or self.threads)
        shards = ThreadManager.split(n, manager.threads)
        parts = manager.map(lambda s: self._scan(q, K, s[0], s[1], exclude_id), shards)

        ids = np.concatenate([p[0] for p in parts])
        sims = np.concatenate([p[1] for p in parts])
        order = np.lexsort((ids, -sims))[:K]
        ids, sims = ids[order], sims[order]
        logger.debug(f"[KB] top_k K={K} exclude={exclude_id} -> {ids.tolist()}")
        return RetrievalResult(ids=ids, similarities=sims, horizons=self.horizons[ids])


def build_kb(windows: Sequence[Window], encoder_snapshot: ModelParams, threads: int = 1) -> KnowledgeBase:
    """Embed every window's (normalized) context with the frozen encoder snapshot."""
    T, L, d = encoder_snapshot.T, encoder_snapshot.L, encoder_snapshot.d
    if not windows:
        logger.info("[KB] Built empty knowledge base")
        return KnowledgeBase(T, L, d, np.zeros((0, T)), np.zeros((0, L)), np.zeros((0, d)),
                             encoder_snapshot.encoder_hash(), threads=threads)

    for i, w in enumerate(windows):
        if w.context.shape != (T,) or w.horizon.shape != (L,):
            raise ConfigurationError(
                f"window {i} has context {w.context.shape} / horizon {w.horizon.shape}; "
                f"KB expects T={T}, L={L}"
            )
    normed = [normalize_window(w) for w in windows]
    snapshot = encoder_snapshot.copy()

    manager = ThreadManager(threads)
    shards = ThreadManager.split(len(normed), manager.threads)
    parts = manager.map(
        lambda s: np.array([encode(w.context, snapshot) for w in normed[s[0]:s[1]]]).reshape(-1, d),
        shards,
    )
    kb = KnowledgeBase(
        T, L, d,
        contexts=np.array([w.context for w in normed]),
        horizons=np.array([w.horizon for w in normed]),
        embeddings=np.concatenate(parts, axis=0),
        encoder_hash=snapshot.encoder_hash(),
        sources=[w.source_id for w in normed],
        threads=threads,
    )
    logger.info(f"[KB] Built knowledge base: n={len(kb)}, T={T}, L={L}, d={d}")
    return kb
