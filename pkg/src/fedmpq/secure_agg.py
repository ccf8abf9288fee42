"""Compressed-domain aggregation behind a simulated trust boundary.

:class:`SecureAggregator` stands in for the TEE / trusted third party. It
accepts serialized client packets, folds them into per-codebook one-hot count
matrices plus a dense residual sum, and discards everything else. Nothing on
its public surface returns an individual client's data. There is no
attestation or cryptography here; the boundary is the module's API.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import wire
from .codebook_service import CodebookSet
from .wire import LayerSchema, PacketError


class AggregationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerAggregate:
    counts: np.ndarray  # (M, rows, K) int64
    residual_sum: np.ndarray  # (L,) float64


@dataclass(frozen=True)
class CompressedAggregate:
    layers: tuple
    n_participants: int

    def selection_histogram(self, layer: int = 0) -> np.ndarray:
        """Clients per codebook for one layer, read off the first code row."""
        counts = self.layers[layer].counts
        if counts.shape[1] == 0:
            return np.zeros(counts.shape[0], dtype=np.int64)
        return counts[:, 0, :].sum(axis=1)


@dataclass(frozen=True)
class AggregationResult:
    updates: list
    aggregate: CompressedAggregate
    pseudo_pool: list


class SecureAggregator:
    """One round's aggregation session.

    ``kind`` selects the packet layout: ``"pq"`` for FedMPQ/SPQ packets,
    or one of the baseline layouts ``"topk"``, ``"sq"``, ``"dense"``, whose
    per-client reconstructions are summed inside the boundary.
    """

    def __init__(self, schema: Sequence[LayerSchema], M: int = 1, kind: str = "pq"):
        if kind not in wire.KINDS:
            raise ValueError(f"unknown packet kind {kind!r}")
        self._schema = tuple(schema)
        self._M = M
        self._kind = kind
        self._seen: set = set()
        self._counts = [np.zeros((M, s.rows, s.K), dtype=np.int64) for s in self._schema]
        self._residual = [np.zeros(s.L, dtype=np.float64) for s in self._schema]
        self._pseudo: list[list] = [[] for _ in self._schema]
        self._n = 0
        self._closed = False

    @property
    def n_participants(self) -> int:
        return self._n

    def submit(self, client_id, payload: bytes) -> bool:
        """Fold one client's serialized packet into the running aggregate.

        Raises :class:`PacketError` (leaving the aggregate untouched) on a
        schema mismatch, a corrupt packet or a repeated client id.
        """
        if self._closed:
            raise AggregationError("session already finalized")
        if client_id in self._seen:
            raise PacketError(f"duplicate submission from client {client_id!r}")
        # decode fully before touching any accumulator so rejection is atomic
        if self._kind == "pq":
            packet = wire.decode_packet(payload, self._schema, self._M)
            for li, upd in enumerate(packet.layers):
                rows = np.arange(upd.code.codes.size)
                np.add.at(self._counts[li][upd.code.codebook_index], (rows, upd.code.codes), 1)
                self._residual[li] += upd.residual.densify()
                self._pseudo[li].append(upd.pseudo)
        else:
            for li, dense in enumerate(self._decode_baseline(payload)):
                self._residual[li] += dense
        self._seen.add(client_id)
        self._n += 1
        return True

    def _decode_baseline(self, payload: bytes) -> list:
        if self._kind == "topk":
            return [r.densify() for r in wire.decode_topk(payload, self._schema)]
        if self._kind == "sq":
            return [q.reconstruct() for q in wire.decode_sq(payload, self._schema)]
        return wire.decode_dense(payload, self._schema)

    def aggregate(self) -> CompressedAggregate:
        if self._n == 0:
            raise AggregationError("empty aggregation")
        layers = tuple(LayerAggregate(c.copy(), r.copy()) for c, r in zip(self._counts, self._residual))
        return CompressedAggregate(layers, self._n)

    def finalize(self, codebooks: Sequence[CodebookSet] | None = None) -> AggregationResult:
        """Reconstruct the mean update per layer and close the session.

        For each layer the sum is ``sum_n counts[n] @ C_n`` (flattened,
        truncated to L) plus the residual sum, divided by the participant
        count. Pseudo-centroids are released pooled per layer, without
        client attribution.
        """
        agg = self.aggregate()
        if self._kind == "pq" and codebooks is None:
            raise AggregationError("PQ aggregation needs the round's codebooks")
        updates = []
        for li, (s, layer) in enumerate(zip(self._schema, agg.layers)):
            total = layer.residual_sum.copy()
            if self._kind == "pq":
                cbs = codebooks[li]
                if cbs.M != self._M or cbs.K != s.K or cbs.D != s.D:
                    raise AggregationError(f"codebook geometry mismatch on layer {li}")
                stacked = cbs.stacked().astype(np.float64)
                recon = np.einsum("nrk,nkd->rd", layer.counts.astype(np.float64), stacked)
                total += recon.ravel()[: s.L]
            updates.append((total / agg.n_participants).astype(np.float32))
        pool = [list(p) for p in self._pseudo]
        self._closed = True
        self._pseudo = [[] for _ in self._schema]
        return AggregationResult(updates, agg, pool)
