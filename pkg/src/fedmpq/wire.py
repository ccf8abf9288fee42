"""Binary layouts for uplink packets and downlink codebook sets.

All integers and floats are little-endian. A packet is the concatenation of
one block per layer, in layer order; the receiver knows the layer schema
(``L``, ``K``, ``D`` per layer) out of band, so blocks carry no geometry
beyond what the header needs to be self-checking.

PQ block (FedMPQ / SPQ)::

    u16 layer_id | u8 codebook_index | u32 L | u32 k
    packed codes, ceil(ceil(L/D) * log2(K) / 8) bytes
    k x (u32 position, f32 value)
    (K//2) x D f32 pseudo-centroids, then (K//2) x u32 usage counts

Top-k block: ``u16 layer_id | u32 L | u32 k`` then k residual entries.
Scalar-quantization block: ``u16 layer_id | u8 bits | u32 L | f32 min | f32 max``
then L codes of ``bits`` bits. Dense block: L raw f32 values, no header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .codebook_service import CodebookSet
from .pq_codec import (
    Codebook,
    CodecError,
    PseudoCentroidSet,
    QuantizationCode,
    SparseResidual,
    code_bits,
    pack_codes,
    pack_uint,
    packed_size,
    unpack_codes,
    unpack_uint,
)

PQ_HEADER = struct.Struct("<HBII")
TOPK_HEADER = struct.Struct("<HII")
SQ_HEADER = struct.Struct("<HBIff")
CODEBOOK_HEADER = struct.Struct("<HIHII")
RESIDUAL_DTYPE = np.dtype([("pos", "<u4"), ("val", "<f4")])

KINDS = ("pq", "topk", "sq", "dense")


class PacketError(CodecError):
    """A packet does not match the layout or the session schema."""


@dataclass(frozen=True)
class LayerSchema:
    layer_id: int
    L: int
    K: int = 1
    D: int = 1

    @property
    def rows(self) -> int:
        return -(-self.L // self.D)


@dataclass(frozen=True)
class LayerUpdate:
    """One layer's share of a FedMPQ client upload."""

    code: QuantizationCode
    residual: SparseResidual
    pseudo: PseudoCentroidSet


@dataclass(frozen=True)
class ClientUpdatePacket:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class ScalarQuantized:
    layer_id: int
    bits: int
    lo: float
    hi: float
    levels: np.ndarray

    def reconstruct(self) -> np.ndarray:
        lo, hi = np.float64(np.float32(self.lo)), np.float64(np.float32(self.hi))
        if hi == lo:
            return np.full(self.levels.size, lo)
        step = (hi - lo) / ((1 << self.bits) - 1)
        return lo + self.levels.astype(np.float64) * step


def _residual_bytes(res: SparseResidual) -> bytes:
    arr = np.empty(len(res), dtype=RESIDUAL_DTYPE)
    arr["pos"] = res.positions
    arr["val"] = res.values
    return arr.tobytes()


def _read_residual(buf: memoryview, off: int, k: int, L: int) -> tuple[SparseResidual, int]:
    size = k * RESIDUAL_DTYPE.itemsize
    if off + size > len(buf):
        raise PacketError("corrupt packet: truncated residual block")
    arr = np.frombuffer(buf[off:off + size], dtype=RESIDUAL_DTYPE)
    try:
        res = SparseResidual(arr["pos"].astype(np.int64), arr["val"].astype(np.float64), L)
    except CodecError as exc:
        raise PacketError(f"corrupt packet: {exc}") from None
    return res, off + size


def pq_block_size(schema: LayerSchema, k: int) -> int:
    half = schema.K // 2
    return (
        PQ_HEADER.size
        + packed_size(schema.rows, code_bits(schema.K))
        + k * RESIDUAL_DTYPE.itemsize
        + half * schema.D * 4
        + half * 4
    )


def encode_pq_layer(update: LayerUpdate, schema: LayerSchema) -> bytes:
    code, res, pseudo = update.code, update.residual, update.pseudo
    half = schema.K // 2
    if code.original_length != schema.L or res.original_length != schema.L:
        raise PacketError("layer length disagrees with schema")
    if pseudo.centroids.shape != (half, schema.D):
        raise PacketError(f"expected {half} pseudo-centroids of length {schema.D}")
    return b"".join(
        (
            PQ_HEADER.pack(schema.layer_id, code.codebook_index, schema.L, len(res)),
            pack_codes(code, schema.K),
            _residual_bytes(res),
            pseudo.centroids.astype("<f4").tobytes(),
            pseudo.usage_counts.astype("<u4").tobytes(),
        )
    )


def encode_packet(packet: ClientUpdatePacket, schema: Sequence[LayerSchema]) -> bytes:
    if len(packet.layers) != len(schema):
        raise PacketError("packet layer count disagrees with schema")
    return b"".join(encode_pq_layer(u, s) for u, s in zip(packet.layers, schema))


def _decode_pq_layer(buf: memoryview, off: int, schema: LayerSchema, M: Optional[int]) -> tuple[LayerUpdate, int]:
    if off + PQ_HEADER.size > len(buf):
        raise PacketError("corrupt packet: truncated header")
    layer_id, index, L, k = PQ_HEADER.unpack_from(buf, off)
    if layer_id != schema.layer_id or L != schema.L:
        raise PacketError(f"schema mismatch: got layer {layer_id} L={L}, expected {schema}")
    if M is not None and index >= M:
        raise PacketError(f"codebook index {index} out of range for M={M}")
    if k > L:
        raise PacketError("corrupt packet: more residual entries than positions")
    off += PQ_HEADER.size
    n_code = packed_size(schema.rows, code_bits(schema.K))
    if off + n_code > len(buf):
        raise PacketError("corrupt packet: truncated codes")
    code = unpack_codes(bytes(buf[off:off + n_code]), schema.K, L, schema.D, layer_id, index)
    off += n_code
    res, off = _read_residual(buf, off, k, L)
    half = schema.K // 2
    n_pc = half * schema.D * 4 + half * 4
    if off + n_pc > len(buf):
        raise PacketError("corrupt packet: truncated pseudo-centroid block")
    cents = np.frombuffer(buf[off:off + half * schema.D * 4], dtype="<f4").reshape(half, schema.D)
    off += half * schema.D * 4
    counts = np.frombuffer(buf[off:off + half * 4], dtype="<u4")
    off += half * 4
    pseudo = PseudoCentroidSet(layer_id, index, cents.astype(np.float64), counts.astype(np.int64))
    return LayerUpdate(code, res, pseudo), off


def decode_packet(data: bytes, schema: Sequence[LayerSchema], M: Optional[int] = None) -> ClientUpdatePacket:
    buf = memoryview(data)
    off = 0
    layers = []
    for s in schema:
        upd, off = _decode_pq_layer(buf, off, s, M)
        layers.append(upd)
    if off != len(buf):
        raise PacketError(f"corrupt packet: {len(buf) - off} trailing bytes")
    return ClientUpdatePacket(layers)


# baseline blocks ---------------------------------------------------------


def encode_topk(residuals: Sequence[SparseResidual], schema: Sequence[LayerSchema]) -> bytes:
    out = []
    for res, s in zip(residuals, schema, strict=True):
        out.append(TOPK_HEADER.pack(s.layer_id, s.L, len(res)))
        out.append(_residual_bytes(res))
    return b"".join(out)


def decode_topk(data: bytes, schema: Sequence[LayerSchema]) -> list[SparseResidual]:
    buf = memoryview(data)
    off = 0
    out = []
    for s in schema:
        if off + TOPK_HEADER.size > len(buf):
            raise PacketError("corrupt packet: truncated header")
        layer_id, L, k = TOPK_HEADER.unpack_from(buf, off)
        if layer_id != s.layer_id or L != s.L or k > L:
            raise PacketError(f"schema mismatch: got layer {layer_id} L={L}, expected {s}")
        res, off = _read_residual(buf, off + TOPK_HEADER.size, k, L)
        out.append(res)
    if off != len(buf):
        raise PacketError(f"corrupt packet: {len(buf) - off} trailing bytes")
    return out


def encode_sq(layers: Sequence[ScalarQuantized], schema: Sequence[LayerSchema]) -> bytes:
    out = []
    for q, s in zip(layers, schema, strict=True):
        if q.levels.size != s.L:
            raise PacketError("layer length disagrees with schema")
        out.append(SQ_HEADER.pack(s.layer_id, q.bits, s.L, q.lo, q.hi))
        out.append(pack_uint(q.levels, q.bits))
    return b"".join(out)


def decode_sq(data: bytes, schema: Sequence[LayerSchema]) -> list[ScalarQuantized]:
    buf = memoryview(data)
    off = 0
    out = []
    for s in schema:
        if off + SQ_HEADER.size > len(buf):
            raise PacketError("corrupt packet: truncated header")
        layer_id, bits, L, lo, hi = SQ_HEADER.unpack_from(buf, off)
        if layer_id != s.layer_id or L != s.L or not 1 <= bits <= 16:
            raise PacketError(f"schema mismatch: got layer {layer_id} L={L} bits={bits}, expected {s}")
        off += SQ_HEADER.size
        n = packed_size(L, bits)
        if off + n > len(buf):
            raise PacketError("corrupt packet: truncated levels")
        levels = unpack_uint(bytes(buf[off:off + n]), L, bits)
        off += n
        out.append(ScalarQuantized(layer_id, bits, lo, hi, levels))
    if off != len(buf):
        raise PacketError(f"corrupt packet: {len(buf) - off} trailing bytes")
    return out


def encode_dense(vectors: Sequence[np.ndarray], schema: Sequence[LayerSchema]) -> bytes:
    out = []
    for v, s in zip(vectors, schema, strict=True):
        v = np.asarray(v).ravel()
        if v.size != s.L:
            raise PacketError("layer length disagrees with schema")
        out.append(v.astype("<f4").tobytes())
    return b"".join(out)


def decode_dense(data: bytes, schema: Sequence[LayerSchema]) -> list[np.ndarray]:
    total = sum(s.L for s in schema)
    if len(data) != 4 * total:
        raise PacketError(f"corrupt packet: expected {4 * total} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f4").astype(np.float64)
    bounds = np.cumsum([0] + [s.L for s in schema])
    return [flat[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


# downlink ------------------------------------------------------------------


def encode_codebook_set(cbs: CodebookSet) -> bytes:
    return CODEBOOK_HEADER.pack(cbs.layer_id, cbs.round, cbs.M, cbs.K, cbs.D) + cbs.stacked().astype("<f4").tobytes()


def decode_codebook_set(data: bytes) -> CodebookSet:
    if len(data) < CODEBOOK_HEADER.size:
        raise PacketError("corrupt codebook set: truncated header")
    layer_id, rnd, M, K, D = CODEBOOK_HEADER.unpack_from(data, 0)
    body = data[CODEBOOK_HEADER.size:]
    if len(body) != 4 * M * K * D:
        raise PacketError("corrupt codebook set: body length disagrees with header")
    arr = np.frombuffer(body, dtype="<f4").reshape(M, K, D)
    return CodebookSet(layer_id, tuple(Codebook(arr[n], layer_id, n) for n in range(M)), rnd)


def codebook_set_size(M: int, K: int, D: int) -> int:
    return CODEBOOK_HEADER.size + 4 * M * K * D
