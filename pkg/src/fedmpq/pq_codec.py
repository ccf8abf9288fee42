"""Per-layer multi-codebook product quantization of update vectors.

Indices are 0-based throughout: codeword ``i`` is row ``i`` of a codebook and
codebook ``n`` is position ``n`` of a layer's codebook list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class CodecError(ValueError):
    """Malformed input to a codec routine."""


def is_power_of_two(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


def code_bits(K: int) -> int:
    """Bits needed per code for a K-word codebook."""
    return int(K).bit_length() - 1


@dataclass(frozen=True)
class Codebook:
    codewords: np.ndarray
    layer_id: int = 0
    codebook_index: int = 0

    def __post_init__(self):
        cw = np.ascontiguousarray(self.codewords, dtype=np.float32)
        if cw.ndim != 2 or cw.shape[0] < 1 or cw.shape[1] < 1:
            raise CodecError(f"codewords must be a nonempty K x D matrix, got {cw.shape}")
        if not is_power_of_two(cw.shape[0]):
            raise CodecError(f"K must be a power of two, got {cw.shape[0]}")
        cw.setflags(write=False)
        object.__setattr__(self, "codewords", cw)

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def D(self) -> int:
        return self.codewords.shape[1]

    def has_zero_codeword(self) -> bool:
        return bool(np.any(np.all(self.codewords == 0.0, axis=1)))


@dataclass(frozen=True)
class QuantizationCode:
    layer_id: int
    codebook_index: int
    codes: np.ndarray
    original_length: int
    pad_count: int

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64).ravel()
        object.__setattr__(self, "codes", codes)

    def __eq__(self, other):
        if not isinstance(other, QuantizationCode):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.codebook_index == other.codebook_index
            and self.original_length == other.original_length
            and self.pad_count == other.pad_count
            and np.array_equal(self.codes, other.codes)
        )


@dataclass(frozen=True)
class SparseResidual:
    positions: np.ndarray
    values: np.ndarray
    original_length: int

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).ravel()
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if pos.shape != vals.shape:
            raise CodecError("positions and values differ in length")
        if pos.size and (np.any(np.diff(pos) <= 0) or pos[0] < 0 or pos[-1] >= self.original_length):
            raise CodecError("residual positions must be strictly increasing and in range")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "values", vals)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(p), float(v)) for p, v in zip(self.positions, self.values)]

    def __len__(self) -> int:
        return int(self.positions.size)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.original_length, dtype=np.float64)
        out[self.positions] = self.values
        return out


@dataclass(frozen=True)
class PseudoCentroidSet:
    layer_id: int
    source_codebook_index: int
    centroids: np.ndarray
    usage_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "centroids", np.asarray(self.centroids, dtype=np.float64))
        object.__setattr__(self, "usage_counts", np.asarray(self.usage_counts, dtype=np.int64).ravel())
        if self.centroids.ndim != 2 or self.centroids.shape[0] != self.usage_counts.size:
            raise CodecError("one usage count per centroid row required")


@dataclass(frozen=True)
class ContractionReport:
    input_norm: float
    error_norm: float
    tau_observed: float


def densify(residual: SparseResidual) -> np.ndarray:
    return residual.densify()


def split_subvectors(z, D: int) -> tuple[np.ndarray, int]:
    """Cut ``z`` into rows of length ``D``, zero-padding the final row.

    Returns the ``(ceil(L/D), D)`` matrix of subvectors and the pad count.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size == 0:
        raise CodecError("empty vector")
    if D < 1:
        raise CodecError(f"D must be >= 1, got {D}")
    rows = -(-z.size // D)
    pad = rows * D - z.size
    if pad:
        z = np.concatenate([z, np.zeros(pad)])
    return z.reshape(rows, D), pad


def _assign(subvectors: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    # Direct differences, not the |a|^2+|b|^2-2ab expansion: exact ties must stay ties.
    diff = subvectors[:, None, :] - codewords[None, :, :].astype(np.float64)
    dist = np.einsum("rkd,rkd->rk", diff, diff)
    return np.argmin(dist, axis=1)


def quantize_with_codebook(z, cb: Codebook) -> tuple[QuantizationCode, np.ndarray, float]:
    """Nearest-codeword quantization of every subvector of ``z``.

    Ties resolve to the lowest codeword index. Returns the code, the
    reconstruction truncated to ``len(z)`` and its squared error.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    subs, pad = split_subvectors(z, cb.D)
    codes = _assign(subs, cb.codewords)
    code = QuantizationCode(cb.layer_id, cb.codebook_index, codes, z.size, pad)
    recon = _lookup(codes, cb, z.size)
    err = z - recon
    return code, recon, float(err @ err)


def _lookup(codes: np.ndarray, cb: Codebook, length: int) -> np.ndarray:
    return cb.codewords[codes].astype(np.float64).ravel()[:length]


def quantize_best(z, codebooks: Sequence[Codebook]) -> tuple[QuantizationCode, np.ndarray]:
    """Quantize against every codebook and keep the lowest squared error."""
    if len(codebooks) == 0:
        raise CodecError("no codebooks given")
    shapes = {cb.codewords.shape for cb in codebooks}
    if len(shapes) != 1:
        raise CodecError(f"codebooks disagree on (K, D): {sorted(shapes)}")
    best = None
    for cb in codebooks:
        code, recon, err = quantize_with_codebook(z, cb)
        if best is None or err < best[2]:
            best = (code, recon, err)
    return best[0], best[1]


def dequantize(code: QuantizationCode, cb: Codebook) -> np.ndarray:
    if code.codebook_index != cb.codebook_index:
        raise CodecError(
            f"code was produced against codebook {code.codebook_index}, got {cb.codebook_index}"
        )
    rows = -(-code.original_length // cb.D)
    if code.codes.size != rows:
        raise CodecError("corrupt code: length does not match original_length")
    if code.codes.size and (code.codes.min() < 0 or code.codes.max() >= cb.K):
        raise CodecError("corrupt code: index out of range")
    return _lookup(code.codes, cb, code.original_length)


def residual_budget(L: int, ratio: float) -> int:
    """Entry count ``ceil(ratio * L)``, robust to float noise like 0.07*100."""
    if not 0.0 <= ratio <= 1.0:
        raise CodecError(f"residual ratio must lie in [0, 1], got {ratio}")
    return min(L, math.ceil(round(ratio * L, 9)))


def prune_residual(r, ratio: float) -> SparseResidual:
    """Keep the ``ceil(ratio*L)`` largest-magnitude entries of ``r``.

    Ties go to the lower position; the kept entries are returned in
    increasing position order.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    k = residual_budget(r.size, ratio)
    if k == 0:
        return SparseResidual(np.zeros(0, np.int64), np.zeros(0), r.size)
    # stable sort on -|r| keeps lower positions first among equal magnitudes
    order = np.argsort(-np.abs(r), kind="stable")[:k]
    pos = np.sort(order)
    return SparseResidual(pos, r[pos], r.size)


def update_pseudo_centroids(cb: Codebook, code: QuantizationCode, subvectors, gamma: float = 0.99) -> PseudoCentroidSet:
    """EMA-pull each used codeword toward the mean of its assigned subvectors.

    Works on a scratch copy; ``cb`` is left untouched. The ``K // 2`` most used
    codewords (ties to the lower index) are returned with their usage counts.
    """
    if not 0.0 < gamma <= 1.0:
        raise CodecError(f"gamma must lie in (0, 1], got {gamma}")
    subs = np.asarray(subvectors, dtype=np.float64)
    K = cb.K
    counts = np.bincount(code.codes, minlength=K)
    sums = np.zeros((K, cb.D))
    np.add.at(sums, code.codes, subs)
    updated = cb.codewords.astype(np.float64)
    used = counts > 0
    updated[used] = updated[used] * (1.0 - gamma) + gamma * sums[used] / counts[used, None]
    keep = np.argsort(-counts, kind="stable")[: K // 2]
    return PseudoCentroidSet(cb.layer_id, cb.codebook_index, updated[keep], counts[keep])


def contraction_report(z, reconstruction) -> ContractionReport:
    z = np.asarray(z, dtype=np.float64).ravel()
    err = z - np.asarray(reconstruction, dtype=np.float64).ravel()
    zn = float(np.linalg.norm(z))
    en = float(np.linalg.norm(err))
    return ContractionReport(zn, en, en / zn if zn > 0 else 0.0)


def pack_uint(values, bits: int) -> bytes:
    """Pack nonnegative ints into ``bits``-wide fields, LSB-first within bytes."""
    values = np.asarray(values, dtype=np.int64).ravel()
    if bits == 0 or values.size == 0:
        return b""
    shifts = np.arange(bits, dtype=np.int64)
    bitmat = ((values[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bitmat.ravel(), bitorder="little").tobytes()


def unpack_uint(data: bytes, n: int, bits: int) -> np.ndarray:
    if len(data) != packed_size(n, bits):
        raise CodecError(f"corrupt packet: expected {packed_size(n, bits)} bytes, got {len(data)}")
    if bits == 0:
        return np.zeros(n, dtype=np.int64)
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bitmat = raw[: n * bits].reshape(n, bits).astype(np.int64)
    return bitmat @ (1 << np.arange(bits, dtype=np.int64))


def packed_size(n: int, bits: int) -> int:
    return -(-n * bits // 8)


def pack_codes(code: QuantizationCode, K: int) -> bytes:
    """Pack codes into ``log2(K)``-bit fields, LSB-first within each byte."""
    if not is_power_of_two(K):
        raise CodecError(f"K must be a power of two, got {K}")
    codes = code.codes
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise CodecError("code value out of range for K")
    return pack_uint(codes, code_bits(K))


def unpack_codes(data: bytes, K: int, L: int, D: int, layer_id: int = 0, codebook_index: int = 0) -> QuantizationCode:
    if not is_power_of_two(K):
        raise CodecError(f"K must be a power of two, got {K}")
    rows = -(-L // D)
    codes = unpack_uint(data, rows, code_bits(K))
    return QuantizationCode(layer_id, codebook_index, codes, L, rows * D - L)
