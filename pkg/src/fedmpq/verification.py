"""Randomized oracle checks run by ``fedmpq verify``.

Each check compares a library routine against a deliberately naive
re-derivation on small random instances and reports the first mismatch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import wire
from .codebook_service import CodebookSet, enforce_zero_codeword
from .pq_codec import Codebook, dequantize, pack_codes, prune_residual, quantize_best, quantize_with_codebook
from .secure_agg import SecureAggregator
from .simulator import compress_fedmpq


@dataclass
class CheckResult:
    name: str
    passed: bool
    trials: int
    seconds: float
    detail: str = ""


def _random_codebook(rng, K, D, layer=0, index=0, zero=True):
    cb = Codebook(rng.normal(size=(K, D)) * rng.uniform(0.1, 2.0), layer, index)
    return enforce_zero_codeword(cb) if zero else cb


def check_argmin(rng, trials):
    for t in range(trials):
        K, D = 2 ** rng.integers(0, 5), int(rng.integers(1, 5))
        cb = _random_codebook(rng, K, D, zero=False)
        z = rng.normal(size=int(rng.integers(1, 40)))
        code, recon, _ = quantize_with_codebook(z, cb)
        padded = np.concatenate([z, np.zeros(code.pad_count)])
        for j in range(code.codes.size):
            sub = padded[j * D:(j + 1) * D]
            best, best_d = 0, None
            for k in range(K):
                d = sum((float(a) - float(b)) ** 2 for a, b in zip(sub, cb.codewords[k]))
                if best_d is None or d < best_d:
                    best, best_d = k, d
            if best != code.codes[j]:
                return f"trial {t}: subvector {j} chose {code.codes[j]}, exhaustive {best}"
    return ""


def check_packing(rng, trials):
    for t in range(trials):
        K = 2 ** int(rng.integers(0, 9))
        D = int(rng.integers(1, 5))
        cb = _random_codebook(rng, K, D, zero=False)
        code, _, _ = quantize_with_codebook(rng.normal(size=int(rng.integers(1, 60))), cb)
        bits = K.bit_length() - 1
        stream = []
        for c in code.codes:
            stream.extend((int(c) >> b) & 1 for b in range(bits))
        naive = bytearray((len(stream) + 7) // 8)
        for i, bit in enumerate(stream):
            naive[i // 8] |= bit << (i % 8)
        if pack_codes(code, K) != bytes(naive):
            return f"trial {t}: K={K} packing differs from bit-by-bit writer"
    return ""


def _random_round(rng):
    M, K, D = int(rng.integers(1, 5)), 2 ** int(rng.integers(1, 6)), int(rng.integers(1, 5))
    L = int(rng.integers(1, 513))
    N = int(rng.integers(1, 17))
    ratio = float(rng.choice([0.0, 0.01, 0.1, 1.0]))
    cbs = CodebookSet(0, tuple(_random_codebook(rng, K, D, 0, n) for n in range(M)))
    schema = [wire.LayerSchema(0, L, K, D)]
    zs = [rng.normal(size=L) * rng.uniform(0.1, 3.0) for _ in range(N)]
    return cbs, schema, zs, ratio


def check_exchange(rng, trials):
    for t in range(trials):
        cbs, schema, zs, ratio = _random_round(rng)
        agg = SecureAggregator(schema, cbs.M)
        naive = np.zeros(schema[0].L)
        for cid, z in enumerate(zs):
            packet, _, _ = compress_fedmpq([z], [cbs], ratio, 0.99)
            payload = wire.encode_packet(packet, schema)
            agg.submit(cid, payload)
            upd = wire.decode_packet(payload, schema).layers[0]
            naive += dequantize(upd.code, cbs[upd.code.codebook_index]) + upd.residual.densify()
        got = agg.finalize([cbs]).updates[0].astype(np.float64)
        want = naive / len(zs)
        err = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-30)
        if err > 1e-5:
            return f"trial {t}: relative error {err:.2e}"
    return ""


def check_contraction(rng, trials):
    for t in range(trials):
        K, D = 2 ** int(rng.integers(0, 6)), int(rng.integers(1, 6))
        cbs = [_random_codebook(rng, K, D, 0, n) for n in range(int(rng.integers(1, 4)))]
        x = rng.normal(size=int(rng.integers(1, 64))) * rng.uniform(1e-3, 10.0)
        _, recon = quantize_best(x, cbs)
        if np.linalg.norm(recon - x) > np.linalg.norm(x):
            return f"trial {t}: error norm exceeds input norm"
    return ""


def check_residual_completeness(rng, trials):
    for t in range(trials):
        cb = _random_codebook(rng, 8, 2)
        z = rng.normal(size=int(rng.integers(1, 50)))
        code, recon, _ = quantize_with_codebook(z, cb)
        full = dequantize(code, cb) + prune_residual(z - recon, 1.0).densify()
        # residual values travel as float32
        if not np.allclose(full, z, rtol=1e-6, atol=1e-6 * np.abs(z).max()):
            return f"trial {t}: reconstruction with the full residual is not exact"
    return ""


CHECKS = {
    "argmin-vs-exhaustive": check_argmin,
    "pack-vs-naive-writer": check_packing,
    "exchange-identity": check_exchange,
    "tau-contraction": check_contraction,
    "residual-completeness": check_residual_completeness,
}


def run_all(trials: int = 200, seed: int = 0) -> list[CheckResult]:
    out = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        start = time.perf_counter()
        detail = fn(np.random.default_rng([seed, i]), trials)
        out.append(CheckResult(name, not detail, trials, time.perf_counter() - start, detail))
    return out
