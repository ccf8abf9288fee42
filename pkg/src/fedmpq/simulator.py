"""Round protocol: pull, client update, push, model update, codebook update."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import wire
from .codebook_service import (
    CodebookGenConfig,
    DegenerateClusteringWarning,
    generate_codebooks,
    simulate_public_gradient,
)
from .learning import FederationData, Model, ModelState, TrainConfig, apply_server_update, evaluate, local_train
from .pq_codec import (
    CodecError,
    SparseResidual,
    contraction_report,
    is_power_of_two,
    prune_residual,
    quantize_best,
    split_subvectors,
    update_pseudo_centroids,
)
from .secure_agg import SecureAggregator
from .seeding import derive_rng, derive_seed
from .wire import LayerSchema, LayerUpdate, ClientUpdatePacket, PacketError, ScalarQuantized

log = logging.getLogger(__name__)

STRATEGIES = ("fedmpq", "spq", "scalar_quant", "topk_prune", "uncompressed")
PACKET_KIND = {"fedmpq": "pq", "spq": "pq", "scalar_quant": "sq", "topk_prune": "topk", "uncompressed": "dense"}
DOWNLINK_WEIGHT = 8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RoundConfig:
    strategy: str = "fedmpq"
    clients_per_round: int = 10
    M: int = 4
    K: int = 32
    D: int = 2
    residual: float = 0.001
    gamma: float = 0.99
    sq_bits: int = 8
    topk_ratio: float = 0.1
    use_public: bool = True
    weighted: bool = True
    kmeans_iters: int = 25
    rounds: int = 100
    target_accuracy: float = 0.9
    lr_client: float = 0.1
    lr_server: float = 1.0
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")
        if self.M < 1 or self.D < 1:
            raise ConfigError("M and D must be >= 1")
        if not is_power_of_two(self.K):
            raise ConfigError(f"K must be a power of two, got {self.K}")
        if not 0.0 <= self.residual <= 1.0:
            raise ConfigError(f"residual ratio must lie in [0, 1], got {self.residual}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 1 <= self.sq_bits <= 16:
            raise ConfigError(f"sq_bits must lie in [1, 16], got {self.sq_bits}")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ConfigError(f"topk_ratio must lie in (0, 1], got {self.topk_ratio}")
        if self.rounds < 0 or self.kmeans_iters < 1:
            raise ConfigError("rounds must be >= 0 and kmeans_iters >= 1")
        if self.lr_client < 0 or self.lr_server < 0 or self.batch_size < 1:
            raise ConfigError("learning rates must be >= 0 and batch_size >= 1")

    @property
    def effective_M(self) -> int:
        return 1 if self.strategy == "spq" else self.M

    @property
    def is_pq(self) -> bool:
        return self.strategy in ("fedmpq", "spq")


@dataclass
class CommLedger:
    uplink: list = field(default_factory=list)
    downlink: list = field(default_factory=list)

    def record(self, uplink_bytes: int, downlink_bytes: int) -> None:
        self.uplink.append(int(uplink_bytes))
        self.downlink.append(int(downlink_bytes))

    @property
    def total_uplink(self) -> int:
        return sum(self.uplink)

    @property
    def total_downlink(self) -> int:
        return sum(self.downlink)

    @property
    def weighted_total(self) -> float:
        return weighted_cost(self.total_downlink, self.total_uplink)


def weighted_cost(downlink: int, uplink: int) -> float:
    """Total cost with downlink discounted by the bandwidth asymmetry factor."""
    return downlink / DOWNLINK_WEIGHT + uplink


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    loss: float
    quant_error: float
    tau_mean: float
    tau_max: float
    selection: list
    participants: int
    uplink_bytes: int
    downlink_bytes: int
    cum_uplink: int
    cum_downlink: int
    weighted_total: float
    degenerate_kmeans: int = 0


# client-side compressors -----------------------------------------------------


def compress_fedmpq(z_layers, codebook_sets, ratio: float, gamma: float):
    """Best-of-M quantization, pruned residual and pseudo-centroids per layer.

    Returns the packet and the per-layer reconstructions the server would
    recover from it (before f32 rounding of the residual values).
    """
    updates, recons, taus = [], [], []
    for z, cbs in zip(z_layers, codebook_sets):
        z = np.asarray(z, dtype=np.float64)
        code, zhat = quantize_best(z, cbs.codebooks)
        cb = cbs[code.codebook_index]
        res = prune_residual(z - zhat, ratio)
        subs, _ = split_subvectors(z, cb.D)
        pseudo = update_pseudo_centroids(cb, code, subs, gamma)
        updates.append(LayerUpdate(code, res, pseudo))
        recons.append(zhat + res.densify())
        taus.append(contraction_report(z, zhat).tau_observed)
    return ClientUpdatePacket(updates), recons, taus


def baseline_scalar_quantize(z, bits: int, layer_id: int = 0) -> ScalarQuantized:
    """Uniform min-max quantization to ``2**bits`` levels; constant input passes through."""
    if not 1 <= bits <= 16:
        raise CodecError(f"bits must lie in [1, 16], got {bits}")
    z = np.asarray(z, dtype=np.float64).ravel()
    lo, hi = np.float32(z.min()), np.float32(z.max())
    top = (1 << bits) - 1
    if hi == lo:
        levels = np.zeros(z.size, dtype=np.int64)
    else:
        step = (float(hi) - float(lo)) / top
        levels = np.clip(np.rint((z - float(lo)) / step), 0, top).astype(np.int64)
    return ScalarQuantized(layer_id, bits, float(lo), float(hi), levels)


def baseline_topk(z, ratio: float) -> SparseResidual:
    if not 0.0 < ratio <= 1.0:
        raise CodecError(f"top-k ratio must lie in (0, 1], got {ratio}")
    return prune_residual(z, ratio)


# simulator -----------------------------------------------------------------------


class Simulator:
    """Holds the global model, current codebooks and the communication ledger."""

    def __init__(self, cfg: RoundConfig, model: Model, fed: FederationData, state: Optional[ModelState] = None,
                 capture_packets: bool = False):
        cfg.validate()
        if cfg.clients_per_round > len(fed.clients):
            raise ConfigError(f"cannot sample {cfg.clients_per_round} of {len(fed.clients)} clients")
        self.cfg = cfg
        self.model = model
        self.fed = fed
        self.state = state.copy() if state is not None else model.init_state(derive_seed(cfg.seed, "model"))
        self.schema = [
            LayerSchema(i, layer.values.size, cfg.K if cfg.is_pq else 1, cfg.D if cfg.is_pq else 1)
            for i, layer in enumerate(self.state.layers)
        ]
        self.ledger = CommLedger()
        self.capture_packets = capture_packets
        self.last_packets: list = []
        self.gen = CodebookGenConfig(seed=derive_seed(cfg.seed, "codebooks"), max_iters=cfg.kmeans_iters,
                                     weighted=cfg.weighted)
        self.codebooks = None
        self._degenerate = 0
        if cfg.is_pq:
            self.codebooks = self._new_codebooks(None)

    def _train_cfg(self, *keys) -> TrainConfig:
        c = self.cfg
        return TrainConfig(c.lr_client, c.lr_server, 1, c.batch_size, derive_seed(c.seed, *keys))

    def _new_codebooks(self, pseudo_pool):
        c = self.cfg
        public = None
        if c.strategy == "spq" or c.use_public:
            public = simulate_public_gradient(self.model, self.state, self.fed.public_set,
                                              self._train_cfg("public", self.state.round))
        if public is None and pseudo_pool is None:
            pseudo_pool = [[] for _ in self.schema]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateClusteringWarning)
            books = generate_codebooks(public, pseudo_pool, c.effective_M, c.K, c.D, self.gen,
                                       previous=self.codebooks, round=self.state.round)
        self._degenerate += sum(issubclass(w.category, DegenerateClusteringWarning) for w in caught)
        return books

    def _compress(self, z_layers):
        c = self.cfg
        if c.is_pq:
            packet, recons, taus = compress_fedmpq(z_layers, self.codebooks, c.residual, c.gamma)
            return wire.encode_packet(packet, self.schema), recons, taus
        if c.strategy == "scalar_quant":
            qs = [baseline_scalar_quantize(z, c.sq_bits, i) for i, z in enumerate(z_layers)]
            recons = [q.reconstruct() for q in qs]
            payload = wire.encode_sq(qs, self.schema)
        elif c.strategy == "topk_prune":
            res = [baseline_topk(z, c.topk_ratio) for z in z_layers]
            recons = [r.densify() for r in res]
            payload = wire.encode_topk(res, self.schema)
        else:
            recons = [np.asarray(z, dtype=np.float64) for z in z_layers]
            payload = wire.encode_dense(z_layers, self.schema)
        taus = [contraction_report(z, r).tau_observed for z, r in zip(z_layers, recons)]
        return payload, recons, taus

    def sample_clients(self) -> np.ndarray:
        rng = derive_rng(self.cfg.seed, "sample", self.state.round)
        return np.sort(rng.choice(len(self.fed.clients), self.cfg.clients_per_round, replace=False))

    def downlink_per_client(self) -> int:
        size = self.state.num_bytes()
        if self.codebooks is not None:
            size += sum(len(wire.encode_codebook_set(cbs)) for cbs in self.codebooks)
        return size

    def run_round(self) -> RoundMetrics:
        c = self.cfg
        r = self.state.round
        self._degenerate = 0
        # 1. pull
        chosen = self.sample_clients()
        downlink = self.downlink_per_client() * len(chosen)
        # 2-3. client update and push, in client-id order
        agg = SecureAggregator(self.schema, c.effective_M, PACKET_KIND[c.strategy])
        uplink, errors, taus = 0, [], []
        self.last_packets = []
        for cid in chosen:
            try:
                z = local_train(self.model, self.state, self.fed.clients[cid], self._train_cfg("client", r, int(cid)))
                payload, recons, client_taus = self._compress(z)
                agg.submit(int(cid), payload)
            except (CodecError, PacketError) as exc:
                log.warning("round %d: dropping client %d: %s", r, cid, exc)
                continue
            uplink += len(payload)
            errors.append(sum(float(np.sum((np.asarray(a, np.float64) - b) ** 2)) for a, b in zip(z, recons)))
            taus.extend(client_taus)
            if self.capture_packets:
                self.last_packets.append((int(cid), payload))
        self.ledger.record(uplink, downlink)
        # 4. model update
        result = agg.finalize(self.codebooks)
        self.state = apply_server_update(self.state, result.updates, c.lr_server)
        selection = [result.aggregate.selection_histogram(i).tolist() for i in range(len(self.schema))] \
            if c.is_pq else []
        # 5. codebook update for the next round
        if c.is_pq:
            self.codebooks = self._new_codebooks(result.pseudo_pool)
        acc, loss = evaluate(self.model, self.state, self.fed.test_set)
        return RoundMetrics(
            round=r + 1,
            accuracy=acc,
            loss=loss,
            quant_error=float(np.mean(errors)) if errors else 0.0,
            tau_mean=float(np.mean(taus)) if taus else 0.0,
            tau_max=float(np.max(taus)) if taus else 0.0,
            selection=selection,
            participants=result.aggregate.n_participants,
            uplink_bytes=uplink,
            downlink_bytes=downlink,
            cum_uplink=self.ledger.total_uplink,
            cum_downlink=self.ledger.total_downlink,
            weighted_total=self.ledger.weighted_total,
            degenerate_kmeans=self._degenerate,
        )


@dataclass
class ExperimentResult:
    metrics: list
    summary: dict


def rounds_to_target(metrics, target: float) -> Optional[int]:
    for m in metrics:
        if m.accuracy >= target:
            return m.round
    return None


def summarize(metrics, cfg: RoundConfig) -> dict:
    hit = rounds_to_target(metrics, cfg.target_accuracy)
    last = metrics[-1] if metrics else None
    return {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rounds_run": len(metrics),
        "target_accuracy": cfg.target_accuracy,
        "rounds_to_target": hit,
        "peak_accuracy": max((m.accuracy for m in metrics), default=None),
        "final_accuracy": last.accuracy if last else None,
        "cost_at_target": metrics[hit - 1].weighted_total if hit else None,
        "total_uplink": last.cum_uplink if last else 0,
        "total_downlink": last.cum_downlink if last else 0,
        "weighted_total": last.weighted_total if last else 0.0,
        "uplink_per_client_round": (last.cum_uplink / sum(m.participants for m in metrics)) if last else None,
    }


def run_experiment(cfg: RoundConfig, model: Model, fed: FederationData, stop_at_target: bool = False,
                   state: Optional[ModelState] = None) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds, or stop at the first round reaching the target."""
    sim = Simulator(cfg, model, fed, state)
    metrics = []
    for _ in range(cfg.rounds):
        m = sim.run_round()
        metrics.append(m)
        if stop_at_target and m.accuracy >= cfg.target_accuracy:
            break
    return ExperimentResult(metrics, summarize(metrics, cfg))


def aggregate_summaries(summaries) -> dict:
    """Mean and std of rounds-to-target across seeds; unreached counts as infinite."""
    rtt = [s["rounds_to_target"] for s in summaries]
    finite = [r for r in rtt if r is not None]
    mean = float(np.mean(finite)) if finite and len(finite) == len(rtt) else math.inf
    std = float(np.std(finite)) if finite and len(finite) == len(rtt) else math.inf
    peaks = [s["peak_accuracy"] for s in summaries if s["peak_accuracy"] is not None]
    return {
        "n_seeds": len(summaries),
        "rounds_to_target_mean": None if math.isinf(mean) else mean,
        "rounds_to_target_std": None if math.isinf(std) else std,
        "reached": len(finite),
        "peak_accuracy_mean": float(np.mean(peaks)) if peaks else None,
        "weighted_total_mean": float(np.mean([s["weighted_total"] for s in summaries])) if summaries else None,
    }


def metrics_row(m: RoundMetrics) -> dict:
    row = asdict(m)
    row["selection"] = ";".join("|".join(str(v) for v in layer) for layer in m.selection)
    return row
