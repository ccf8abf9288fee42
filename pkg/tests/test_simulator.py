import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmpq import simulator as sim_mod
from fedmpq import wire
from fedmpq.learning import (
    TrainConfig,
    apply_server_update,
    build_model,
    evaluate,
    gen_synthetic_federation,
    local_train,
)
from fedmpq.pq_codec import CodecError
from fedmpq.seeding import derive_seed
from fedmpq.simulator import (
    CommLedger,
    ConfigError,
    RoundConfig,
    Simulator,
    aggregate_summaries,
    baseline_scalar_quantize,
    baseline_topk,
    metrics_row,
    rounds_to_target,
    run_experiment,
    weighted_cost,
)


@pytest.fixture(scope="module")
def small():
    fed = gen_synthetic_federation(20, 4, 6, 15, 0.5, 12, 0.5, seed=0, test_size=400, separation=2.0)
    return build_model("mlp", 6, 4, 8), fed


def cfg(**kw):
    base = dict(clients_per_round=5, M=3, K=8, D=2, residual=0.01, rounds=4, kmeans_iters=10, seed=1)
    base.update(kw)
    return RoundConfig(**base)


@pytest.mark.parametrize("bad", [
    dict(K=7), dict(strategy="qsgd"), dict(clients_per_round=0), dict(residual=1.5), dict(residual=-0.1),
    dict(sq_bits=17), dict(topk_ratio=0.0), dict(gamma=0.0), dict(M=0), dict(D=0), dict(rounds=-1),
])
def test_round_config_validation(bad):
    with pytest.raises(ConfigError):
        RoundConfig(**bad)


def test_spq_uses_one_codebook():
    assert RoundConfig(strategy="spq", M=4).effective_M == 1
    assert RoundConfig(M=4).effective_M == 4


def test_weighted_cost():
    assert weighted_cost(800, 5) == 105.0
    led = CommLedger()
    led.record(10, 80)
    led.record(6, 16)
    assert (led.total_uplink, led.total_downlink, led.weighted_total) == (16, 96, 28.0)


def test_ledger_matches_serialized_packets(small):
    model, fed = small
    s = Simulator(cfg(), model, fed, capture_packets=True)
    for _ in range(3):
        per_client_down = s.downlink_per_client()
        m = s.run_round()
        assert m.uplink_bytes == sum(len(p) for _, p in s.last_packets)
        assert m.downlink_bytes == per_client_down * 5
        assert m.weighted_total == m.cum_downlink / 8 + m.cum_uplink
        assert sum(m.selection[0]) == m.participants == 5
    expected_down = s.state.num_bytes() + sum(wire.codebook_set_size(3, 8, 2) for _ in s.schema)
    assert s.downlink_per_client() == expected_down


def test_uplink_matches_analytic_size(small):
    model, fed = small
    c = cfg(M=2, K=16, D=4, residual=0.05)
    s = Simulator(c, model, fed, capture_packets=True)
    s.run_round()
    per_client = 0
    for layer in s.schema:
        k = math.ceil(round(0.05 * layer.L, 9))
        per_client += 11 + math.ceil(layer.rows * 4 / 8) + 8 * k + 8 * (4 * 4 + 4)
    assert all(len(p) == per_client for _, p in s.last_packets)


@pytest.mark.parametrize("K,D,rho", [(8, 4, 0.01), (32, 2, 0.001), (4, 1, 0.0), (256, 8, 0.05)])
def test_compression_ratio_bound(K, D, rho):
    L = 4096
    s = wire.LayerSchema(0, L, K, D)
    k = math.ceil(round(rho * L, 9))
    ratio = wire.pq_block_size(s, k) / (4 * L)
    bits = int(math.log2(K))
    overhead = (wire.PQ_HEADER.size + (K // 2) * (4 * D + 4) + 1) / (4 * L)
    assert ratio <= bits / (32 * D) + 2 * rho + 2 / L + overhead
    assert ratio == (11 + math.ceil(L / D * bits / 8) + 8 * k + (K // 2) * (4 * D + 4)) / (4 * L)


def test_spq_packets_equal_fedmpq_single_codebook(small):
    model, fed = small
    a = Simulator(cfg(strategy="spq", M=4, residual=0.0), model, fed, capture_packets=True)
    b = Simulator(cfg(strategy="fedmpq", M=1, residual=0.0), model, fed, capture_packets=True)
    for _ in range(3):
        a.run_round()
        b.run_round()
        assert a.last_packets == b.last_packets
    assert np.array_equal(a.state.flat(), b.state.flat())


def test_uncompressed_matches_fedavg_reference(small):
    model, fed = small
    c = cfg(strategy="uncompressed", rounds=5)
    s = Simulator(c, model, fed)
    ref = s.state.copy()
    for r in range(5):
        chosen = s.sample_clients()
        total = [np.zeros(n) for n in ref.sizes]
        for cid in chosen:
            z = local_train(model, ref, fed.clients[cid], TrainConfig(0.1, 1.0, 1, 10, derive_seed(1, "client", r, int(cid))))
            for t, v in zip(total, z):
                t += v.astype(np.float64)
        ref = apply_server_update(ref, [(t / len(chosen)).astype(np.float32) for t in total], 1.0)
        s.run_round()
        assert np.array_equal(ref.flat(), s.state.flat())


def test_lossless_limit_tracks_uncompressed(small):
    model, fed = small
    a = Simulator(cfg(strategy="uncompressed"), model, fed)
    b = Simulator(cfg(residual=1.0), model, fed)
    for _ in range(4):
        a.run_round()
        b.run_round()
        x, y = a.state.flat().astype(np.float64), b.state.flat().astype(np.float64)
        assert np.linalg.norm(x - y) <= 1e-5 * np.linalg.norm(x)


def test_single_client_update_is_scaled_reconstruction(small):
    model, fed = small
    s = Simulator(cfg(clients_per_round=1, lr_server=0.5), model, fed)
    before = s.state.copy()
    books = s.codebooks
    (cid,) = s.sample_clients()
    z = local_train(model, before, fed.clients[cid], s._train_cfg("client", 0, int(cid)))
    _, recons, _ = sim_mod.compress_fedmpq(z, books, 0.01, 0.99)
    s.run_round()
    want = np.concatenate([np.asarray(l.values, np.float64) for l in before.layers]) + 0.5 * np.concatenate(recons)
    assert np.allclose(s.state.flat(), want, rtol=1e-5, atol=1e-6)


def test_failed_client_is_dropped(small, monkeypatch):
    model, fed = small
    s = Simulator(cfg(), model, fed)
    real = s._compress
    calls = []

    def flaky(z):
        calls.append(1)
        if len(calls) == 2:
            raise CodecError("synthetic failure")
        return real(z)

    monkeypatch.setattr(s, "_compress", flaky)
    m = s.run_round()
    assert m.participants == 4 and sum(m.selection[0]) == 4


def test_runs_are_deterministic(small):
    model, fed = small
    a = run_experiment(cfg(), model, fed)
    b = run_experiment(cfg(), model, fed)
    assert [metrics_row(m) for m in a.metrics] == [metrics_row(m) for m in b.metrics]


@pytest.mark.parametrize("strategy", ["scalar_quant", "topk_prune", "spq", "fedmpq"])
def test_strategies_run_and_learn(small, strategy):
    model, fed = small
    c = cfg(strategy=strategy, rounds=6)
    start = Simulator(c, model, fed).state
    res = run_experiment(c, model, fed)
    assert res.summary["peak_accuracy"] > evaluate(model, start, fed.test_set)[0] + 0.05
    assert res.metrics[-1].tau_max <= 1.0 + 1e-12


def test_no_public_mode_starts_from_zero_codebooks(small):
    model, fed = small
    s = Simulator(cfg(use_public=False), model, fed)
    assert not any(cbs.stacked().any() for cbs in s.codebooks)
    s.run_round()
    assert any(cbs.stacked().any() for cbs in s.codebooks)


def test_stop_at_target_and_summary(small):
    model, fed = small
    res = run_experiment(cfg(strategy="uncompressed", rounds=30, target_accuracy=0.6), model, fed, stop_at_target=True)
    hit = res.summary["rounds_to_target"]
    assert hit == len(res.metrics) and res.metrics[-1].accuracy >= 0.6
    assert res.summary["cost_at_target"] == res.metrics[-1].weighted_total
    never = run_experiment(cfg(strategy="uncompressed", rounds=2, target_accuracy=1.01), model, fed)
    assert never.summary["rounds_to_target"] is None
    agg = aggregate_summaries([res.summary, never.summary])
    assert agg["rounds_to_target_mean"] is None and agg["reached"] == 1


def test_rounds_to_target_helper():
    class M:
        def __init__(self, r, a):
            self.round, self.accuracy = r, a
    assert rounds_to_target([M(1, 0.5), M(2, 0.91), M(3, 0.95)], 0.9) == 2
    assert rounds_to_target([M(1, 0.5)], 0.9) is None


def test_scalar_quant_step_bound():
    z = np.random.default_rng(0).uniform(-1, 1, 1000)
    z[0], z[1] = -1.0, 1.0
    q = baseline_scalar_quantize(z, 16)
    assert np.max(np.abs(q.reconstruct() - z)) <= 2 / (2**16 - 1)


def test_scalar_quant_constant_passthrough():
    q = baseline_scalar_quantize(np.full(7, 0.3), 4)
    assert np.array_equal(q.reconstruct(), np.full(7, np.float32(0.3), dtype=np.float64))
    with pytest.raises(CodecError):
        baseline_scalar_quantize(np.ones(3), 0)


@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_scalar_quant_half_step(bits, seed):
    z = np.random.default_rng(seed).normal(size=50)
    q = baseline_scalar_quantize(z, bits)
    step = (q.hi - q.lo) / (2**bits - 1)
    assert np.max(np.abs(q.reconstruct() - z)) <= step / 2 + 1e-6 * (abs(q.hi) + abs(q.lo))


def test_topk_full_is_identity():
    z = np.random.default_rng(0).normal(size=40)
    assert np.allclose(baseline_topk(z, 1.0).densify(), z, rtol=1e-7)
    with pytest.raises(CodecError):
        baseline_topk(z, 0.0)
