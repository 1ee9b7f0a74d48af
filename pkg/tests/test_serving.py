import pytest

from cadet.model import ModelConfig, init_params
from cadet.serving import ConstantCost, ModelCost, ServiceConfig, run_sim, synthetic_request

L, N = 256, 64


def test_saturated_throughput_is_one_over_l():
    r = run_sim(ServiceConfig(), ConstantCost(10.0))
    assert r.throughput_rps == pytest.approx(100.0, rel=0.02)
    assert r.consumer_utilization == pytest.approx(1.0, abs=0.01)
    assert r.n_requests == 10_000


def test_single_worker_without_preprocessing_saturates_consumer():
    r = run_sim(ServiceConfig(n_preprocess_workers=1), ConstantCost(5.0))
    assert r.consumer_utilization == pytest.approx(1.0, abs=0.01)


def test_preprocessing_bottleneck():
    per_token = 10 * 2.0 / (L + N)  # ten times the 2 ms inference cost
    r = run_sim(ServiceConfig(n_preprocess_workers=1, preprocess_ms_per_token=per_token), ConstantCost(2.0))
    assert r.throughput_rps == pytest.approx(1000.0 / 20.0, rel=0.02)
    assert r.consumer_utilization < 0.15


@pytest.mark.parametrize("workers", [1, 2, 4, 8])
@pytest.mark.parametrize("l_ms", [1.0, 4.0])
def test_throughput_bounded_by_slowest_stage(workers, l_ms):
    per_token = 0.01
    r = run_sim(
        ServiceConfig(n_preprocess_workers=workers, preprocess_ms_per_token=per_token, n_requests=3000),
        ConstantCost(l_ms),
    )
    producer_rate = workers * 1000.0 / (per_token * (L + N))
    bound = min(producer_rate, 1000.0 / l_ms)
    assert r.throughput_rps <= bound * 1.02
    assert r.throughput_rps == pytest.approx(bound, rel=0.02)


@pytest.mark.parametrize("rate", [30.0, 80.0, 95.0])
def test_littles_law_open_loop(rate):
    r = run_sim(ServiceConfig(arrival_rate_rps=rate, preprocess_ms_per_token=0.02, n_requests=10_000), ConstantCost(10.0))
    assert r.littles_law_error < 0.05
    assert r.latency_p99_ms >= r.latency_p50_ms >= 0


def test_littles_law_saturated():
    r = run_sim(ServiceConfig(queue_capacity=4), ConstantCost(10.0))
    assert r.littles_law_error < 0.05
    assert r.blocked_puts > 0 and r.max_queue_length == 4


def test_virtual_clock_is_deterministic():
    cfg = ServiceConfig(arrival_rate_rps=50.0, context_tokens=(10, 300), candidates=(1, 80), preprocess_ms_per_token=0.05)
    cost = lambda l, n: 0.01 * l + 0.05 * n
    assert run_sim(cfg, cost) == run_sim(cfg, cost)


def test_latency_budget_fraction():
    r = run_sim(ServiceConfig(arrival_rate_rps=20.0), ConstantCost(10.0))
    assert r.within_budget == 1.0
    r = run_sim(ServiceConfig(), ConstantCost(10.0))
    assert r.within_budget < 1.0  # saturation builds a backlog


def test_wall_clock_run():
    cfg = ServiceConfig(n_requests=150, clock="wall", queue_capacity=4)
    r = run_sim(cfg, ConstantCost(2.0))
    assert r.clock == "wall"
    assert r.throughput_rps <= 1000.0 / 2.0 * 1.02
    assert r.throughput_rps > 150.0
    assert r.latency_p99_ms >= r.latency_p50_ms > 0


def test_model_cost_runs_real_forward():
    config = ModelConfig(d_model=8, n_layers=1, n_heads=2, ad_vocab=32, feature_vocab=16)
    cost = ModelCost(init_params(config), config, repeats=1)
    assert cost(32, 8) > 0
    tokens = synthetic_request(32, 8, config)
    assert len(tokens["kind"]) == 40 and tokens["cand"].sum() == 8


@pytest.mark.parametrize(
    "kw",
    [dict(n_preprocess_workers=0), dict(queue_capacity=0), dict(arrival_rate_rps=0.0), dict(clock="sundial")],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ServiceConfig(**kw)
