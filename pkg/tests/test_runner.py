import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from corl_tsn.bench import build_benchmark, bundled_manifest, generate_expert_dataset, make_gridkey_task
from corl_tsn.runner import (
    ConfigError,
    MethodConfig,
    RehearsalBuffer,
    RunAborted,
    run_sequence,
    write_results,
)

FAST = dict(epochs=2, embed_dim=16, n_layers=1, eval_episodes=3, routing_batches=2, batch_size=32, memory_size=32)


@pytest.fixture(scope="module")
def grid_tasks():
    return build_benchmark(bundled_manifest("gridkey5"), seed=0, n_trajectories=20)


@pytest.fixture(scope="module")
def reach_tasks():
    return build_benchmark(bundled_manifest("pointreach3"), seed=0, n_trajectories=4)


def test_config_validation():
    with pytest.raises(ConfigError):
        MethodConfig("mystery")
    with pytest.raises(ConfigError):
        MethodConfig("affinity_a")
    with pytest.raises(ConfigError):
        MethodConfig("affinity_h", tau=0.5)
    with pytest.raises(ConfigError):
        MethodConfig("cumulative", replay_mix=0.5, replay_capacity=10)
    with pytest.raises(ConfigError):
        MethodConfig("tsn_core", keep_ratio=0.0)
    r = MethodConfig("cumulative").resolved("continuous")
    assert r.replay_capacity == 5000 and r.replay_mix is None and r.keep_ratio == 0.33
    r = MethodConfig("cumulative").resolved("discrete")
    assert r.replay_mix == 0.5 and r.keep_ratio == 0.5
    assert MethodConfig("tsn_core").resolved("discrete").reuse is False
    assert MethodConfig("affinity_l", tau=1.0).resolved("discrete").reuse is True


def test_single_task_has_no_routing(grid_tasks):
    res = run_sequence(grid_tasks[:1], MethodConfig("affinity_a", tau=0.5, **FAST))
    assert res.performance.values.shape == (1, 1)
    assert res.copy_count == 1
    assert [r["mode"] for r in res.routing_reports] == ["initial"]


def test_tsn_core_single_copy_disjoint_masks(grid_tasks):
    res = run_sequence(grid_tasks[:3], MethodConfig("tsn_core", **FAST))
    assert res.copy_count == 1
    model = res.registry.copies[0]
    for st_ in model.tsn_states().values():
        m = [st_.task_masks[t] for t in ("gk1", "gk2", "gk3")]
        assert not (m[0] & m[1]).any() and not (m[0] & m[2]).any() and not (m[1] & m[2]).any()
    P = res.performance.values
    assert res.metrics()["avg_forgetting"] == 0.0
    np.testing.assert_array_equal(P[1:, 0], P[0, 0])


def test_naive_forgets_dissimilar_task():
    envs = [make_gridkey_task(0, th, task_id=t, seed=i) for i, (t, th) in enumerate((("a", 0.0), ("b", 1.0)))]
    tasks = [(generate_expert_dataset(e, 60, seed=i), e) for i, e in enumerate(envs)]
    res = run_sequence(tasks, MethodConfig("naive", **dict(FAST, epochs=15, eval_episodes=10)))
    P = res.performance.values
    assert P[1, 0] < P[0, 0]


def test_capacity_exhaustion_aborts_cleanly(grid_tasks):
    with pytest.raises(RunAborted) as info:
        run_sequence(grid_tasks[:2], MethodConfig("tsn_core", keep_ratio=1.0, **FAST))
    partial = info.value.partial
    assert partial.status == "capacity_exhausted" and partial.stages_completed == 1
    assert np.isfinite(partial.performance.values[0]).all()
    assert partial.metrics() == {}


def test_copy_accounting_matches_reports(grid_tasks):
    res = run_sequence(grid_tasks, MethodConfig("affinity_a", tau=0.0, max_copies=3, **FAST))
    assert res.copy_count == len(res.registry.copies) == 3
    modes = [r["mode"] for r in res.routing_reports]
    assert modes[0] == "initial"
    assert 1 + modes.count("spawn") == res.copy_count
    for r in res.routing_reports[1:]:
        assert r["copies_after"] == r["copies_before"] + (r["mode"] == "spawn")
        if r["mode"] == "fallback":
            assert r["copies_before"] == r["max_copies"]
    assert len(set(res.registry.assignment.values())) == res.copy_count


def test_hybrid_and_replay_kl_record_components(grid_tasks):
    res = run_sequence(grid_tasks[:3], MethodConfig("affinity_h", tau=0.5, alpha=0.7, **FAST))
    rec = res.routing_reports[2]
    assert set(rec["components"]) == {"action", "latent"} and rec["alpha"] == 0.7
    res = run_sequence(grid_tasks[:2], MethodConfig("replay_kl", tau=1e9, **FAST))
    assert res.routing_reports[1]["mode"] == "reuse" and res.copy_count == 1


def test_cumulative_modes_run(reach_tasks):
    for kw in ({"replay_capacity": 150}, {"replay_mix": 0.5}):
        res = run_sequence(reach_tasks, MethodConfig("cumulative", **FAST, **kw))
        assert res.copy_count == 1 and np.isfinite(res.performance.values).all()


def test_determinism_small(grid_tasks, tmp_path):
    cfg = MethodConfig("affinity_l", tau=0.5, **FAST)
    a = run_sequence(grid_tasks[:3], cfg)
    b = run_sequence(grid_tasks[:3], cfg)
    assert a.performance.values.tobytes() == b.performance.values.tobytes()
    assert a.routing_reports == b.routing_reports
    out = write_results(a, tmp_path / "r")
    assert (out / "results.json").is_file() and (out / "performance.csv").is_file()
    assert (out / "checkpoint" / "registry.json").is_file()


@settings(max_examples=20, deadline=None)
@given(st.integers(10, 400), st.integers(1, 4), st.integers(0, 100))
def test_rehearsal_never_exceeds_capacity(capacity, n_tasks, seed):
    buf = RehearsalBuffer(capacity, seed)
    for i in range(n_tasks):
        env = make_gridkey_task(0, 0.0, task_id="g", seed=i)
        buf.add_task(generate_expert_dataset(env, 15, seed=i))
        assert buf.n_steps <= capacity
