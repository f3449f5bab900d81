from dataclasses import replace
from types import SimpleNamespace

import pytest

from gpusched.baselines import (
    POLICY_NAMES,
    ClassicalPolicy,
    StaticCriticalityPolicy,
    first_fit,
    hrrn_key,
    make_policy,
    response_ratio,
    static_order,
)
from gpusched.engine import ChainInstance, Engine
from gpusched.scheduler import ASYNC, OVERLAP
from gpusched.workload import NS_PER_MS, apply_factors, load_config, load_workload
from conftest import tiny_yaml


def chain_yaml(cid, deadline_ms, util, criticality=0):
    return f"""
  - id: {cid}
    period_ms: 100
    deadline_ms: {deadline_ms}
    criticality: {criticality}
    tasks:
      - cpu_ms: [1, 1]
        kernels:
          - {{id: 0, grid: 4, block: 256, exec_us: 1000, util: {util}}}
"""


def test_tighter_deadline_is_more_critical():
    cfg = load_workload(tiny_yaml(chain_yaml(0, 120, 0.5) + chain_yaml(1, 60, 0.5)))
    assert static_order(cfg.chains) == [1, 0]


def test_equal_deadlines_tie_by_chain_id():
    cfg = load_workload(tiny_yaml(chain_yaml(3, 100, 0.5) + chain_yaml(1, 100, 0.5)))
    assert static_order(cfg.chains) == [1, 3]


def test_static_map_is_pure_function_of_config():
    cfg = apply_factors(replace(load_config("default"), f_tight=0.4, seed=4))
    maps = []
    for _ in range(2):
        pol = StaticCriticalityPolicy()
        Engine(cfg, pol)
        maps.append(pol.priority_map())
    assert maps[0] == maps[1]
    tight = set(cfg.tight_chains)
    cpu = {c: m[0] for c, m in maps[0].items()}
    assert max(cpu[c] for c in tight) < min(cpu[c] for c in cpu if c not in tight)


def test_static_stream_priorities_follow_criticality():
    cfg = apply_factors(replace(load_config("default"), f_tight=0.4, seed=4))
    pol = StaticCriticalityPolicy()
    Engine(cfg, pol)
    pm = pol.priority_map()
    order = static_order(cfg.chains)
    stream_prios = [pm[c][1] for c in order]
    assert stream_prios == sorted(stream_prios)
    assert stream_prios[0] == -5 and stream_prios[-1] == 0


def test_first_fit_groups():
    assert first_fit([0.6, 0.3, 0.5]) == [[0, 1], [2]]


def test_round_robin_binding_prefers_lighter_task():
    text = tiny_yaml(chain_yaml(0, 100, 0.6) + chain_yaml(1, 100, 0.3) + chain_yaml(2, 100, 0.5))
    cfg = load_workload(text)
    pol = make_policy("rr-util")
    Engine(cfg, pol)
    insts = [ChainInstance(c, 0, 0) for c in cfg.chains]
    s0 = pol.bind_stream(insts[0], 0)
    s1 = pol.bind_stream(insts[1], 0)
    pol.bind_stream(insts[2], 0)
    assert len(pol.groups) == 2
    assert pol.member_of[insts[0]] is pol.member_of[insts[1]]
    assert s1.priority < s0.priority
    assert pol.member_of[insts[2]] is not pol.member_of[insts[0]]


def classical_inst(cid, deadline_ms, remaining_ms=10, t_arr=0):
    return SimpleNamespace(chain_id=cid, instance_id=0, t_arr=t_arr, deadline=deadline_ms * NS_PER_MS,
                           gpu_index=0, cpu_index=0, gpu_suffix=[remaining_ms * NS_PER_MS, 0],
                           cpu_suffix=[0.0, 0.0])


def classical(name):
    pol = ClassicalPolicy(name)
    pol.engine = SimpleNamespace(now=0)
    return pol


def test_edf_orders_by_absolute_deadline():
    pol = classical("edf")
    a, b = classical_inst(5, 50), classical_inst(1, 80)
    assert sorted([b, a], key=pol._order) == [a, b]


def test_sjf_ties_break_by_chain_id():
    pol = classical("sjf")
    a, b = classical_inst(4, 50), classical_inst(2, 90)
    assert sorted([a, b], key=pol._order) == [b, a]


def test_hrrn_favours_long_waiters():
    assert response_ratio(10, 10) == 2.0
    waited = classical_inst(0, 100, t_arr=0)
    fresh = classical_inst(1, 100, t_arr=40 * NS_PER_MS)
    now = 50 * NS_PER_MS
    assert hrrn_key(waited, now) < hrrn_key(fresh, now)


@pytest.mark.parametrize("name", POLICY_NAMES)
def test_registry_builds_every_policy(name):
    assert make_policy(name).name == name


def test_default_sync_modes():
    assert make_policy("urgengo").sync_mode == OVERLAP
    assert make_policy("vanilla").sync_mode == ASYNC
    assert make_policy("static", sync_mode="batched").sync_mode == "batched"


def test_unknown_policy_lists_choices():
    with pytest.raises(ValueError, match="vanilla"):
        make_policy("nosuch")


def test_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        make_policy("urgengo", variant="half")
