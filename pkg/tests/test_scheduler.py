import math
import random
from types import SimpleNamespace

import pytest

from gpusched.device import Gpu, InvariantViolation, KernelInstance
from gpusched.scheduler import (
    ActiveKernelBuffer,
    SchedulerConfig,
    batch_overlap_sync,
    cpu_priority_from_rank,
    create_stream_pool,
    delay_kernel_launch,
    early_chain_exit,
    get_stream_priority,
    map_cpu_priority,
    normalize_rank,
    plan_batches,
    stream_level,
    update_akb,
)
from gpusched.workload import DeviceParams, NS_PER_US, load_config
from oracles import batches_oracle, binding_rank_oracle, cpu_priority_oracle, ends_to_batches, level_oracle
from test_urgency import arrival_state
from gpusched.urgency import evaluate_urgency


def make_inst(chain_id, instance_id=0, ul=0.0, priority=50):
    return SimpleNamespace(chain_id=chain_id, instance_id=instance_id, ul=ul, t_eval=0, priority=priority, akb=None)


@pytest.fixture
def gpu():
    return Gpu(DeviceParams())


def kernels(n, util=0.5, inst=None):
    return [KernelInstance(1000.0, util, inst, i) for i in range(n)]


# ---------------------------------------------------------------- stream pools

def test_pool_of_six(gpu):
    pool = create_stream_pool({}, gpu, "t", 6)
    assert pool.priorities == [-5, -4, -3, -2, -1, 0]


def test_pool_of_two(gpu):
    assert len(create_stream_pool({}, gpu, "t", 2)) == 2


def test_pool_creation_is_idempotent(gpu):
    pools = {}
    a = create_stream_pool(pools, gpu, "t", 6)
    b = create_stream_pool(pools, gpu, "t", 6)
    assert a is b
    assert len(gpu.streams) == 6


# ---------------------------------------------------------------- stream binding

def akb_with(urgencies, gpu, chain_ids=None):
    akb = ActiveKernelBuffer()
    s = gpu.new_stream(0)
    for i, u in enumerate(urgencies):
        inst = make_inst(chain_ids[i] if chain_ids else 100 + i, ul=u)
        akb.insert(inst, s, 1, kernels(1, inst=inst))
    return akb


def test_reserved_level_above_threshold(gpu):
    pool = create_stream_pool({}, gpu, "t", 6)
    s = get_stream_priority(pool, akb_with([0.01], gpu), 0.016, 0.015)
    assert s.priority == -5


def test_rank_one_of_four_maps_to_second_highest(gpu):
    """Ties order by chain id: chain 2 precedes chain 5 and follows chain 1."""
    pool = create_stream_pool({}, gpu, "t", 6)
    akb = akb_with([0.014, 0.010, 0.006], gpu, chain_ids=[5, 3, 1])
    assert get_stream_priority(pool, akb, 0.014, 0.015, chain_id=2) is pool[1]
    assert get_stream_priority(pool, akb, 0.006, 0.015, chain_id=2) is pool[5]


def test_distinct_urgencies_rank_without_ties(gpu):
    pool = create_stream_pool({}, gpu, "t", 6)
    akb = akb_with([0.014, 0.010, 0.006], gpu)
    assert get_stream_priority(pool, akb, 0.02, 0.03) is pool[1]
    assert get_stream_priority(pool, akb, 0.001, 0.03) is pool[5]


def test_empty_buffer_binds_middle_level(gpu):
    pool = create_stream_pool({}, gpu, "t", 6)
    s = get_stream_priority(pool, ActiveKernelBuffer(), 0.01, 0.015)
    assert s is pool[math.ceil((6 - 1) / 2)]


def test_single_stream_pool_always_level_zero():
    assert stream_level(0.001, [(0.5, 0), (0.2, 1)], 1.0, 1) == 0


def test_stream_level_matches_oracles():
    rng = random.Random(1)
    for _ in range(2000):
        others = [(rng.choice([0.001, 0.002, 0.005, 0.01]), rng.randint(0, 10)) for _ in range(rng.randint(0, 12))]
        ul, cid = rng.choice([0.001, 0.002, 0.005, 0.01]), rng.randint(0, 10)
        levels = rng.randint(2, 8)
        want = level_oracle(binding_rank_oracle(others, ul, cid), len(others) + 1, levels - 1)
        assert stream_level(ul, others, math.inf, levels, cid) == want


# ---------------------------------------------------------------- rank normalization

@pytest.mark.parametrize("rank,n,levels,want", [(1, 1, 5, 3), (1, 4, 5, 1), (4, 4, 5, 5), (2, 4, 5, 2), (3, 4, 5, 4)])
def test_normalize_rank_examples(rank, n, levels, want):
    assert normalize_rank(rank, n, levels) == want


def test_normalize_rank_rejects_out_of_range():
    with pytest.raises(ValueError):
        normalize_rank(0, 3, 5)
    with pytest.raises(ValueError):
        normalize_rank(4, 3, 5)


def test_cpu_priority_is_rank_when_levels_suffice():
    assert [cpu_priority_from_rank(r, 11) for r in range(1, 12)] == list(range(1, 12))


def test_cpu_priority_compresses_beyond_os_levels():
    prios = [cpu_priority_from_rank(r, 300, 99) for r in range(1, 301)]
    assert prios[0] == 1 and prios[-1] == 99
    assert prios == sorted(prios)


def test_table_workflow_cpu_priorities():
    """C9 most urgent, C4/C6 tied at 8/9 broken by id, C10 last."""
    cfg = load_config("full")
    uls = {c.chain_id: evaluate_urgency(arrival_state(c), 0) for c in cfg.chains}
    prio = map_cpu_priority(uls)
    assert prio[9] == 1
    assert (prio[4], prio[6]) == (8, 9)
    assert prio[10] == 11
    assert sorted(prio.values()) == list(range(1, 12))


def test_single_chain_gets_top_priority():
    assert map_cpu_priority({3: 0.01}) == {3: 1}


def test_equal_urgency_ties_go_to_smaller_id():
    assert map_cpu_priority({7: 0.02, 2: 0.02}) == {2: 1, 7: 2}


def test_cpu_priorities_match_oracle():
    rng = random.Random(2)
    for _ in range(500):
        n = rng.randint(1, 130)
        uls = {c: rng.choice([0.001, 0.01, 0.02, rng.random()]) for c in range(n)}
        assert map_cpu_priority(uls) == cpu_priority_oracle(uls)


# ---------------------------------------------------------------- delayed launching

def test_delay_when_foreign_kernel_is_urgent(gpu):
    akb = akb_with([0.05], gpu)
    assert delay_kernel_launch(akb, 1, 0.4, 0.01, 0.03) == "Delay"


def test_small_kernels_are_exempt(gpu):
    akb = akb_with([0.05], gpu)
    assert delay_kernel_launch(akb, 1, 0.05, 0.01, 0.03) == "Proceed"


def test_own_chain_entries_do_not_delay(gpu):
    akb = ActiveKernelBuffer()
    inst = make_inst(1, ul=0.05)
    akb.insert(inst, gpu.new_stream(0), 1, kernels(1, inst=inst))
    assert delay_kernel_launch(akb, 1, 0.4, 0.01, 0.03) == "Proceed"


def test_urgent_launcher_never_delays(gpu):
    akb = akb_with([0.05], gpu)
    assert delay_kernel_launch(akb, 1, 0.4, 0.04, 0.03) == "Proceed"


# ---------------------------------------------------------------- batching

def test_batches_close_on_reaching_delta():
    ends = plan_batches([200, 200, 200, 400], 500)
    assert ends_to_batches(ends) == [[0, 1, 2], [3]]


def test_long_single_kernel_is_one_batch():
    assert plan_batches([10_000 * NS_PER_US], 500 * NS_PER_US) == [1]


def test_uniform_small_kernels_batch_by_fifty():
    ends = plan_batches([10 * NS_PER_US] * 100, 500 * NS_PER_US)
    assert ends == [50, 100]


def test_empty_segment_has_no_batches():
    assert plan_batches([], 500) == []


def test_batches_match_oracle():
    rng = random.Random(3)
    for _ in range(2000):
        est = [rng.randint(1, 900) for _ in range(rng.randint(1, 40))]
        delta = rng.randint(1, 2000)
        assert ends_to_batches(plan_batches(est, delta)) == batches_oracle(est, delta)


def test_overlap_waits_two_batches_back():
    assert [batch_overlap_sync(i) for i in range(4)] == [None, None, 0, 1]


def test_scheduler_config_validation():
    with pytest.raises(ValueError):
        SchedulerConfig(delta_eval_ns=0)
    with pytest.raises(ValueError):
        SchedulerConfig(util_exemption=1.5)


# ---------------------------------------------------------------- early exit

@pytest.mark.parametrize("ul,exit_", [(-0.01, True), (0.001, False)])
def test_early_exit_on_negative_urgency(ul, exit_):
    assert early_chain_exit(ul) is exit_


# ---------------------------------------------------------------- AKB

def test_akb_launch_then_sync(gpu):
    akb = ActiveKernelBuffer()
    s = gpu.new_stream(-1)
    inst = make_inst(4, ul=0.02)
    ks = kernels(3, inst=inst)
    update_akb(akb, "launch", inst, stream=s, batch_no=1, kernels=ks)
    entries = list(akb.entries())
    assert len(entries) == 3 and all(e.stream_id == s.stream_id for e in entries)
    update_akb(akb, "evaluate", inst, now=7, ul=0.03)
    assert {e.last_urgency for e in akb.entries()} == {0.03}
    update_akb(akb, "sync", inst, batch_no=1)
    assert len(akb) == 0 and inst.akb is None


def test_akb_partial_sync_keeps_later_batches(gpu):
    akb = ActiveKernelBuffer()
    s = gpu.new_stream(0)
    inst = make_inst(1)
    akb.insert(inst, s, 1, kernels(2, inst=inst))
    akb.insert(inst, s, 2, kernels(3, inst=inst))
    assert akb.remove_through(inst, 1) == 2
    assert len(akb) == 3


def test_akb_double_removal_is_an_invariant_violation(gpu):
    akb = ActiveKernelBuffer()
    inst = make_inst(1)
    akb.insert(inst, gpu.new_stream(0), 1, kernels(1, inst=inst))
    akb.remove_through(inst, 1)
    with pytest.raises(InvariantViolation):
        akb.remove_through(inst, 1)


def test_akb_rejects_second_stream(gpu):
    akb = ActiveKernelBuffer()
    inst = make_inst(1)
    akb.insert(inst, gpu.new_stream(0), 1, kernels(1, inst=inst))
    with pytest.raises(InvariantViolation):
        akb.insert(inst, gpu.new_stream(0), 2, kernels(1, inst=inst))


def test_akb_purge_and_max(gpu):
    akb = akb_with([0.01, 0.04], gpu)
    assert akb.max_urgency() == 0.04
    for g in list(akb.groups):
        akb.purge(g.inst)
    assert akb.max_urgency() is None and len(akb) == 0
