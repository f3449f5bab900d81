from dataclasses import replace

import pytest

from gpusched.workload import (
    NS_PER_MS,
    ConfigError,
    LookupTable,
    MissingKernel,
    apply_factors,
    generate_arrivals,
    load_config,
    load_workload,
    lookup_exec_time,
    select_tight_chains,
    synthesize_kernel_times,
)
from conftest import ONE_KERNEL_CHAIN, tiny_yaml


def test_default_workflow_chain_c0():
    """C0 is the 150 ms LiDAR chain with a 120 ms deadline."""
    c0 = load_config("default").chain(0)
    assert c0.period_ns == 150 * NS_PER_MS
    assert c0.deadline_ns == 120 * NS_PER_MS
    assert c0.modality == "LiDAR"


def test_builtin_subsets():
    assert [c.chain_id for c in load_config("default").chains] == list(range(10))
    assert [c.chain_id for c in load_config("workflow2").chains] == list(range(6, 11))
    assert len(load_config("full").chains) == 11


def test_chain_totals_follow_table():
    """Chain CPU and GPU totals match the characteristics table."""
    cfg = load_config("full")
    expect = {0: (17.4, 28.4), 2: (21.0, 27.0), 9: (11.2, 46.1), 10: (17.8, 6.7)}
    for cid, (cpu, gpu) in expect.items():
        c = cfg.chain(cid)
        assert c.cpu_ns / NS_PER_MS == pytest.approx(cpu, abs=1e-6)
        assert c.gpu_ns / NS_PER_MS == pytest.approx(gpu, abs=1e-6)


def test_empty_chain_list_rejected():
    with pytest.raises(ConfigError, match="chains must be non-empty"):
        load_workload("chains: []\n")


def test_f_tight_out_of_range():
    with pytest.raises(ConfigError, match="f_tight"):
        load_workload(tiny_yaml(ONE_KERNEL_CHAIN, f_tight=1.2))


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        load_workload(tiny_yaml(ONE_KERNEL_CHAIN) + "bogus: 1\n")


def test_yaml_parse_error_has_location():
    with pytest.raises(ConfigError, match="line"):
        load_workload("chains: [\n  - id: 0\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_deadline_factor_scales():
    cfg = replace(load_config("default"), f_d=1.5, f_tight=0.0)
    scaled = apply_factors(cfg)
    assert scaled.chain(0).deadline_ns == 180 * NS_PER_MS


def test_identity_factors_leave_config_unchanged():
    cfg = replace(load_config("default"), f_a=1.0, f_d=1.0, f_tight=0.0)
    scaled = apply_factors(cfg)
    for a, b in zip(cfg.chains, scaled.chains):
        assert (a.period_ns, a.deadline_ns) == (b.period_ns, b.deadline_ns)
    assert scaled.tight_chains == ()


def test_arrival_factor_shortens_periods():
    scaled = apply_factors(replace(load_config("default"), f_a=1.25, f_tight=0.0))
    assert scaled.chain(0).period_ns == 120 * NS_PER_MS


@pytest.mark.parametrize("seed", range(20))
def test_tight_subset_has_forced_size(seed):
    """Ten chains at f_tight=0.4: four at 60 ms, six at 120 ms."""
    scaled = apply_factors(replace(load_config("default"), f_tight=0.4, seed=seed))
    deadlines = sorted(c.deadline_ns // NS_PER_MS for c in scaled.chains)
    assert deadlines == [60] * 4 + [120] * 6
    assert len(scaled.tight_chains) == 4


def test_tight_selection_is_seeded():
    ids = range(10)
    assert select_tight_chains(ids, 0.4, 3) == select_tight_chains(ids, 0.4, 3)
    picks = {select_tight_chains(ids, 0.4, s) for s in range(10)}
    assert len(picks) > 1


def test_arrivals_without_jitter():
    c = load_config("default").chain(0)
    assert generate_arrivals(c, 0.45, 0, 0) == [0, 150 * NS_PER_MS, 300 * NS_PER_MS]


def test_arrivals_zero_duration():
    assert generate_arrivals(load_config("default").chain(0), 0.0, 15 * NS_PER_MS, 0) == []


def test_arrival_jitter_bounds():
    """Offsets stay in [0, 15] ms and gaps in [135, 165] ms over 10^4 releases."""
    c = load_config("default").chain(0)
    arr = generate_arrivals(c, 1500.0, 15 * NS_PER_MS, 7)
    assert len(arr) == 10_000
    for i, t in enumerate(arr):
        assert 0 <= t - i * c.period_ns <= 15 * NS_PER_MS
    gaps = [b - a for a, b in zip(arr, arr[1:])]
    assert min(gaps) >= 135 * NS_PER_MS and max(gaps) <= 165 * NS_PER_MS


def test_single_kernel_takes_whole_budget():
    assert synthesize_kernel_times(1, 10 * NS_PER_MS, 1.0, 0) == [10 * NS_PER_MS]


def test_323_kernels_sum_exactly():
    times = synthesize_kernel_times(323, int(19.8 * NS_PER_MS), 1.0, 5)
    assert len(times) == 323
    assert sum(times) == int(19.8 * NS_PER_MS)
    assert min(times) >= 1


def test_synthesis_is_deterministic():
    assert synthesize_kernel_times(50, 7 * NS_PER_MS, 1.0, 11) == synthesize_kernel_times(50, 7 * NS_PER_MS, 1.0, 11)


def test_synthesis_rejects_impossible_budget():
    with pytest.raises(ValueError):
        synthesize_kernel_times(10, 5, 1.0, 0)


@pytest.fixture
def path_finder_table():
    t = LookupTable()
    t.add(0, 22, 512, 28_000, 0.19)
    t.add(0, 30, 512, 35_000, 0.25)
    t.add(1, 40, 512, 44_000, 0.42)
    return t


def test_lookup_rows(path_finder_table):
    assert lookup_exec_time(path_finder_table, 0, 22, 512) == (28_000, 0.19)
    assert lookup_exec_time(path_finder_table, 1, 40, 512) == (44_000, 0.42)


def test_lookup_missing_key(path_finder_table):
    with pytest.raises(MissingKernel):
        path_finder_table.lookup(9, 1, 1)


def test_lookup_keeps_history(path_finder_table):
    path_finder_table.add(0, 22, 512, 30_000, 0.2)
    assert path_finder_table.lookup(0, 22, 512) == (30_000, 0.2)
    assert len(path_finder_table.history(0, 22, 512)) == 2


def test_lookup_csv_roundtrip(path_finder_table, tmp_path):
    p = tmp_path / "lookup.csv"
    path_finder_table.write_csv(p)
    back = LookupTable.read_csv(p)
    assert back.lookup(1, 40, 512) == (44_000, 0.42)
    assert len(back) == len(path_finder_table)


def test_lookup_csv_bad_header(tmp_path):
    p = tmp_path / "lookup.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError, match="header"):
        LookupTable.read_csv(p)


def test_segments_must_interleave():
    bad = """
  - id: 0
    period_ms: 100
    deadline_ms: 100
    tasks:
      - cpu_ms: [1]
        kernels:
          - {id: 0, grid: 1, block: 1, exec_us: 10, util: 0.5, segment: 0}
          - {id: 1, grid: 1, block: 1, exec_us: 10, util: 0.5, segment: 1}
"""
    with pytest.raises(ConfigError, match="interleave"):
        load_workload(tiny_yaml(bad))
