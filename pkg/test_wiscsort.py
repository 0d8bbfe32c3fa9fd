"""
Tests de WiscSort: plan, phase RUN, runs d'IndexMap, fusion et tri complet
"""

import filecmp
import struct
from pathlib import Path

import numpy as np
import pytest

from device import Pattern, ledger_snapshot
from profiler import PoolPlan
from recfmt import DatasetMeta, RecordKind, RecordLayout, fixed_records, oracle_sort, validate
from report import MERGE_READ, MERGE_WRITE, RECORD_READ, RUN_READ, RUN_WRITE
from scheduler import ConcurrencyMode, PhaseGate, WorkerPools
from wiscsort import (
    RUN_HEADER_SIZE, CorruptRunError, IndexEntry, IndexMap, OffsetQueue, PlanError, SortConfig,
    SortError, SortMode, merge_init, merge_select_min, plan_sort, read_indexmap_run,
    refill_or_retire, run_read_klv, run_read_strided, sort_indexmap, wiscsort, write_indexmap_run,
)

FIXED = RecordLayout.fixed(10, 90)
KLV = RecordLayout.klv(10)


def _meta(records, layout=FIXED):
    total = records * layout.record_size if layout.is_fixed else 0
    return DatasetMeta(layout, records, 0, total, Path('input.dat'))


def _indexmap(pairs, key_size, kind=RecordKind.FIXED, vlengths=None):
    keys = np.frombuffer(b''.join(k for k, _ in pairs), dtype=np.uint8).reshape(-1, key_size)
    offsets = np.array([o for _, o in pairs], dtype=np.uint64)
    return IndexMap.build(keys, offsets, key_size, kind, vlengths)


def _klv_file(path, parts):
    path.write_bytes(b''.join(k + struct.pack('<I', len(v)) + v for k, v in parts))


# Plan


def test_plan_sort_sizes(pools):
    plan = plan_sort(_meta(1000), 9000, pools=pools)
    assert plan.mode is SortMode.MERGEPASS
    assert (plan.run_count, plan.records_per_run) == (2, 500)
    assert plan.run_ranges(1000) == [(0, 500), (500, 1000)]
    assert plan.entry_footprint == 18 and plan.offset_width == 5

    onepass = plan_sort(_meta(1000), 18_000, pools=pools)
    assert onepass.mode is SortMode.ONEPASS
    assert onepass.run_ranges(1000) == [(0, 1000)]

    below = plan_sort(_meta(1000), 17_999, pools=pools)
    assert below.mode is SortMode.MERGEPASS
    assert below.records_per_run == 996
    assert below.run_count == 2


def test_plan_sort_default_pools_keep_run_count():
    plan = plan_sort(_meta(1000), 9000)
    assert plan.pools.read_pool == 8
    assert (plan.records_per_run, plan.run_count) == (500, 2)
    # 130 ramené à 128: toujours 8 runs
    aligned = plan_sort(_meta(1000), 18 * 130)
    assert (aligned.records_per_run, aligned.run_count) == (128, 8)


def test_plan_sort_counts_nosync_worker_runs(pools):
    meta = _meta(1008)
    plan = plan_sort(meta, 18 * 12, read_buffer=15 * 84, pools=pools, mode=SortMode.MERGEPASS)
    assert (plan.run_count, plan.merge_runs) == (84, 84)
    with pytest.raises(PlanError):
        plan_sort(meta, 18 * 12, read_buffer=15 * 84, pools=pools, mode=SortMode.MERGEPASS,
                  concurrency=ConcurrencyMode.NOSYNC)
    nosync = plan_sort(meta, 18 * 12, read_buffer=15 * 336, pools=pools, mode=SortMode.MERGEPASS,
                       concurrency=ConcurrencyMode.NOSYNC)
    assert nosync.merge_runs == 336
    klv = plan_sort(_meta(600, KLV), 22 * 150, read_buffer=22 * 4, pools=pools,
                    concurrency=ConcurrencyMode.NOSYNC)
    assert klv.merge_runs == klv.run_count == 4


def test_plan_sort_forced_modes(pools):
    forced = plan_sort(_meta(1000), 1 << 20, pools=pools, mode=SortMode.MERGEPASS)
    assert forced.mode is SortMode.MERGEPASS and forced.run_count == 1
    assert plan_sort(_meta(0), 100, pools=pools).mode is SortMode.ONEPASS
    klv = plan_sort(_meta(100, KLV), 22 * 100, pools=pools)
    assert klv.mode is SortMode.ONEPASS
    assert klv.entry_footprint == 22 and klv.offset_width == 8


@pytest.mark.parametrize('kwargs', [
    dict(index_budget=0),
    dict(index_budget=17),
    dict(index_budget=9000, mode=SortMode.ONEPASS),
    dict(index_budget=9000, read_buffer=29),
    dict(index_budget=1 << 20, write_buffer=99),
    dict(index_budget=1 << 20, offset_width=9),
])
def test_plan_sort_errors(pools, kwargs):
    with pytest.raises(PlanError):
        plan_sort(_meta(1000), pools=pools, **kwargs)


# Phase RUN


def test_run_read_strided_reads_only_keys(device, make_dataset, pools):
    meta = make_dataset(device, FIXED, 1000)
    handle = device.open_file(meta.path)
    with WorkerPools(pools, device) as workers:
        im = run_read_strided(device, handle, FIXED, (0, 1000), workers, PhaseGate())
    records = fixed_records(meta.path, FIXED)
    assert np.array_equal(im.key_bytes(), records[:, :10])
    assert np.array_equal(im.offsets, np.arange(1000))
    assert not im.sorted
    ledger = ledger_snapshot(device)
    assert ledger.total_bytes(phase=RUN_READ) == 10_000
    assert ledger.total_bytes(phase=RUN_READ, pattern=Pattern.STRIDED) == 10_000
    assert ledger.total_ops(phase=RUN_READ) == 1000


def test_run_read_klv_value_offsets(device):
    _klv_file(device.root / 'klv.dat', [(b'c' * 10, b'12345'), (b'a' * 10, b''), (b'b' * 10, b'xyz')])
    handle = device.open_file('klv.dat')
    im, cursor = run_read_klv(device, handle, KLV, None)
    assert im.offsets.tolist() == [14, 33, 47]
    assert im.vlengths.tolist() == [5, 0, 3]
    assert cursor == 50
    assert ledger_snapshot(device).total_bytes(phase=RUN_READ) == 42

    first, cursor = run_read_klv(device, handle, KLV, None, max_records=2)
    assert len(first) == 2 and cursor == 33
    rest, cursor = run_read_klv(device, handle, KLV, None, start=cursor)
    assert rest.offsets.tolist() == [47] and cursor == 50


def test_run_read_klv_truncated(device):
    (device.root / 'cut.dat').write_bytes(b'k' * 10 + struct.pack('<I', 20) + b'short')
    with pytest.raises(SortError):
        run_read_klv(device, device.open_file('cut.dat'), KLV, None)
    (device.root / 'head.dat').write_bytes(b'k' * 12)
    with pytest.raises(SortError):
        run_read_klv(device, device.open_file('head.dat'), KLV, None)


def test_sort_indexmap_orders_by_key_then_offset():
    im = _indexmap([(b'b', 7), (b'a', 9), (b'b', 2), (b'a', 4)], 1)
    ordered = sort_indexmap(im)
    assert ordered.sorted
    assert [(e.key, e.offset) for e in map(ordered.entry, range(4))] == \
        [(b'a', 4), (b'a', 9), (b'b', 2), (b'b', 7)]
    assert len(sort_indexmap(IndexMap.empty(4))) == 0


def test_parallel_sample_sort_matches_single_argsort():
    rng = np.random.default_rng(3)
    keys = rng.integers(0, 256, size=(40_000, 3), dtype=np.uint8)
    im = IndexMap.build(keys, rng.permutation(40_000).astype(np.uint64), 3)
    with WorkerPools(PoolPlan(1, 1, 1, 4)) as workers:
        parallel = sort_indexmap(im, workers)
    assert np.array_equal(parallel.entries, sort_indexmap(im).entries)


# Runs


def test_run_file_roundtrip(device, make_dataset, pools):
    meta = make_dataset(device, FIXED, 1000)
    keys = fixed_records(meta.path, FIXED)[:, :10]
    im = sort_indexmap(IndexMap.build(keys, np.arange(1000, dtype=np.uint64), 10))
    run = write_indexmap_run(device, im, 'run-00000.im', None, None)
    assert run.count == 1000 and run.entry_size == 15
    assert run.size == RUN_HEADER_SIZE + 15_000
    assert ledger_snapshot(device).total_bytes(phase=RUN_WRITE) == 15_032

    loaded = read_indexmap_run(device, run.path)
    assert loaded.sorted
    assert np.array_equal(loaded.entries, im.entries)
    assert ledger_snapshot(device).total_bytes(phase=MERGE_READ) == 15_032


def test_klv_run_roundtrip_with_pools(device, pools):
    im = sort_indexmap(_indexmap([(b'zz', 300), (b'aa', 14)], 2, RecordKind.KLV, np.array([7, 0])))
    with WorkerPools(pools, device) as workers:
        run = write_indexmap_run(device, im, 'klv.im', workers, PhaseGate())
    assert run.offset_width == 8 and run.entry_size == 14
    loaded = read_indexmap_run(device, run.path)
    assert loaded.offsets.tolist() == [14, 300]
    assert loaded.vlengths.tolist() == [0, 7]


def test_run_write_rejects_bad_input(device):
    unsorted = _indexmap([(b'b', 1), (b'a', 0)], 1)
    with pytest.raises(SortError):
        write_indexmap_run(device, unsorted, 'bad.im', None, None)
    wide = sort_indexmap(_indexmap([(b'a', 1 << 40)], 1))
    with pytest.raises(SortError):
        write_indexmap_run(device, wide, 'wide.im', None, None, offset_width=5)


def test_corrupt_runs_are_detected(device):
    (device.root / 'magic.im').write_bytes(b'NOPE' + bytes(28))
    with pytest.raises(CorruptRunError):
        read_indexmap_run(device, 'magic.im')
    im = sort_indexmap(_indexmap([(b'a', 1), (b'b', 2)], 1))
    run = write_indexmap_run(device, im, 'short.im', None, None)
    with open(run.path, 'r+b') as f:
        f.truncate(run.size - 1)
    with pytest.raises(CorruptRunError):
        read_indexmap_run(device, run.path)
    with pytest.raises(CorruptRunError):
        merge_init(device, [run.path], 1000, None)


# Fusion


def _sorted_run(device, name, pairs):
    im = sort_indexmap(_indexmap(pairs, 4))
    return write_indexmap_run(device, im, name, None, None)


def test_merge_select_min_matches_oracle(device):
    rng = np.random.default_rng(11)
    runs, expected = [], []
    for run_id, count in enumerate((5, 40, 40)):
        pairs = [(rng.integers(0, 4, size=4, dtype=np.uint8).tobytes(), run_id * 1000 + i) for i in range(count)]
        runs.append(_sorted_run(device, f"r{run_id}.im", pairs))
        expected.extend(pairs)
    expected.sort()

    state = merge_init(device, runs, 9 * 30, None)
    assert state.buffer_entries == 30 and state.allotment == 10
    assert [c.end for c in state.cursors] == [5, 10, 10]

    merged = []
    retired_allotments = []
    while state.live:
        entry = merge_select_min(state)
        merged.append((entry.key, entry.offset))
        if state.exhausted_run is not None:
            if not refill_or_retire(state, state.exhausted_run, None):
                retired_allotments.append(state.allotment)
    assert merged == expected
    assert state.retirements == 3
    # chaque retrait redistribue le buffer entre les runs restantes
    assert retired_allotments == [15, 30, 30]
    with pytest.raises(SortError):
        merge_select_min(state)


def test_merge_init_errors(device):
    a = _sorted_run(device, 'a.im', [(b'aaaa', 0)])
    b = _sorted_run(device, 'b.im', [(b'bbbb', 1)])
    with pytest.raises(PlanError):
        merge_init(device, [a, b], 9, None)
    with pytest.raises(SortError):
        merge_init(device, [], 1000, None)
    other = write_indexmap_run(device, sort_indexmap(_indexmap([(b'cc', 2)], 2)), 'c.im', None, None)
    with pytest.raises(CorruptRunError):
        merge_init(device, [a, other], 1000, None)


def test_merge_skips_empty_runs(device):
    empty = write_indexmap_run(device, IndexMap.empty(4), 'empty.im', None, None)
    full = _sorted_run(device, 'full.im', [(b'abcd', 3)])
    state = merge_init(device, [empty, full], 1000, None)
    assert state.live == 1 and state.retirements == 1
    assert merge_select_min(state).offset == 3


def test_random_merges_emit_each_entry_once(device):
    rng = np.random.default_rng(2024)
    for instance in range(1000):
        run_count = int(rng.integers(1, 17))
        key_range = int(rng.integers(2, 256))
        runs, expected = [], []
        for run_id in range(run_count):
            count = int(rng.integers(1, 513))
            keys = rng.integers(0, key_range, size=(count, 4), dtype=np.uint8)
            pairs = [(keys[i].tobytes(), run_id * 1000 + i) for i in range(count)]
            runs.append(_sorted_run(device, f"m{run_id:02d}.im", pairs))
            expected.extend(pairs)
        expected.sort()

        read_buffer = 9 * int(rng.integers(run_count, 64 * run_count + 1))
        state = merge_init(device, runs, read_buffer, None)
        merged = []
        while state.live:
            entry = merge_select_min(state)
            merged.append((entry.key, entry.offset))
            if state.exhausted_run is not None:
                refill_or_retire(state, state.exhausted_run, None)
        assert len(merged) == len(expected), f"instance {instance}"
        assert len(set(offset for _, offset in merged)) == len(expected), f"instance {instance}"
        assert merged == expected, f"instance {instance}"
        assert state.retirements == run_count
        for run in runs:
            device.remove_file(run.path)


def test_offset_queue_klv_admission():
    queue = OffsetQueue(KLV, 60)
    queue.push(IndexEntry(b'k' * 10, 14, 10))
    second = IndexEntry(b'k' * 10, 100, 19)
    assert queue.admits(second)
    queue.push(second)
    assert queue.output_bytes == 57
    assert not queue.admits(IndexEntry(b'k' * 10, 200, 0))
    assert not queue.full
    with pytest.raises(SortError):
        queue.push(IndexEntry(b'k' * 10, 200, 0))


def test_offset_queue_fixed_capacity():
    queue = OffsetQueue(FIXED, 250)
    assert queue.capacity_entries == 2
    queue.push(IndexEntry(b'k' * 10, 0))
    queue.push(IndexEntry(b'k' * 10, 1))
    assert queue.full and not queue.admits(IndexEntry(b'k' * 10, 2))
    queue.clear()
    assert len(queue) == 0 and queue.output_bytes == 0


# Tri complet


def _sort(device, meta, mode, budget, concurrency=ConcurrencyMode.NO_OVERLAP, pools=None, **kwargs):
    cfg = SortConfig(mode=mode, concurrency=concurrency, index_budget=budget,
                     read_buffer=kwargs.pop('read_buffer', 1500),
                     write_buffer=kwargs.pop('write_buffer', 10_000),
                     pools=pools or PoolPlan(4, 4, 2, 2), **kwargs)
    return wiscsort(device, meta, 'out.dat', cfg)


def test_onepass_traffic(device, make_dataset):
    meta = make_dataset(device, FIXED, 1000)
    result = _sort(device, meta, SortMode.AUTO, 1 << 20)
    assert result.plan.mode is SortMode.ONEPASS
    assert validate(meta.path, result.output, FIXED).ok
    ledger = ledger_snapshot(device)
    assert ledger.total_bytes(phase=RUN_READ, pattern=Pattern.STRIDED) == 10_000
    assert ledger.total_bytes(phase=RECORD_READ, pattern=Pattern.RANDOM) == 90_000
    assert ledger.total_bytes(phase=RUN_WRITE) == 100_000
    assert ledger.total_bytes() == 200_000
    assert not any(phase.startswith('MERGE') for phase in ledger.phases())


def test_mergepass_traffic(device, make_dataset):
    meta = make_dataset(device, FIXED, 1000)
    result = _sort(device, meta, SortMode.AUTO, 9000)
    assert result.plan.mode is SortMode.MERGEPASS
    assert len(result.run_files) == 2
    assert validate(meta.path, result.output, FIXED).ok
    ledger = ledger_snapshot(device)
    headers = 2 * RUN_HEADER_SIZE
    assert ledger.total_bytes(phase=RUN_READ) == 10_000
    assert ledger.total_bytes(phase=RUN_WRITE) == 15_000 + headers
    assert ledger.total_bytes(phase=MERGE_READ) == 15_000 + headers
    assert ledger.total_bytes(phase=RECORD_READ) == 90_000
    assert ledger.total_bytes(phase=MERGE_WRITE) == 100_000
    assert ledger.total_bytes() == 230_000 + 2 * headers
    assert result.merge.selected == 1000
    assert result.merge.refills > 0
    assert not list(device.root.glob('.runs-*'))


def test_keep_runs(device, make_dataset):
    meta = make_dataset(device, FIXED, 300)
    result = _sort(device, meta, SortMode.MERGEPASS, 1800, keep_runs=True)
    assert all(run.path.exists() for run in result.run_files)
    assert sum(run.count for run in result.run_files) == 300


@pytest.mark.parametrize('concurrency', list(ConcurrencyMode))
@pytest.mark.parametrize('mode', [SortMode.ONEPASS, SortMode.MERGEPASS])
def test_fixed_sort_matches_oracle(device, make_dataset, tmp_path, concurrency, mode):
    meta = make_dataset(device, FIXED, 1200, seed=21)
    budget = 1 << 20 if mode is SortMode.ONEPASS else 18 * 300
    result = _sort(device, meta, mode, budget, concurrency)
    assert result.plan.mode is mode
    oracle_sort(meta.path, tmp_path / 'oracle.dat', FIXED)
    assert filecmp.cmp(result.output, tmp_path / 'oracle.dat', shallow=False)


@pytest.mark.parametrize('concurrency', list(ConcurrencyMode))
@pytest.mark.parametrize('mode', [SortMode.ONEPASS, SortMode.MERGEPASS])
def test_klv_sort_matches_oracle(device, make_dataset, tmp_path, concurrency, mode):
    meta = make_dataset(device, KLV, 600, seed=5, vlen_min=0, vlen_max=40)
    budget = 1 << 20 if mode is SortMode.ONEPASS else 22 * 150
    result = _sort(device, meta, mode, budget, concurrency, write_buffer=2000)
    if mode is SortMode.MERGEPASS:
        assert result.plan.run_count == 4
    oracle_sort(meta.path, tmp_path / 'oracle.dat', KLV)
    assert filecmp.cmp(result.output, tmp_path / 'oracle.dat', shallow=False)
    assert validate(meta.path, result.output, KLV).ok


def test_single_thread_sort(device, make_dataset):
    meta = make_dataset(device, FIXED, 500)
    result = _sort(device, meta, SortMode.MERGEPASS, 18 * 100, single_thread=True)
    assert result.plan.pools == PoolPlan.single_thread()
    assert validate(meta.path, result.output, FIXED).ok


def test_empty_dataset(device, make_dataset):
    meta = make_dataset(device, FIXED, 0)
    result = _sort(device, meta, SortMode.AUTO, 1000)
    assert result.output.stat().st_size == 0
    assert ledger_snapshot(device).total_bytes() == 0


def test_plan_error_surfaces(device, make_dataset):
    meta = make_dataset(device, FIXED, 100)
    with pytest.raises(PlanError):
        _sort(device, meta, SortMode.ONEPASS, 100)


def test_nosync_mergepass_at_read_buffer_limit(device, make_dataset, tmp_path):
    meta = make_dataset(device, FIXED, 1008, seed=3)
    result = _sort(device, meta, SortMode.MERGEPASS, 18 * 12, ConcurrencyMode.NOSYNC, read_buffer=15 * 336)
    assert result.plan.merge_runs == 336
    assert len(result.run_files) == 336
    oracle_sort(meta.path, tmp_path / 'oracle.dat', FIXED)
    assert filecmp.cmp(result.output, tmp_path / 'oracle.dat', shallow=False)
    assert not list(device.root.glob('.runs-*'))


def test_nosync_read_buffer_too_small_fails_before_run_phase(device, make_dataset):
    meta = make_dataset(device, FIXED, 1008, seed=3)
    with pytest.raises(PlanError):
        _sort(device, meta, SortMode.MERGEPASS, 18 * 12, ConcurrencyMode.NOSYNC, read_buffer=15 * 335)
    assert ledger_snapshot(device).total_bytes() == 0
    assert not list(device.root.glob('.runs-*'))


def test_failed_merge_removes_runs(device, make_dataset, monkeypatch):
    import wiscsort as wiscsort_module

    def broken_merge(*args, **kwargs):
        raise SortError('fusion interrompue')

    monkeypatch.setattr(wiscsort_module, 'mergepass', broken_merge)
    meta = make_dataset(device, FIXED, 400)
    with pytest.raises(SortError):
        _sort(device, meta, SortMode.MERGEPASS, 18 * 100)
    assert not list(device.root.glob('.runs-*'))


def test_ledger_is_deterministic(make_device, make_dataset):
    frames = []
    for _ in range(2):
        dev = make_device('braid')
        meta = make_dataset(dev, FIXED, 800, seed=9)
        _sort(dev, meta, SortMode.MERGEPASS, 18 * 200)
        frames.append(ledger_snapshot(dev).to_frame())
    assert frames[0].equals(frames[1])
