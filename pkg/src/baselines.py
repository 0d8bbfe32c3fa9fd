#!/usr/bin/env python3
"""
Tris de comparaison
Tri externe par fusion (EMS), tri par échantillonnage en place sur le périphérique
et PmSort (séparation clé/valeur sans lecture stridée)
"""

import collections
import enum
import heapq
import logging
import math
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, List, Optional, Tuple

import numpy as np

import config
from device import Device, DeviceFile, Direction, RANDOM_READ, RANDOM_WRITE, SEQ_READ, SEQ_WRITE
from profiler import DeviceProfile, PoolPlan
from recfmt import DatasetMeta, RecordFormatError, RecordLayout, keys_as_strings
from report import (
    MERGE_OTHER, MERGE_READ, MERGE_WRITE, RUN_OTHER, RUN_READ, RUN_SORT, RUN_WRITE,
    PhaseClock,
)
from scheduler import (
    ConcurrencyMode, PhaseGate, PoolRole, WorkerPools, WriteBehind,
    enter_read_phase, enter_write_phase, split_range, write_sequential,
)
from wiscsort import (
    IndexMap, PlanError, RunFile, SortError, SortResult,
    mergepass, resolve_pools, sort_indexmap, write_indexmap_run,
)

logger = logging.getLogger(__name__)

SMALL_SEGMENT = 64
PIVOT_SAMPLE = 31


class UnsupportedLayoutError(SortError):
    """Algorithme réservé aux enregistrements de taille fixe."""


class Algorithm(enum.Enum):
    EMS = 'ems'
    SAMPLESORT = 'samplesort'
    PMSORT = 'pmsort'


@dataclass
class BaselineConfig:
    algorithm: Algorithm = Algorithm.EMS
    concurrency: ConcurrencyMode = ConcurrencyMode.NO_OVERLAP
    single_thread: bool = False
    memory_budget: int = config.DEFAULT_INDEX_BUDGET
    read_buffer: int = config.DEFAULT_READ_BUF
    write_buffer: int = config.DEFAULT_WRITE_BUF
    pools: Optional[PoolPlan] = None
    profile: Optional[DeviceProfile] = None
    keep_runs: bool = False


def split_records(data: bytes, layout: RecordLayout) -> Tuple[List[Tuple[bytes, bytes]], int]:
    """
    Découpe un bloc en enregistrements complets.

    Returns:
        ([(clé, enregistrement)], octets consommés)
    """
    key_size = layout.key_size
    records = []
    if layout.is_fixed:
        size = layout.record_size
        count = len(data) // size if size else 0
        for i in range(count):
            record = data[i * size:(i + 1) * size]
            records.append((record[:key_size], record))
        return records, count * size
    head = layout.header_size
    cursor = 0
    while cursor + head <= len(data):
        vlength = int.from_bytes(data[cursor + key_size:cursor + head], 'little')
        end = cursor + head + vlength
        if end > len(data):
            break
        records.append((data[cursor:cursor + key_size], data[cursor:end]))
        cursor = end
    return records, cursor


class RecordStream:
    """
    Lecture séquentielle par blocs d'un fichier d'enregistrements.
    Un enregistrement KLV à cheval sur deux blocs est reporté au bloc suivant.
    """

    def __init__(self, device: Device, handle: DeviceFile, layout: RecordLayout, chunk_bytes: int, phase: str):
        self.device = device
        self.handle = handle
        self.layout = layout
        self.chunk_bytes = chunk_bytes
        self.phase = phase
        self.cursor = 0
        self.carry = b''

    @property
    def exhausted(self) -> bool:
        return self.cursor >= self.handle.size

    def next_records(self, gate: Optional[PhaseGate]) -> List[Tuple[bytes, bytes]]:
        while not self.exhausted:
            length = min(self.chunk_bytes, self.handle.size - self.cursor)
            with enter_read_phase(gate):
                data = self.device.read(self.handle, self.cursor, length, SEQ_READ, self.phase)
            self.cursor += length
            buffered = self.carry + data
            records, used = split_records(buffered, self.layout)
            self.carry = buffered[used:]
            if records:
                return records
        if self.carry:
            raise RecordFormatError(f"{self.handle.path.name}: {len(self.carry)} octets tronqués en fin de fichier")
        return []


# EMS


def read_record_range(device: Device, handle: DeviceFile, layout: RecordLayout, lo: int, hi: int,
                      pools: WorkerPools, gate: Optional[PhaseGate], phase: str = RUN_READ) -> np.ndarray:
    """Lecture séquentielle concurrente d'enregistrements complets [lo, hi) en tableau (n, R)."""
    size = layout.record_size

    def read_span(span):
        start, stop = span
        return handle.read(start * size, (stop - start) * size, SEQ_READ, phase)

    with enter_read_phase(gate):
        chunks = pools.run(PoolRole.READ, read_span, split_range(lo, hi, pools.size(PoolRole.READ)))
    return np.frombuffer(b''.join(chunks), dtype=np.uint8).reshape(-1, size)


def _sorted_payload(records: np.ndarray, layout: RecordLayout) -> bytes:
    order = np.argsort(keys_as_strings(records[:, :layout.key_size]), kind='stable')
    return records[order].tobytes()


def _write_run(device: Device, payload: bytes, path: Path, pools: Optional[WorkerPools],
               gate: Optional[PhaseGate], clock: PhaseClock) -> Path:
    with clock.measure(RUN_WRITE):
        handle = device.create_file(path, len(payload))
        try:
            if pools is None:
                handle.write(0, payload, SEQ_WRITE, RUN_WRITE)
            else:
                write_sequential(gate, handle, 0, payload, pools, RUN_WRITE)
        finally:
            device.close_file(handle)
    return handle.path


def _ems_runs_nosync(device, in_handle, layout, ranges, pools, run_dir, clock) -> List[Path]:
    def worker(task):
        run_id, worker_id, (lo, hi) = task
        with clock.measure(RUN_READ):
            records = np.frombuffer(in_handle.read(lo * layout.record_size, (hi - lo) * layout.record_size,
                                                   SEQ_READ, RUN_READ), dtype=np.uint8)
        with clock.measure(RUN_SORT):
            payload = _sorted_payload(records.reshape(-1, layout.record_size), layout)
        return _write_run(device, payload, run_dir / f"ems-{run_id:05d}-{worker_id:03d}.run", None, None, clock)

    tasks = [(run_id, worker_id, span)
             for run_id, (lo, hi) in enumerate(ranges)
             for worker_id, span in enumerate(split_range(lo, hi, pools.size(PoolRole.READ)))]
    return pools.run(PoolRole.READ, worker, tasks)


def ems_generate_runs(device: Device, in_handle: DeviceFile, meta: DatasetMeta, memory_budget: int,
                      pools: WorkerPools, gate: PhaseGate, run_dir: Path, clock: PhaseClock) -> List[Path]:
    """Phase RUN d'EMS: blocs d'enregistrements complets lus, triés puis écrits en runs."""
    layout = meta.layout
    if layout.is_fixed:
        per_run = max(1, memory_budget // max(1, layout.record_size))
        ranges = [(lo, min(lo + per_run, meta.record_count)) for lo in range(0, meta.record_count, per_run)]
        if gate.mode is ConcurrencyMode.NOSYNC:
            return _ems_runs_nosync(device, in_handle, layout, ranges, pools, run_dir, clock)

    background = (ThreadPoolExecutor(max_workers=1, thread_name_prefix='runwriter')
                  if gate.mode is ConcurrencyMode.OVERLAP else None)
    pending = []

    def emit(payload: bytes, run_id: int):
        path = run_dir / f"ems-{run_id:05d}.run"
        if background is not None:
            pending.append(background.submit(_write_run, device, payload, path, pools, gate, clock))
        else:
            pending.append(_write_run(device, payload, path, pools, gate, clock))

    try:
        if layout.is_fixed:
            for run_id, (lo, hi) in enumerate(ranges):
                with clock.measure(RUN_READ):
                    records = read_record_range(device, in_handle, layout, lo, hi, pools, gate)
                with clock.measure(RUN_SORT):
                    payload = _sorted_payload(records, layout)
                emit(payload, run_id)
        else:
            stream = RecordStream(device, in_handle, layout, max(1, memory_budget), RUN_READ)
            run_id = 0
            while True:
                with clock.measure(RUN_READ):
                    records = stream.next_records(gate)
                if not records:
                    break
                with clock.measure(RUN_SORT):
                    records.sort(key=lambda item: item[0])
                    payload = b''.join(record for _, record in records)
                emit(payload, run_id)
                run_id += 1
    finally:
        if background is not None:
            background.shutdown(wait=True)
    return [item.result() if background is not None else item for item in pending]


class _OutputSink:
    """Copie d'enregistrements vers la sortie via le buffer d'écriture (ou un tampon local en NoSync)."""

    def __init__(self, writer: WriteBehind, capacity: int):
        self.writer = writer
        self.capacity = capacity
        self.local = bytearray()

    def _flush_local(self):
        if self.local:
            self.writer.write_direct(self.writer.reserve(len(self.local)), bytes(self.local))
            self.local.clear()

    def copy(self, record: bytes) -> None:
        if len(record) > self.capacity:
            raise SortError(f"enregistrement de {len(record)} o plus grand que le buffer d'écriture")
        if self.writer.direct:
            if len(self.local) + len(record) > self.capacity:
                self._flush_local()
            self.local += record
            return
        if self.writer.buffer.remaining < len(record):
            self.writer.flush()
        self.writer.buffer.append(record)

    def finish(self):
        self._flush_local()
        self.writer.close()


def ems_merge(device: Device, run_paths: List[Path], out_handle: DeviceFile, layout: RecordLayout,
              read_buffer: int, write_buffer: int, pools: WorkerPools, gate: PhaseGate,
              clock: Optional[PhaseClock] = None) -> int:
    """
    Fusion EMS: un seul thread cherche le minimum et copie l'enregistrement complet
    dans le buffer d'écriture; vidages séquentiels par le pool d'écriture.

    Returns:
        Nombre d'enregistrements fusionnés
    """
    clock = clock or PhaseClock()
    if not run_paths:
        return 0

    def allotment(live: int) -> int:
        share = read_buffer // live
        if layout.is_fixed:
            share -= share % layout.record_size
            if share < layout.record_size:
                raise PlanError(f"buffer de lecture ({read_buffer} o) trop petit pour {live} runs")
        return max(1, share)

    streams = [RecordStream(device, device.open_file(path, readonly=True), layout, 0, MERGE_READ)
               for path in run_paths]
    for stream in streams:
        stream.chunk_bytes = allotment(len(streams))
    pending: List[Deque[Tuple[bytes, bytes]]] = [collections.deque() for _ in streams]
    heap: List[Tuple[bytes, int, int, bytes]] = []
    live = len(streams)
    sequence = [0] * len(streams)

    def advance(run_id: int) -> None:
        nonlocal live
        if not pending[run_id]:
            with clock.measure(MERGE_READ):
                pending[run_id].extend(streams[run_id].next_records(gate))
            if not pending[run_id]:
                live -= 1
                device.close_file(streams[run_id].handle)
                if live:
                    for stream in streams:
                        stream.chunk_bytes = allotment(live)
                return
        key, record = pending[run_id].popleft()
        heapq.heappush(heap, (key, run_id, sequence[run_id], record))
        sequence[run_id] += 1

    for run_id in range(len(streams)):
        advance(run_id)

    merged = 0
    selecting = 0.0
    sink = _OutputSink(WriteBehind(gate, pools, out_handle, write_buffer, MERGE_WRITE), write_buffer)
    try:
        while heap:
            started = time.perf_counter()
            _, run_id, _, record = heapq.heappop(heap)
            selecting += time.perf_counter() - started
            with clock.measure(MERGE_WRITE):
                sink.copy(record)
            merged += 1
            advance(run_id)
        with clock.measure(MERGE_WRITE):
            sink.finish()
    except BaseException:
        sink.writer.abort()
        raise
    clock.add(MERGE_OTHER, selecting)
    return merged


def ems_sort(device: Device, meta: DatasetMeta, output_path, cfg: Optional[BaselineConfig] = None) -> SortResult:
    """
    Tri externe par fusion à un niveau: runs d'enregistrements complets puis fusion k-voies.

    Args:
        device: Périphérique portant l'entrée, les runs et la sortie
        meta: Jeu de données
        output_path: Fichier de sortie
        cfg: Configuration (concurrence, buffers, budget mémoire des runs)

    Returns:
        Résultat du tri
    """
    cfg = cfg or BaselineConfig()
    clock = PhaseClock()
    with clock.measure(RUN_OTHER):
        pool_plan = resolve_pools(meta.layout, cfg.pools, cfg.profile, cfg.single_thread)
        gate = PhaseGate(cfg.concurrency)
        in_handle = device.open_file(meta.path, readonly=True)
        out_handle = device.create_file(output_path, meta.total_bytes)
    logger.info(f"EMS ({cfg.concurrency.value}) sur {Path(meta.path).name}: {meta.record_count} enregistrements")
    run_dir = Path(tempfile.mkdtemp(prefix='.ems-', dir=device.root))
    try:
        with WorkerPools(pool_plan, device) as pools:
            runs = ems_generate_runs(device, in_handle, meta, cfg.memory_budget, pools, gate, run_dir, clock)
            ems_merge(device, runs, out_handle, meta.layout, cfg.read_buffer, cfg.write_buffer, pools, gate, clock)
        if not cfg.keep_runs:
            for path in runs:
                device.remove_file(path)
            run_dir.rmdir()
    finally:
        device.close_file(in_handle)
        device.close_file(out_handle)
    return SortResult('ems', out_handle.path, clock)


# Tri par échantillonnage en place


def _partition_step(device: Device, handle: DeviceFile, layout: RecordLayout, segment: Tuple[int, int],
                    gate: Optional[PhaseGate], phase: str) -> List[Tuple[int, int]]:
    # un niveau: classement stable (< pivot, = pivot, > pivot), seuls les enregistrements déplacés sont réécrits
    lo, hi = segment
    n = hi - lo
    size = layout.record_size
    with enter_read_phase(gate):
        records = device.read_records(handle, 0, size, np.arange(lo, hi), size, RANDOM_READ, phase)
    keys = keys_as_strings(records[:, :layout.key_size])

    if n <= SMALL_SEGMENT:
        order = np.argsort(keys, kind='stable')
        children = []
    else:
        sample = np.sort(keys[np.linspace(0, n - 1, num=min(n, PIVOT_SAMPLE)).astype(np.int64)])
        pivot = sample[len(sample) // 2]
        less = np.flatnonzero(keys < pivot)
        equal = np.flatnonzero(keys == pivot)
        greater = np.flatnonzero(keys > pivot)
        order = np.concatenate((less, equal, greater))
        split = lo + len(less) + len(equal)
        children = [s for s in ((lo, lo + len(less)), (split, hi)) if s[1] - s[0] > 1]

    moved = np.flatnonzero(order != np.arange(n))
    if len(moved):
        with enter_write_phase(gate):
            device.write_records(handle, 0, size, lo + moved, records[order[moved]], RANDOM_WRITE, phase)
    return children


def samplesort_inplace(device: Device, handle: DeviceFile, layout: RecordLayout, pools: WorkerPools,
                       gate: Optional[PhaseGate] = None, phase: str = RUN_SORT) -> int:
    """
    Tri par échantillonnage directement sur les enregistrements du périphérique.
    Chaque niveau partitionne les segments en parallèle; tout déplacement est du trafic périphérique.

    Returns:
        Nombre de niveaux
    """
    if not layout.is_fixed:
        raise UnsupportedLayoutError("le tri en place exige des enregistrements fixes")
    count = handle.size // layout.record_size if layout.record_size else 0
    segments = [(0, count)] if count > 1 else []
    levels = 0
    while segments:
        workers = min(pools.size(PoolRole.RANDOM_READ), len(segments))
        with device.declare_workers(Direction.WRITE, workers):
            children = pools.run(PoolRole.RANDOM_READ,
                                 lambda segment: _partition_step(device, handle, layout, segment, gate, phase),
                                 segments)
        segments = [segment for group in children for segment in group]
        levels += 1
    logger.debug(f"Tri en place: {levels} niveaux pour {count} enregistrements")
    return levels


def samplesort(device: Device, meta: DatasetMeta, output_path,
               cfg: Optional[BaselineConfig] = None) -> SortResult:
    """Copie l'entrée vers la sortie puis la trie en place."""
    cfg = cfg or BaselineConfig(algorithm=Algorithm.SAMPLESORT)
    layout = meta.layout
    if not layout.is_fixed:
        raise UnsupportedLayoutError("samplesort exige des enregistrements fixes")
    clock = PhaseClock()
    with clock.measure(RUN_OTHER):
        pool_plan = resolve_pools(layout, cfg.pools, cfg.profile, cfg.single_thread)
        gate = PhaseGate(cfg.concurrency)
        in_handle = device.open_file(meta.path, readonly=True)
        out_handle = device.create_file(output_path, meta.total_bytes)
    chunk = max(layout.record_size, cfg.read_buffer - cfg.read_buffer % max(1, layout.record_size))
    try:
        with WorkerPools(pool_plan, device) as pools:
            for offset in range(0, meta.total_bytes, chunk):
                length = min(chunk, meta.total_bytes - offset)
                with clock.measure(RUN_READ):
                    with enter_read_phase(gate):
                        data = in_handle.read(offset, length, SEQ_READ, RUN_READ)
                with clock.measure(RUN_WRITE):
                    write_sequential(gate, out_handle, offset, data, pools, RUN_WRITE)
            with clock.measure(RUN_SORT):
                samplesort_inplace(device, out_handle, layout, pools, gate)
    finally:
        device.close_file(in_handle)
        device.close_file(out_handle)
    return SortResult('samplesort', out_handle.path, clock)


# PmSort


def pmsort(device: Device, meta: DatasetMeta, output_path, cfg: Optional[BaselineConfig] = None) -> SortResult:
    """
    PmSort: la phase RUN charge les enregistrements complets, en extrait (clé, offset)
    et écrit des runs d'IndexMap; la fusion est celle de MergePass.
    La variante mono-thread exécute chaque étape sur un seul thread.
    """
    cfg = cfg or BaselineConfig(algorithm=Algorithm.PMSORT)
    layout = meta.layout
    if not layout.is_fixed:
        raise UnsupportedLayoutError("pmsort exige des enregistrements fixes")
    clock = PhaseClock()
    with clock.measure(RUN_OTHER):
        pool_plan = resolve_pools(layout, cfg.pools, cfg.profile, cfg.single_thread)
        gate = PhaseGate(cfg.concurrency)
        per_run = max(1, cfg.memory_budget // max(1, layout.record_size))
        in_handle = device.open_file(meta.path, readonly=True)
        out_handle = device.create_file(output_path, meta.total_bytes)
    result = SortResult('pmsort', out_handle.path, clock)
    run_dir = Path(tempfile.mkdtemp(prefix='.pmsort-', dir=device.root))
    runs: List[RunFile] = []
    try:
        with WorkerPools(pool_plan, device) as pools:
            for run_id, lo in enumerate(range(0, meta.record_count, per_run)):
                hi = min(lo + per_run, meta.record_count)
                with clock.measure(RUN_READ):
                    records = read_record_range(device, in_handle, layout, lo, hi, pools, gate)
                im = IndexMap.build(records[:, :layout.key_size], np.arange(lo, hi, dtype=np.uint64),
                                    layout.key_size, source=str(in_handle.path))
                with clock.measure(RUN_SORT):
                    im = sort_indexmap(im, pools)
                with clock.measure(RUN_WRITE):
                    runs.append(write_indexmap_run(device, im, run_dir / f"pm-{run_id:05d}.im", pools, gate))
            if runs:
                result.merge = mergepass(device, runs, in_handle, out_handle, layout, cfg.read_buffer,
                                         cfg.write_buffer, pools, gate, clock)
        result.run_files = runs
        if not cfg.keep_runs:
            for run in runs:
                device.remove_file(run.path)
            run_dir.rmdir()
    finally:
        device.close_file(in_handle)
        device.close_file(out_handle)
    logger.info(f"PmSort terminé: {math.ceil(meta.record_count / per_run) if meta.record_count else 0} runs")
    return result


SORTERS = {
    Algorithm.EMS: ems_sort,
    Algorithm.SAMPLESORT: samplesort,
    Algorithm.PMSORT: pmsort,
}


def run_baseline(device: Device, meta: DatasetMeta, output_path, cfg: BaselineConfig) -> SortResult:
    return SORTERS[cfg.algorithm](device, meta, output_path, cfg)
