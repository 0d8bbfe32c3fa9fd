#!/usr/bin/env python3
"""
Suites de benchmarks
Chaque job génère un jeu de données sur un périphérique neuf, trie, puis
produit une ligne CSV par (algorithme, variante, phase)
"""

import logging
import math
import threading
import time
from contextlib import nullcontext
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from baselines import Algorithm, BaselineConfig, read_record_range, run_baseline
from device import (
    Device, DeviceSpec, RANDOM_READ, RANDOM_WRITE, TrafficLedger,
    open_device, preset, resolve_spec,
)
from profiler import DeviceProfile, PoolPlan
from recfmt import DatasetMeta, RecordLayout, gen_dataset
from report import RUN_READ, PhaseClock, PhaseReport
from scheduler import ConcurrencyMode, PhaseGate, WorkerPools
from wiscsort import (
    SortConfig, SortMode, SortResult, in_memory_footprint, resolve_pools,
    run_read_strided, wiscsort,
)

logger = logging.getLogger(__name__)

BENCH_SCHEMA = 'bench/1'
BACKGROUND_PHASE = 'BACKGROUND'
SUITES = ('phase-breakdown', 'concurrency-models', 'vk-sweep', 'strided-vs-seq', 'devices', 'interference')
VK_SWEEP_VALUES = (5, 10, 50, 90, 246, 502)
DEVICE_PRESETS = ('bd', 'brd', 'bard')

BENCH_COLUMNS = [
    'schema', 'suite', 'device', 'algorithm', 'variant', 'records', 'key_size', 'value_size', 'phase',
    'read_bytes', 'write_bytes', 'read_sequential_bytes', 'read_strided_bytes', 'read_random_bytes',
    'write_sequential_bytes', 'write_random_bytes', 'injected_delay_ns', 'interference_lines', 'wall_s_host',
]
TOTAL_COLUMNS = ['read_bytes', 'write_bytes', 'injected_delay_ns', 'interference_lines']

# algorithmes de tri exposés (wiscsort se décline en onepass / mergepass)
SORTERS = ('onepass', 'mergepass', 'ems', 'samplesort', 'pmsort')


class BenchError(Exception):
    """Suite inconnue ou configuration de benchmark invalide."""


@dataclass
class BenchConfig:
    records: int = 400_000
    key_size: int = 10
    value_size: int = 90
    seed: int = 42
    device: Optional[str] = None
    runs: int = 4
    read_buffer: int = config.DEFAULT_READ_BUF
    write_buffer: int = config.DEFAULT_WRITE_BUF
    pools: Optional[PoolPlan] = None
    profile: Optional[DeviceProfile] = None
    value_sizes: Sequence[int] = VK_SWEEP_VALUES
    background_readers: int = 0
    background_writers: int = 2
    background_access: int = 4 * config.KIB

    @property
    def layout(self) -> RecordLayout:
        return RecordLayout.fixed(self.key_size, self.value_size)


def sort_dataset(device: Device, meta: DatasetMeta, output_path, algorithm: str = 'wiscsort',
                 mode: SortMode = SortMode.AUTO,
                 concurrency: ConcurrencyMode = ConcurrencyMode.NO_OVERLAP,
                 index_budget: int = config.DEFAULT_INDEX_BUDGET,
                 read_buffer: int = config.DEFAULT_READ_BUF, write_buffer: int = config.DEFAULT_WRITE_BUF,
                 pools: Optional[PoolPlan] = None, profile: Optional[DeviceProfile] = None,
                 single_thread: bool = False) -> SortResult:
    """
    Point d'entrée commun: wiscsort (onepass / mergepass / auto) ou un tri de comparaison.
    Pour les baselines, index_budget est la mémoire allouée à une run.
    """
    if algorithm in ('onepass', 'mergepass'):
        mode, algorithm = SortMode(algorithm), 'wiscsort'
    if algorithm == 'wiscsort':
        cfg = SortConfig(mode=mode, concurrency=concurrency, index_budget=index_budget,
                         read_buffer=read_buffer, write_buffer=write_buffer, pools=pools,
                         profile=profile, single_thread=single_thread)
        return wiscsort(device, meta, output_path, cfg)
    cfg = BaselineConfig(algorithm=Algorithm(algorithm), concurrency=concurrency, single_thread=single_thread,
                         memory_budget=index_budget, read_buffer=read_buffer, write_buffer=write_buffer,
                         pools=pools, profile=profile)
    return run_baseline(device, meta, output_path, cfg)


def job_budget(layout: RecordLayout, records: int, algorithm: str, runs: int) -> int:
    """Budget mémoire d'un job: tout l'index pour onepass, environ `runs` runs sinon."""
    if algorithm == 'onepass':
        return max(1, records) * in_memory_footprint(layout)
    per_run = max(1, math.ceil(records / max(1, runs)))
    if algorithm == 'mergepass':
        return per_run * in_memory_footprint(layout)
    return per_run * layout.record_size


class BackgroundLoad:
    """
    Charge de fond: threads lecteurs/écrivains faisant des accès aléatoires de 4 KiB
    sur un fichier séparé du même périphérique, jusqu'à la sortie du contexte.
    """

    def __init__(self, device: Device, readers: int = 0, writers: int = 0,
                 access_size: int = 4 * config.KIB, region: int = 4 * config.MIB, pause: float = 0.0005):
        self.device = device
        self.readers = readers
        self.writers = writers
        self.access_size = access_size
        self.region = max(region, access_size)
        self.pause = pause
        self.operations = 0
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []
        self._handle = None
        self._lock = threading.Lock()

    def _loop(self, worker_id: int, write: bool) -> None:
        rng = np.random.default_rng(worker_id)
        slots = self.region // self.access_size
        payload = bytes(self.access_size)
        while not self._stop.is_set():
            offset = int(rng.integers(0, slots)) * self.access_size
            if write:
                self._handle.write(offset, payload, RANDOM_WRITE, BACKGROUND_PHASE)
            else:
                self._handle.read(offset, self.access_size, RANDOM_READ, BACKGROUND_PHASE)
            with self._lock:
                self.operations += 1
            self._stop.wait(self.pause)

    def __enter__(self):
        self._handle = self.device.create_file('.background', self.region)
        roles = [False] * self.readers + [True] * self.writers
        for worker_id, write in enumerate(roles):
            thread = threading.Thread(target=self._loop, args=(worker_id, write),
                                      name=f"background-{'w' if write else 'r'}{worker_id}", daemon=True)
            thread.start()
            self._threads.append(thread)
        logger.debug(f"Charge de fond: {self.readers} lecteurs, {self.writers} écrivains")
        return self

    def __exit__(self, *exc):
        self._stop.set()
        for thread in self._threads:
            thread.join()
        self.device.remove_file(self._handle)
        logger.debug(f"Charge de fond arrêtée après {self.operations} accès")


def report_rows(ledger: TrafficLedger, clock: PhaseClock, labels: Dict) -> List[Dict]:
    frame = PhaseReport(ledger, clock).to_frame()
    rows = []
    for record in frame.to_dict('records'):
        row = {'schema': BENCH_SCHEMA, **labels}
        row.update(record)
        row['wall_s_host'] = row.pop('wall_s')
        row['interference_lines'] = ledger.interference_lines(record['phase'])
        rows.append(row)
    return rows


def run_job(spec: DeviceSpec, cfg: BenchConfig, algorithm: str, suite: str, variant: str = 'default',
            concurrency: ConcurrencyMode = ConcurrencyMode.NO_OVERLAP, single_thread: bool = False,
            background: Tuple[int, int] = (0, 0)) -> List[Dict]:
    """Un tri complet sur un périphérique neuf; lignes CSV par phase."""
    layout = cfg.layout
    labels = {'suite': suite, 'device': spec.name, 'algorithm': algorithm, 'variant': variant,
              'records': cfg.records, 'key_size': layout.key_size, 'value_size': layout.value_size}
    with open_device(spec) as device:
        meta = gen_dataset(layout, cfg.records, cfg.seed, device.root / 'input.dat', capacity=spec.capacity_bytes)
        device.reset_accounting()
        load = (BackgroundLoad(device, background[0], background[1], cfg.background_access)
                if any(background) else nullcontext())
        with load:
            result = sort_dataset(device, meta, device.root / 'output.dat', algorithm,
                                  concurrency=concurrency,
                                  index_budget=job_budget(layout, cfg.records, algorithm, cfg.runs),
                                  read_buffer=cfg.read_buffer, write_buffer=cfg.write_buffer,
                                  pools=cfg.pools, profile=cfg.profile, single_thread=single_thread)
        ledger, _ = device.snapshot()
    logger.info(f"[{suite}] {algorithm}/{variant} sur {spec.name}: "
                f"{ledger.total_bytes()} octets, {ledger.total_delay_ns():.0f} ns injectés")
    return report_rows(ledger, result.clock, labels)


def run_load_job(spec: DeviceSpec, cfg: BenchConfig, strided: bool, suite: str) -> List[Dict]:
    """Chargement de l'IndexMap seul: lecture stridée des clés ou lecture séquentielle complète."""
    layout = cfg.layout
    algorithm = 'strided-gather' if strided else 'sequential-load'
    labels = {'suite': suite, 'device': spec.name, 'algorithm': algorithm, 'variant': 'default',
              'records': cfg.records, 'key_size': layout.key_size, 'value_size': layout.value_size}
    clock = PhaseClock()
    gate = PhaseGate(ConcurrencyMode.NO_OVERLAP)
    with open_device(spec) as device:
        meta = gen_dataset(layout, cfg.records, cfg.seed, device.root / 'input.dat', capacity=spec.capacity_bytes)
        device.reset_accounting()
        handle = device.open_file(meta.path)
        with WorkerPools(resolve_pools(layout, cfg.pools, cfg.profile), device) as pools:
            with clock.measure(RUN_READ):
                if strided:
                    run_read_strided(device, handle, layout, (0, meta.record_count), pools, gate)
                else:
                    read_record_range(device, handle, layout, 0, meta.record_count, pools, gate)
        device.close_file(handle)
        ledger, _ = device.snapshot()
    return report_rows(ledger, clock, labels)


def _spec(cfg: BenchConfig) -> DeviceSpec:
    return resolve_spec(cfg.device)


def suite_phase_breakdown(cfg: BenchConfig) -> List[Dict]:
    spec = _spec(cfg)
    rows = []
    for algorithm in ('ems', 'onepass', 'mergepass'):
        rows += run_job(spec, cfg, algorithm, 'phase-breakdown')
    return rows


def suite_concurrency_models(cfg: BenchConfig) -> List[Dict]:
    spec = _spec(cfg)
    rows = []
    for algorithm in ('ems', 'mergepass', 'pmsort'):
        for mode in ConcurrencyMode:
            rows += run_job(spec, cfg, algorithm, 'concurrency-models', mode.value, concurrency=mode)
    rows += run_job(spec, cfg, 'pmsort', 'concurrency-models', 'single-thread', single_thread=True)
    return rows


def suite_vk_sweep(cfg: BenchConfig) -> List[Dict]:
    spec = _spec(cfg)
    rows = []
    for value_size in cfg.value_sizes:
        sweep = replace(cfg, value_size=value_size)
        for algorithm in ('ems', 'onepass', 'mergepass'):
            rows += run_job(spec, sweep, algorithm, 'vk-sweep', f"v{value_size}")
    return rows


def suite_strided_vs_seq(cfg: BenchConfig) -> List[Dict]:
    spec = _spec(cfg)
    return run_load_job(spec, cfg, True, 'strided-vs-seq') + run_load_job(spec, cfg, False, 'strided-vs-seq')


def suite_devices(cfg: BenchConfig) -> List[Dict]:
    rows = []
    for name in DEVICE_PRESETS:
        spec = preset(name, inject_delay=config.INJECT_DELAY)
        for algorithm in ('ems', 'samplesort', 'onepass', 'mergepass'):
            rows += run_job(spec, cfg, algorithm, 'devices')
    return rows


def suite_interference(cfg: BenchConfig) -> List[Dict]:
    spec = _spec(cfg)
    loads = {
        'idle': (0, 0),
        'readers': (max(1, cfg.background_readers), 0),
        'writers': (0, max(1, cfg.background_writers)),
    }
    rows = []
    for algorithm in ('ems', 'onepass', 'mergepass'):
        for variant, background in loads.items():
            rows += run_job(spec, cfg, algorithm, 'interference', variant, background=background)
    return rows


SUITE_RUNNERS = {
    'phase-breakdown': suite_phase_breakdown,
    'concurrency-models': suite_concurrency_models,
    'vk-sweep': suite_vk_sweep,
    'strided-vs-seq': suite_strided_vs_seq,
    'devices': suite_devices,
    'interference': suite_interference,
}


def run_suite(suite: str, cfg: Optional[BenchConfig] = None) -> pd.DataFrame:
    """
    Exécute une suite de benchmarks.

    Args:
        suite: Nom de la suite (voir SUITES)
        cfg: Échelle et paramètres

    Returns:
        DataFrame au schéma BENCH_COLUMNS
    """
    if suite not in SUITE_RUNNERS:
        raise BenchError(f"Suite inconnue: {suite} (disponibles: {', '.join(SUITES)})")
    cfg = cfg or BenchConfig()
    started = time.perf_counter()
    rows = SUITE_RUNNERS[suite](cfg)
    logger.info(f"Suite {suite}: {len(rows)} lignes en {time.perf_counter() - started:.1f} s")
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Totaux par job (somme des phases)."""
    keys = ['suite', 'device', 'algorithm', 'variant', 'value_size']
    return frame.groupby(keys, sort=False, as_index=False)[TOTAL_COLUMNS].sum()


def write_suite_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False)
    logger.info(f"CSV écrit: {path} ({len(frame)} lignes)")
