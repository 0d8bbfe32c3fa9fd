#!/usr/bin/env python3
"""
WiscSort: tri externe à séparation clé/valeur
Lecture stridée des clés en IndexMap, tri en mémoire, puis OnePass
ou MergePass (runs d'IndexMap, fusion k-voies et collecte groupée des valeurs)
"""

import enum
import heapq
import logging
import math
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import config
from device import Device, DeviceFile, RANDOM_READ, SEQ_READ, SEQ_WRITE, STRIDED_READ
from profiler import DeviceProfile, PoolPlan, plan_pools
from recfmt import DatasetMeta, RecordKind, RecordLayout, VLEN_FIELD_SIZE, keys_as_strings
from report import (
    MERGE_OTHER, MERGE_READ, MERGE_WRITE, RECORD_READ, RUN_OTHER, RUN_READ, RUN_SORT, RUN_WRITE,
    PhaseClock,
)
from scheduler import (
    ConcurrencyMode, PhaseGate, PoolRole, WorkerPools, WriteBehind,
    enter_read_phase, split_range, write_sequential,
)

logger = logging.getLogger(__name__)

FIXED_OFFSET_WIDTH = 5
KLV_OFFSET_WIDTH = 8
IN_MEMORY_OFFSET_SIZE = 8

RUN_MAGIC = b'WSIM'
RUN_VERSION = 1
RUN_HEADER_SIZE = 32
_RUN_HEADER = struct.Struct('<4sHBBBQ')
_KIND_CODES = {RecordKind.FIXED: 0, RecordKind.KLV: 1}
_VLEN = struct.Struct('<I')

SAMPLE_SORT_THRESHOLD = 1 << 15
OVERSAMPLING = 32


class SortError(Exception):
    """Erreur de base des algorithmes de tri."""


class PlanError(SortError):
    """Plan de tri impossible (budget, buffers, mode forcé)."""


class CorruptRunError(SortError):
    """Fichier de run IndexMap illisible."""


class SortMode(enum.Enum):
    AUTO = 'auto'
    ONEPASS = 'onepass'
    MERGEPASS = 'mergepass'


def entry_dtype(key_size: int, kind: RecordKind) -> np.dtype:
    fields = [('key', f'S{key_size}'), ('offset', '<u8')]
    if kind is RecordKind.KLV:
        fields.append(('vlength', '<u4'))
    return np.dtype(fields)


class IndexEntry(NamedTuple):
    key: bytes
    offset: int
    vlength: int = 0
    run: int = 0


@dataclass
class IndexMap:
    """Entrées (clé, offset de valeur[, vlength]) d'un jeu de données."""

    entries: np.ndarray
    key_size: int
    kind: RecordKind = RecordKind.FIXED
    sorted: bool = False
    source: str = ''

    @classmethod
    def empty(cls, key_size: int, kind: RecordKind = RecordKind.FIXED, source: str = '') -> 'IndexMap':
        return cls(np.zeros(0, dtype=entry_dtype(key_size, kind)), key_size, kind, True, source)

    @classmethod
    def build(cls, keys: np.ndarray, offsets, key_size: int, kind: RecordKind = RecordKind.FIXED,
              vlengths=None, source: str = '') -> 'IndexMap':
        """Construit un IndexMap à partir d'un tableau de clés uint8 (n, K)."""
        entries = np.zeros(len(offsets), dtype=entry_dtype(key_size, kind))
        if len(entries):
            entries['key'] = keys_as_strings(keys)
            entries['offset'] = offsets
            if kind is RecordKind.KLV:
                entries['vlength'] = vlengths
        return cls(entries, key_size, kind, False, source)

    def __len__(self):
        return len(self.entries)

    def key_bytes(self) -> np.ndarray:
        """Clés brutes en uint8 (n, K)."""
        if len(self.entries) == 0:
            return np.zeros((0, self.key_size), dtype=np.uint8)
        return np.ascontiguousarray(self.entries['key']).view(np.uint8).reshape(-1, self.key_size)

    @property
    def offsets(self) -> np.ndarray:
        return self.entries['offset']

    @property
    def vlengths(self) -> Optional[np.ndarray]:
        return self.entries['vlength'] if self.kind is RecordKind.KLV else None

    def entry(self, index: int) -> IndexEntry:
        vlength = int(self.entries['vlength'][index]) if self.kind is RecordKind.KLV else 0
        key = self.key_bytes()[index].tobytes()
        return IndexEntry(key, int(self.entries['offset'][index]), vlength)


def in_memory_footprint(layout: RecordLayout) -> int:
    """Octets par entrée en mémoire: clé + offset pleine largeur (+ vlength en KLV)."""
    footprint = layout.key_size + IN_MEMORY_OFFSET_SIZE
    return footprint if layout.is_fixed else footprint + VLEN_FIELD_SIZE


def default_offset_width(layout: RecordLayout) -> int:
    return FIXED_OFFSET_WIDTH if layout.is_fixed else KLV_OFFSET_WIDTH


def run_entry_size(layout: RecordLayout, offset_width: int) -> int:
    size = layout.key_size + offset_width
    return size if layout.is_fixed else size + VLEN_FIELD_SIZE


@dataclass
class SortPlan:
    mode: SortMode
    run_count: int
    records_per_run: int
    merge_levels: int
    read_buffer: int
    write_buffer: int
    pools: PoolPlan
    entry_footprint: int
    offset_width: int
    merge_runs: int = 0

    def run_ranges(self, record_count: int) -> List[Tuple[int, int]]:
        if self.mode is SortMode.ONEPASS or record_count == 0:
            return [(0, record_count)]
        return [(start, min(start + self.records_per_run, record_count))
                for start in range(0, record_count, self.records_per_run)]


def plan_sort(meta: DatasetMeta, index_budget: int, profile: Optional[DeviceProfile] = None,
              read_buffer: int = config.DEFAULT_READ_BUF, write_buffer: int = config.DEFAULT_WRITE_BUF,
              mode: SortMode = SortMode.AUTO, pools: Optional[PoolPlan] = None,
              offset_width: Optional[int] = None,
              concurrency: ConcurrencyMode = ConcurrencyMode.NO_OVERLAP) -> SortPlan:
    """
    Choisit OnePass ou MergePass et dimensionne les runs.

    Args:
        meta: Jeu de données à trier
        index_budget: Mémoire disponible pour l'IndexMap (octets)
        profile: Profil du périphérique (dimensionnement des pools)
        read_buffer, write_buffer: Capacités des buffers de fusion et de sortie
        mode: auto, onepass ou mergepass (forcé)
        pools: Plan de pools explicite (prioritaire sur le profil)
        offset_width: Largeur des offsets sur disque
        concurrency: Modèle de concurrence (NoSync écrit une run par worker de lecture)

    Returns:
        Plan de tri
    """
    layout = meta.layout
    footprint = in_memory_footprint(layout)
    if index_budget <= 0:
        raise PlanError(f"budget d'index nul ou négatif ({index_budget})")
    if index_budget < footprint:
        raise PlanError(f"budget d'index ({index_budget} o) inférieur à une entrée ({footprint} o)")
    if pools is None:
        pools = plan_pools(profile, layout.record_size if layout.is_fixed else layout.header_size,
                           layout.key_size)
    width = offset_width or default_offset_width(layout)
    if not 1 <= width <= 8:
        raise PlanError(f"largeur d'offset invalide: {width}")
    if layout.is_fixed and write_buffer < layout.record_size:
        raise PlanError(f"buffer d'écriture ({write_buffer} o) plus petit qu'un enregistrement")

    n = meta.record_count
    fits = n * footprint <= index_budget
    if mode is SortMode.ONEPASS and not fits:
        raise PlanError(f"OnePass impossible: {n} entrées x {footprint} o > budget {index_budget} o")

    if n == 0 or (fits and mode is not SortMode.MERGEPASS):
        plan = SortPlan(SortMode.ONEPASS, 1, n, 0, read_buffer, write_buffer, pools, footprint, width)
        logger.info(f"Plan: OnePass ({n} entrées, {n * footprint} o d'index)")
        return plan

    per_run = min(index_budget // footprint, n)
    run_count = math.ceil(n / per_run)
    # alignement sur le pool de lecture, sans ajouter de run
    aligned = per_run - per_run % pools.read_pool
    if aligned > 0 and math.ceil(n / aligned) == run_count:
        per_run = aligned

    plan = SortPlan(SortMode.MERGEPASS, run_count, per_run, 1, read_buffer, write_buffer, pools, footprint, width)
    plan.merge_runs = run_count
    if concurrency is ConcurrencyMode.NOSYNC and layout.is_fixed:
        plan.merge_runs = sum(min(pools.read_pool, stop - start) for start, stop in plan.run_ranges(n))

    buffer_entries = read_buffer // run_entry_size(layout, width)
    if buffer_entries < plan.merge_runs:
        raise PlanError(f"buffer de lecture trop petit: {buffer_entries} entrées pour {plan.merge_runs} runs")

    logger.info(f"Plan: MergePass ({run_count} runs de {per_run} entrées, {plan.merge_runs} à fusionner)")
    return plan


# Phase RUN


def run_read_strided(device: Device, handle: DeviceFile, layout: RecordLayout,
                     record_range: Tuple[int, int], pools: WorkerPools, gate: Optional[PhaseGate],
                     phase: str = RUN_READ) -> IndexMap:
    """
    Lecture stridée des clés d'une plage d'enregistrements (K octets par enregistrement).
    Chaque thread du pool de lecture traite une sous-plage contiguë;
    les offsets sont les indices d'enregistrement.
    """
    if not layout.is_fixed:
        raise SortError("la lecture stridée suppose des enregistrements fixes")
    start, stop = record_range
    size = layout.record_size

    def read_keys(span):
        lo, hi = span
        return device.read_records(handle, 0, size, np.arange(lo, hi), layout.key_size, STRIDED_READ, phase)

    with enter_read_phase(gate):
        chunks = pools.run(PoolRole.READ, read_keys, split_range(start, stop, pools.size(PoolRole.READ)))
    keys = np.concatenate(chunks) if chunks else np.zeros((0, layout.key_size), dtype=np.uint8)
    return IndexMap.build(keys, np.arange(start, stop, dtype=np.uint64), layout.key_size,
                          source=str(handle.path))


def run_read_klv(device: Device, handle: DeviceFile, layout: RecordLayout, gate: Optional[PhaseGate],
                 start: int = 0, max_records: Optional[int] = None,
                 phase: str = RUN_READ) -> Tuple[IndexMap, int]:
    """
    Parcours série d'un fichier KLV: lit clé + vlength, saute la valeur.

    Returns:
        (IndexMap non trié, position du curseur après la dernière entrée lue)
    """
    head = layout.header_size
    keys, offsets, vlengths = [], [], []
    cursor = start
    with enter_read_phase(gate):
        while cursor < handle.size and (max_records is None or len(offsets) < max_records):
            if cursor + head > handle.size:
                raise SortError(f"{handle.path.name}: enregistrement tronqué à l'octet {cursor}")
            raw = device.read(handle, cursor, head, STRIDED_READ, phase)
            (vlength,) = _VLEN.unpack_from(raw, layout.key_size)
            value_offset = cursor + head
            if value_offset + vlength > handle.size:
                raise SortError(f"{handle.path.name}: vlength {vlength} dépasse la fin du fichier (octet {cursor})")
            keys.append(raw[:layout.key_size])
            offsets.append(value_offset)
            vlengths.append(vlength)
            cursor = value_offset + vlength
    key_array = np.frombuffer(b''.join(keys), dtype=np.uint8).reshape(-1, layout.key_size)
    im = IndexMap.build(key_array, np.array(offsets, dtype=np.uint64), layout.key_size, RecordKind.KLV,
                        np.array(vlengths, dtype=np.uint32), source=str(handle.path))
    return im, cursor


def _composite_keys(im: IndexMap) -> np.ndarray:
    # clé puis offset big-endian: l'ordre des octets donne (clé, offset)
    n = len(im)
    width = im.key_size + IN_MEMORY_OFFSET_SIZE
    raw = np.empty((n, width), dtype=np.uint8)
    raw[:, :im.key_size] = im.key_bytes()
    raw[:, im.key_size:] = im.offsets.astype('>u8').view(np.uint8).reshape(n, IN_MEMORY_OFFSET_SIZE)
    return raw.view(f'S{width}').ravel()


def sort_indexmap(im: IndexMap, pools: Optional[WorkerPools] = None) -> IndexMap:
    """
    Tri de l'IndexMap par (clé, offset).
    Tri par échantillonnage concurrent au-delà d'un seuil, argsort unique sinon.
    """
    n = len(im)
    if n == 0:
        return IndexMap(im.entries.copy(), im.key_size, im.kind, True, im.source)
    composite = _composite_keys(im)
    workers = pools.size(PoolRole.SORT) if pools is not None else 1

    if workers == 1 or n < SAMPLE_SORT_THRESHOLD:
        order = np.argsort(composite, kind='stable')
    else:
        rng = np.random.default_rng(n)
        sample = np.sort(composite[rng.choice(n, size=min(n, workers * OVERSAMPLING), replace=False)])
        splitters = sample[(np.arange(1, workers) * len(sample)) // workers]
        buckets = np.searchsorted(splitters, composite, side='right')
        members = [np.flatnonzero(buckets == b) for b in range(workers)]

        def sort_bucket(indices):
            return indices[np.argsort(composite[indices], kind='stable')]

        order = np.concatenate(pools.run(PoolRole.SORT, sort_bucket, members))
    return IndexMap(im.entries[order], im.key_size, im.kind, True, im.source)


# Fichiers de run


@dataclass
class RunFile:
    path: Path
    kind: RecordKind
    key_size: int
    offset_width: int
    count: int

    @property
    def entry_size(self) -> int:
        size = self.key_size + self.offset_width
        return size if self.kind is RecordKind.FIXED else size + VLEN_FIELD_SIZE

    @property
    def size(self) -> int:
        return RUN_HEADER_SIZE + self.count * self.entry_size


def encode_run_header(kind: RecordKind, key_size: int, offset_width: int, count: int) -> bytes:
    header = _RUN_HEADER.pack(RUN_MAGIC, RUN_VERSION, _KIND_CODES[kind], key_size, offset_width, count)
    return header.ljust(RUN_HEADER_SIZE, b'\0')


def decode_run_header(data: bytes, path: Path) -> RunFile:
    if len(data) < RUN_HEADER_SIZE:
        raise CorruptRunError(f"{path}: en-tête tronqué")
    magic, version, kind_code, key_size, width, count = _RUN_HEADER.unpack_from(data)
    if magic != RUN_MAGIC:
        raise CorruptRunError(f"{path}: magic invalide {magic!r}")
    if version != RUN_VERSION:
        raise CorruptRunError(f"{path}: version {version} non supportée")
    kinds = {code: kind for kind, code in _KIND_CODES.items()}
    if kind_code not in kinds or key_size < 1 or not 1 <= width <= 8:
        raise CorruptRunError(f"{path}: en-tête incohérent (kind={kind_code}, K={key_size}, largeur={width})")
    return RunFile(Path(path), kinds[kind_code], key_size, width, count)


def encode_entries(im: IndexMap, offset_width: int) -> bytes:
    n = len(im)
    if n == 0:
        return b''
    offsets = im.offsets.astype('<u8')
    if offset_width < 8 and int(offsets.max()) >= 1 << (8 * offset_width):
        raise SortError(f"offset {int(offsets.max())} trop grand pour {offset_width} octets")
    size = im.key_size + offset_width + (VLEN_FIELD_SIZE if im.kind is RecordKind.KLV else 0)
    raw = np.empty((n, size), dtype=np.uint8)
    raw[:, :im.key_size] = im.key_bytes()
    raw[:, im.key_size:im.key_size + offset_width] = offsets.view(np.uint8).reshape(n, 8)[:, :offset_width]
    if im.kind is RecordKind.KLV:
        raw[:, im.key_size + offset_width:] = im.vlengths.astype('<u4').view(np.uint8).reshape(n, 4)
    return raw.tobytes()


def decode_entries(data: bytes, run: RunFile) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Décode des entrées packées: (clés uint8 (n, K), offsets uint64, vlengths ou None)."""
    size = run.entry_size
    if len(data) % size:
        raise CorruptRunError(f"{run.path}: {len(data)} octets, pas un multiple de {size}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, size)
    n = len(raw)
    keys = raw[:, :run.key_size]
    wide = np.zeros((n, 8), dtype=np.uint8)
    wide[:, :run.offset_width] = raw[:, run.key_size:run.key_size + run.offset_width]
    offsets = wide.view('<u8').ravel().astype(np.uint64)
    vlengths = None
    if run.kind is RecordKind.KLV:
        vlengths = np.ascontiguousarray(raw[:, run.key_size + run.offset_width:]).view('<u4').ravel()
    return keys, offsets, vlengths


def write_indexmap_run(device: Device, im: IndexMap, run_path, pools: Optional[WorkerPools],
                       gate: Optional[PhaseGate], offset_width: Optional[int] = None,
                       phase: str = RUN_WRITE) -> RunFile:
    """
    Écrit un IndexMap trié dans un fichier de run (en-tête + entrées packées),
    séquentiellement avec le pool d'écriture; sans pool, écriture dans le thread courant.
    """
    if not im.sorted:
        raise SortError("seul un IndexMap trié peut être écrit en run")
    width = offset_width or (FIXED_OFFSET_WIDTH if im.kind is RecordKind.FIXED else KLV_OFFSET_WIDTH)
    payload = encode_run_header(im.kind, im.key_size, width, len(im)) + encode_entries(im, width)
    handle = device.create_file(run_path, len(payload))
    try:
        if pools is None:
            device.write(handle, 0, payload, SEQ_WRITE, phase)
        else:
            write_sequential(gate, handle, 0, payload, pools, phase)
    finally:
        device.close_file(handle)
    return RunFile(handle.path, im.kind, im.key_size, width, len(im))


def read_indexmap_run(device: Device, run_path, gate: Optional[PhaseGate] = None,
                      phase: str = MERGE_READ) -> IndexMap:
    """Relit un fichier de run complet."""
    handle = device.open_file(run_path, readonly=True)
    try:
        with enter_read_phase(gate):
            data = device.read(handle, 0, handle.size, SEQ_READ, phase)
    finally:
        device.close_file(handle)
    run = decode_run_header(data, handle.path)
    if len(data) != run.size:
        raise CorruptRunError(f"{run.path}: {len(data)} octets pour {run.count} entrées annoncées")
    keys, offsets, vlengths = decode_entries(data[RUN_HEADER_SIZE:], run)
    im = IndexMap.build(keys, offsets, run.key_size, run.kind, vlengths, source=str(run.path))
    im.sorted = True
    return im


# Fusion


@dataclass
class RunCursor:
    run: RunFile
    handle: DeviceFile
    next_entry: int = 0
    keys: List[bytes] = field(default_factory=list)
    offsets: List[int] = field(default_factory=list)
    vlengths: List[int] = field(default_factory=list)
    pos: int = 0
    end: int = 0
    exhausted: bool = False


@dataclass
class MergeState:
    device: Device
    cursors: List[RunCursor]
    buffer_entries: int
    allotment: int
    live: int
    kind: RecordKind
    key_size: int
    heap: List[Tuple[bytes, int, int]] = field(default_factory=list)
    refills: int = 0
    retirements: int = 0
    selected: int = 0
    exhausted_run: Optional[int] = None
    phase: str = MERGE_READ


def _load_chunk(state: MergeState, run_id: int) -> None:
    cursor = state.cursors[run_id]
    run = cursor.run
    count = min(state.allotment, run.count - cursor.next_entry)
    offset = RUN_HEADER_SIZE + cursor.next_entry * run.entry_size
    data = state.device.read(cursor.handle, offset, count * run.entry_size, SEQ_READ, state.phase)
    keys, offsets, vlengths = decode_entries(data, run)
    raw_keys = np.ascontiguousarray(keys).tobytes()
    size = run.key_size
    cursor.keys = [raw_keys[i * size:(i + 1) * size] for i in range(count)]
    cursor.offsets = offsets.tolist()
    cursor.vlengths = vlengths.tolist() if vlengths is not None else []
    cursor.pos = 0
    cursor.end = count
    cursor.next_entry += count


def _push_head(state: MergeState, run_id: int) -> None:
    cursor = state.cursors[run_id]
    heapq.heappush(state.heap, (cursor.keys[cursor.pos], cursor.offsets[cursor.pos], run_id))


def _retire(state: MergeState, run_id: int) -> None:
    cursor = state.cursors[run_id]
    cursor.exhausted = True
    state.live -= 1
    state.retirements += 1
    if state.live:
        state.allotment = state.buffer_entries // state.live
    state.device.close_file(cursor.handle)


def merge_init(device: Device, run_files: Sequence[Union[RunFile, Path, str]], read_buffer: int,
               gate: Optional[PhaseGate], phase: str = MERGE_READ) -> MergeState:
    """
    Prépare la fusion: le buffer de lecture est partagé également entre les runs,
    chaque région est remplie par une lecture séquentielle du début de sa run.
    """
    if not run_files:
        raise SortError("aucune run à fusionner")
    cursors = []
    with enter_read_phase(gate):
        for item in run_files:
            path = item.path if isinstance(item, RunFile) else Path(item)
            handle = device.open_file(path, readonly=True)
            if handle.size < RUN_HEADER_SIZE:
                device.close_file(handle)
                raise CorruptRunError(f"{path}: fichier plus petit que l'en-tête")
            run = decode_run_header(device.read(handle, 0, RUN_HEADER_SIZE, SEQ_READ, phase), handle.path)
            if handle.size != run.size:
                device.close_file(handle)
                raise CorruptRunError(f"{path}: taille {handle.size}, {run.size} attendus")
            cursors.append(RunCursor(run, handle))

    first = cursors[0].run
    for cursor in cursors[1:]:
        if (cursor.run.kind, cursor.run.key_size, cursor.run.offset_width) != \
                (first.kind, first.key_size, first.offset_width):
            raise CorruptRunError(f"{cursor.run.path}: géométrie différente de {first.path}")

    buffer_entries = read_buffer // first.entry_size
    allotment = buffer_entries // len(cursors)
    if allotment < 1:
        raise PlanError(f"buffer de lecture ({read_buffer} o) trop petit pour {len(cursors)} runs")

    state = MergeState(device, cursors, buffer_entries, allotment, len(cursors),
                       first.kind, first.key_size, phase=phase)
    with enter_read_phase(gate):
        for run_id, cursor in enumerate(cursors):
            if cursor.run.count == 0:
                _retire(state, run_id)
                continue
            _load_chunk(state, run_id)
            _push_head(state, run_id)
    return state


def merge_select_min(state: MergeState) -> IndexEntry:
    """
    Extrait la plus petite tête (clé, offset, run) du tas et avance le curseur de sa run.
    Une run dont la région est consommée est signalée par state.exhausted_run.
    """
    if not state.heap:
        raise SortError("toutes les runs sont épuisées")
    key, offset, run_id = heapq.heappop(state.heap)
    cursor = state.cursors[run_id]
    vlength = cursor.vlengths[cursor.pos] if state.kind is RecordKind.KLV else 0
    cursor.pos += 1
    state.selected += 1
    if cursor.pos < cursor.end:
        _push_head(state, run_id)
    else:
        state.exhausted_run = run_id
    return IndexEntry(key, offset, vlength, run_id)


def refill_or_retire(state: MergeState, run_id: int, gate: Optional[PhaseGate]) -> bool:
    """
    Recharge la région d'une run consommée, ou la retire si son fichier est épuisé
    (l'allocation par run est alors recalculée pour les runs restantes).

    Returns:
        True si la run a été rechargée
    """
    cursor = state.cursors[run_id]
    if cursor.pos < cursor.end or cursor.exhausted:
        raise SortError(f"run {run_id}: région non consommée ou run déjà retirée")
    if state.exhausted_run == run_id:
        state.exhausted_run = None
    if cursor.next_entry < cursor.run.count:
        with enter_read_phase(gate):
            _load_chunk(state, run_id)
        state.refills += 1
        _push_head(state, run_id)
        return True
    _retire(state, run_id)
    return False


class OffsetQueue:
    """
    Localisateurs de valeurs en attente de collecte, dans l'ordre de sortie.
    Fixe: capacité = buffer d'écriture / taille d'enregistrement.
    KLV: admission tant que la taille de sortie cumulée tient dans le buffer.
    """

    def __init__(self, layout: RecordLayout, write_capacity: int):
        self.layout = layout
        self.write_capacity = write_capacity
        self.capacity_entries = write_capacity // layout.record_size if layout.is_fixed else None
        self.keys: List[bytes] = []
        self.offsets: List[int] = []
        self.vlengths: List[int] = []
        self.output_bytes = 0

    def __len__(self):
        return len(self.offsets)

    def output_size(self, entry: IndexEntry) -> int:
        if self.layout.is_fixed:
            return self.layout.record_size
        return self.layout.klv_record_size(entry.vlength)

    def admits(self, entry: IndexEntry) -> bool:
        if self.layout.is_fixed:
            return len(self) < self.capacity_entries
        return self.output_bytes + self.output_size(entry) <= self.write_capacity

    @property
    def full(self) -> bool:
        return self.layout.is_fixed and len(self) >= self.capacity_entries

    def push(self, entry: IndexEntry) -> None:
        if not self.admits(entry):
            raise SortError(f"enregistrement de {self.output_size(entry)} o plus grand que le buffer d'écriture")
        self.keys.append(entry.key)
        self.offsets.append(entry.offset)
        self.vlengths.append(entry.vlength)
        self.output_bytes += self.output_size(entry)

    def extend(self, im: IndexMap, start: int, stop: int) -> None:
        """Ajoute une tranche d'un IndexMap trié sans contrôle entrée par entrée."""
        size = im.key_size
        raw = im.key_bytes()[start:stop].tobytes()
        self.keys.extend(raw[i * size:(i + 1) * size] for i in range(stop - start))
        self.offsets.extend(im.offsets[start:stop].tolist())
        if im.kind is RecordKind.KLV:
            vlengths = im.vlengths[start:stop].tolist()
            self.vlengths.extend(vlengths)
            self.output_bytes += (stop - start) * self.layout.header_size + sum(vlengths)
        else:
            self.vlengths.extend([0] * (stop - start))
            self.output_bytes += (stop - start) * self.layout.record_size

    def clear(self) -> None:
        self.keys.clear()
        self.offsets.clear()
        self.vlengths.clear()
        self.output_bytes = 0


def gather_records(device: Device, in_handle: DeviceFile, queue: OffsetQueue, sink: WriteBehind,
                   pools: WorkerPools, gate: Optional[PhaseGate], phase: str = RECORD_READ) -> int:
    """
    Collecte groupée des valeurs de la file par lectures aléatoires concurrentes.
    Chaque thread reconstruit ses enregistrements (clé + valeur) à leur position finale
    dans le buffer d'écriture, ou les écrit directement en mode NoSync.

    Returns:
        Octets produits
    """
    n = len(queue)
    if n == 0:
        return 0
    layout = queue.layout
    key_size = layout.key_size
    keys = np.frombuffer(b''.join(queue.keys), dtype=np.uint8).reshape(n, key_size)
    offsets = np.array(queue.offsets, dtype=np.int64)

    if layout.is_fixed:
        size = layout.record_size
        total = n * size

        def build(span):
            lo, hi = span
            chunk = np.empty((hi - lo, size), dtype=np.uint8)
            chunk[:, :key_size] = keys[lo:hi]
            if layout.value_size:
                chunk[:, key_size:] = device.read_records(in_handle, 0, size, offsets[lo:hi], layout.value_size,
                                                          RANDOM_READ, phase, column=key_size)
            return lo * size, chunk.tobytes()
    else:
        vlengths = np.array(queue.vlengths, dtype=np.int64)
        sizes = layout.header_size + vlengths
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        total = int(sizes.sum())

        def build(span):
            lo, hi = span
            values = device.read_spans(in_handle, offsets[lo:hi], vlengths[lo:hi], RANDOM_READ, phase)
            parts = []
            for i, value in enumerate(values, lo):
                parts.append(keys[i].tobytes())
                parts.append(_VLEN.pack(len(value)))
                parts.append(value)
            return int(starts[lo]), b''.join(parts)

    spans = split_range(0, n, pools.size(PoolRole.RANDOM_READ))
    if sink.direct:
        base = sink.reserve(total)

        def gather_direct(span):
            position, data = build(span)
            sink.write_direct(base + position, data)

        pools.run(PoolRole.RANDOM_READ, gather_direct, spans)
        return total

    buffer = sink.buffer
    if total > buffer.remaining:
        raise SortError(f"collecte de {total} o pour {buffer.remaining} o libres dans le buffer")
    origin = buffer.fill

    def gather_buffered(span):
        position, data = build(span)
        buffer.put(origin + position, data)

    with enter_read_phase(gate):
        pools.run(PoolRole.RANDOM_READ, gather_buffered, spans)
    buffer.fill = origin + total
    return total


def _batches(im: IndexMap, layout: RecordLayout, capacity: int) -> List[Tuple[int, int]]:
    n = len(im)
    if n == 0:
        return []
    if layout.is_fixed:
        per_batch = capacity // layout.record_size
        return [(lo, min(lo + per_batch, n)) for lo in range(0, n, per_batch)]
    cumulative = np.cumsum(layout.header_size + im.vlengths.astype(np.int64))
    batches = []
    start = 0
    while start < n:
        consumed = int(cumulative[start - 1]) if start else 0
        stop = int(np.searchsorted(cumulative, consumed + capacity, side='right'))
        if stop == start:
            raise SortError(f"enregistrement {start} plus grand que le buffer d'écriture ({capacity} o)")
        batches.append((start, stop))
        start = stop
    return batches


def onepass_materialize(device: Device, in_handle: DeviceFile, im: IndexMap, out_handle: DeviceFile,
                        layout: RecordLayout, write_buffer: int, pools: WorkerPools, gate: PhaseGate,
                        clock: Optional[PhaseClock] = None) -> int:
    """
    OnePass: l'IndexMap trié est découpé en lots de la taille du buffer d'écriture;
    chaque lot est collecté par lectures aléatoires puis écrit séquentiellement.

    Returns:
        Nombre de vidages du buffer
    """
    if not im.sorted:
        raise SortError("OnePass attend un IndexMap trié")
    clock = clock or PhaseClock()
    with WriteBehind(gate, pools, out_handle, write_buffer, RUN_WRITE) as sink:
        for lo, hi in _batches(im, layout, write_buffer):
            queue = OffsetQueue(layout, write_buffer)
            queue.extend(im, lo, hi)
            with clock.measure(RECORD_READ):
                gather_records(device, in_handle, queue, sink, pools, gate)
            with clock.measure(RUN_WRITE):
                sink.flush()
        with clock.measure(RUN_WRITE):
            sink.close()
    return sink.flushes


@dataclass
class MergeStats:
    selected: int = 0
    refills: int = 0
    retirements: int = 0
    gathers: int = 0
    flushes: int = 0


def mergepass(device: Device, run_files: Sequence[Union[RunFile, Path]], in_handle: DeviceFile,
              out_handle: DeviceFile, layout: RecordLayout, read_buffer: int, write_buffer: int,
              pools: WorkerPools, gate: PhaseGate, clock: Optional[PhaseClock] = None) -> MergeStats:
    """
    MergePass: fusion k-voies des runs d'IndexMap.
    Les minima successifs alimentent la file d'offsets; file pleine => collecte groupée
    puis vidage du buffer d'écriture; les régions consommées sont rechargées ou retirées.
    """
    clock = clock or PhaseClock()
    with clock.measure(MERGE_READ):
        state = merge_init(device, run_files, read_buffer, gate)
    queue = OffsetQueue(layout, write_buffer)
    stats = MergeStats()
    selecting = 0.0

    with WriteBehind(gate, pools, out_handle, write_buffer, MERGE_WRITE) as sink:
        def drain():
            with clock.measure(RECORD_READ):
                gather_records(device, in_handle, queue, sink, pools, gate)
            with clock.measure(MERGE_WRITE):
                sink.flush()
            queue.clear()
            stats.gathers += 1

        while state.live:
            started = time.perf_counter()
            entry = merge_select_min(state)
            admitted = queue.admits(entry)
            selecting += time.perf_counter() - started
            if not admitted:
                drain()
            queue.push(entry)
            if queue.full:
                drain()
            if state.exhausted_run is not None:
                with clock.measure(MERGE_READ):
                    refill_or_retire(state, state.exhausted_run, gate)
        if len(queue):
            drain()
        with clock.measure(MERGE_WRITE):
            sink.close()

    clock.add(MERGE_OTHER, selecting)
    stats.selected = state.selected
    stats.refills = state.refills
    stats.retirements = state.retirements
    stats.flushes = sink.flushes
    logger.info(f"Fusion terminée: {stats.selected} entrées, {stats.refills} recharges, "
                f"{stats.retirements} runs retirées")
    return stats


# Orchestration


@dataclass
class SortConfig:
    mode: SortMode = SortMode.AUTO
    concurrency: ConcurrencyMode = ConcurrencyMode.NO_OVERLAP
    index_budget: int = config.DEFAULT_INDEX_BUDGET
    read_buffer: int = config.DEFAULT_READ_BUF
    write_buffer: int = config.DEFAULT_WRITE_BUF
    pools: Optional[PoolPlan] = None
    profile: Optional[DeviceProfile] = None
    offset_width: Optional[int] = None
    single_thread: bool = False
    keep_runs: bool = False


@dataclass
class SortResult:
    algorithm: str
    output: Path
    clock: PhaseClock
    plan: Optional[SortPlan] = None
    merge: Optional[MergeStats] = None
    run_files: List[RunFile] = field(default_factory=list)


def resolve_pools(layout: RecordLayout, pools: Optional[PoolPlan] = None,
                  profile: Optional[DeviceProfile] = None, single_thread: bool = False) -> PoolPlan:
    """Plan de pools effectif (mono-thread, explicite ou issu du profil), plafonné par BRAIDSORT_THREADS."""
    if single_thread:
        return PoolPlan.single_thread()
    if pools is not None:
        return pools.capped(config.thread_cap())
    access = layout.record_size if layout.is_fixed else layout.header_size
    return plan_pools(profile, access, layout.key_size)


def _write_run_timed(device, im, path, pools, gate, width, clock) -> RunFile:
    with clock.measure(RUN_WRITE):
        return write_indexmap_run(device, im, path, pools, gate, width)


def _fixed_runs_nosync(device: Device, in_handle: DeviceFile, layout: RecordLayout, plan: SortPlan,
                       record_count: int, pools: WorkerPools, run_dir: Path, clock: PhaseClock) -> List[RunFile]:
    # boucles lecture -> tri -> écriture par worker, sans barrière
    size = layout.record_size

    def worker(task):
        run_id, worker_id, (lo, hi) = task
        with clock.measure(RUN_READ):
            keys = device.read_records(in_handle, 0, size, np.arange(lo, hi), layout.key_size, STRIDED_READ, RUN_READ)
        im = IndexMap.build(keys, np.arange(lo, hi, dtype=np.uint64), layout.key_size)
        with clock.measure(RUN_SORT):
            im = sort_indexmap(im)
        return _write_run_timed(device, im, run_dir / f"run-{run_id:05d}-{worker_id:03d}.im",
                                None, None, plan.offset_width, clock)

    tasks = []
    for run_id, (start, stop) in enumerate(plan.run_ranges(record_count)):
        for worker_id, span in enumerate(split_range(start, stop, pools.size(PoolRole.READ))):
            tasks.append((run_id, worker_id, span))
    return pools.run(PoolRole.READ, worker, tasks)


def generate_runs(device: Device, in_handle: DeviceFile, meta: DatasetMeta, plan: SortPlan,
                  pools: WorkerPools, gate: PhaseGate, run_dir: Path, clock: PhaseClock) -> List[RunFile]:
    """Phase RUN de MergePass: une run d'IndexMap triée par tranche du plan."""
    layout = meta.layout
    if gate.mode is ConcurrencyMode.NOSYNC and layout.is_fixed:
        return _fixed_runs_nosync(device, in_handle, layout, plan, meta.record_count, pools, run_dir, clock)

    background = (ThreadPoolExecutor(max_workers=1, thread_name_prefix='runwriter')
                  if gate.mode is ConcurrencyMode.OVERLAP else None)
    pending = []
    cursor = 0
    try:
        for run_id, record_range in enumerate(plan.run_ranges(meta.record_count)):
            with clock.measure(RUN_READ):
                if layout.is_fixed:
                    im = run_read_strided(device, in_handle, layout, record_range, pools, gate)
                else:
                    im, cursor = run_read_klv(device, in_handle, layout, gate, cursor, plan.records_per_run)
            with clock.measure(RUN_SORT):
                im = sort_indexmap(im, pools)
            path = run_dir / f"run-{run_id:05d}.im"
            if background is not None:
                pending.append(background.submit(_write_run_timed, device, im, path, pools, gate,
                                                 plan.offset_width, clock))
            else:
                pending.append(_write_run_timed(device, im, path, pools, gate, plan.offset_width, clock))
    finally:
        if background is not None:
            background.shutdown(wait=True)
    return [item.result() if background is not None else item for item in pending]


def wiscsort(device: Device, meta: DatasetMeta, output_path, cfg: Optional[SortConfig] = None) -> SortResult:
    """
    Tri WiscSort complet d'un jeu de données vers output_path.

    Args:
        device: Périphérique portant l'entrée, les runs et la sortie
        meta: Métadonnées du jeu de données
        output_path: Fichier de sortie (même format que l'entrée)
        cfg: Configuration du tri

    Returns:
        Résultat (plan, horloge de phases, statistiques de fusion)
    """
    cfg = cfg or SortConfig()
    layout = meta.layout
    clock = PhaseClock()
    with clock.measure(RUN_OTHER):
        pool_plan = resolve_pools(layout, cfg.pools, cfg.profile, cfg.single_thread)
        plan = plan_sort(meta, cfg.index_budget, cfg.profile, cfg.read_buffer, cfg.write_buffer,
                         cfg.mode, pool_plan, cfg.offset_width, cfg.concurrency)
        gate = PhaseGate(cfg.concurrency)
        in_handle = device.open_file(meta.path, readonly=True)
        out_handle = device.create_file(output_path, meta.total_bytes)
    result = SortResult('wiscsort', out_handle.path, clock, plan)
    logger.info(f"WiscSort {plan.mode.value} ({cfg.concurrency.value}) sur {Path(meta.path).name}: "
                f"{meta.record_count} enregistrements")

    try:
        with WorkerPools(pool_plan, device) as pools:
            if plan.mode is SortMode.ONEPASS:
                with clock.measure(RUN_READ):
                    if layout.is_fixed:
                        im = run_read_strided(device, in_handle, layout, (0, meta.record_count), pools, gate)
                    else:
                        im, _ = run_read_klv(device, in_handle, layout, gate)
                with clock.measure(RUN_SORT):
                    im = sort_indexmap(im, pools)
                onepass_materialize(device, in_handle, im, out_handle, layout, plan.write_buffer,
                                    pools, gate, clock)
            else:
                run_dir = Path(tempfile.mkdtemp(prefix='.runs-', dir=device.root))
                try:
                    result.run_files = generate_runs(device, in_handle, meta, plan, pools, gate, run_dir, clock)
                    result.merge = mergepass(device, result.run_files, in_handle, out_handle, layout,
                                             plan.read_buffer, plan.write_buffer, pools, gate, clock)
                except Exception:
                    # runs partielles : rien à conserver
                    _discard_run_dir(device, run_dir)
                    raise
                if not cfg.keep_runs:
                    _remove_runs(device, result.run_files, run_dir)
    finally:
        device.close_file(in_handle)
        device.close_file(out_handle)
    return result


def _remove_runs(device: Device, runs: List[RunFile], run_dir: Path) -> None:
    for run in runs:
        device.remove_file(run.path)
    try:
        run_dir.rmdir()
    except OSError as e:
        logger.debug(f"Répertoire de runs conservé ({run_dir}): {e}")


def _discard_run_dir(device: Device, run_dir: Path) -> None:
    for path in run_dir.glob('*'):
        device.remove_file(path)
    _remove_runs(device, [], run_dir)
