#!/usr/bin/env python3
"""
Ordonnancement sensible aux interférences
Barrière de phases lecture/écriture, buffers de transit et pools de workers
"""

import collections
import enum
import itertools
import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor, wait
from contextlib import nullcontext
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from device import Device, DeviceFile, Direction, SEQ_WRITE
from profiler import PoolPlan

logger = logging.getLogger(__name__)


class ConcurrencyMode(enum.Enum):
    NOSYNC = 'nosync'
    OVERLAP = 'overlap'
    NO_OVERLAP = 'no-overlap'


class GateState(enum.Enum):
    IDLE = 'idle'
    READING = 'reading'
    WRITING = 'writing'


_STATE_FOR = {Direction.READ: GateState.READING, Direction.WRITE: GateState.WRITING}


class PhaseToken:
    """Droit d'accès pour une classe d'opérations (lecture ou écriture)."""

    def __init__(self, gate: 'PhaseGate', direction: Direction):
        self.gate = gate
        self.direction = direction
        self.released = False

    def release(self) -> None:
        if not self.released:
            self.released = True
            self.gate._release(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


class PhaseGate:
    """
    Barrière lecture/écriture d'un périphérique.

    En mode NoOverlap, lectures et écritures sont mutuellement exclusives;
    l'admission suit l'ordre d'arrivée (FIFO) entre phases opposées.
    Les modes Overlap et NoSync admettent immédiatement.
    """

    def __init__(self, mode: ConcurrencyMode = ConcurrencyMode.NO_OVERLAP):
        self.mode = mode
        self.state = GateState.IDLE
        self.active = 0
        self.transitions = 0
        self._active_by_direction = {Direction.READ: 0, Direction.WRITE: 0}
        self._cond = threading.Condition()
        self._queue = collections.deque()
        self._tickets = itertools.count()

    @property
    def exclusive(self) -> bool:
        return self.mode is ConcurrencyMode.NO_OVERLAP

    def _admissible(self, ticket: int, direction: Direction) -> bool:
        if not self._queue or self._queue[0] != ticket:
            return False
        return self.state is GateState.IDLE or self.state is _STATE_FOR[direction]

    def enter(self, direction: Direction) -> PhaseToken:
        with self._cond:
            if self.exclusive:
                ticket = next(self._tickets)
                self._queue.append(ticket)
                self._cond.wait_for(lambda: self._admissible(ticket, direction))
                self._queue.popleft()
                if self.state is GateState.IDLE:
                    self.transitions += 1
            self.state = _STATE_FOR[direction]
            self.active += 1
            self._active_by_direction[direction] += 1
            self._cond.notify_all()
        return PhaseToken(self, direction)

    def _release(self, token: PhaseToken) -> None:
        with self._cond:
            self.active -= 1
            self._active_by_direction[token.direction] -= 1
            if self.active == 0:
                self.state = GateState.IDLE
            elif not self.exclusive and self._active_by_direction[token.direction] == 0:
                other = Direction.WRITE if token.direction is Direction.READ else Direction.READ
                self.state = _STATE_FOR[other]
            self._cond.notify_all()

    def enter_read_phase(self) -> PhaseToken:
        return self.enter(Direction.READ)

    def enter_write_phase(self) -> PhaseToken:
        return self.enter(Direction.WRITE)


def enter_read_phase(gate: Optional[PhaseGate]):
    """Jeton de lecture (contexte vide sans barrière)."""
    return gate.enter_read_phase() if gate is not None else nullcontext()


def enter_write_phase(gate: Optional[PhaseGate]):
    return gate.enter_write_phase() if gate is not None else nullcontext()


class BufferRole(enum.Enum):
    READ_BUFFER = 'read'
    WRITE_BUFFER = 'write'


class StagingBuffer:
    """Buffer de transit en DRAM (0 <= fill <= capacity)."""

    def __init__(self, capacity: int, role: BufferRole = BufferRole.WRITE_BUFFER):
        if capacity < 0:
            raise ValueError(f"capacité négative: {capacity}")
        self.capacity = capacity
        self.role = role
        self.data = bytearray(capacity)
        self.fill = 0

    @property
    def remaining(self) -> int:
        return self.capacity - self.fill

    def append(self, payload) -> int:
        """Ajoute en fin de buffer, retourne la position d'écriture."""
        position = self.fill
        self.put(position, payload)
        return position

    def put(self, position: int, payload) -> None:
        end = position + len(payload)
        if position < 0 or end > self.capacity:
            raise BufferError(f"écriture [{position}, {end}) hors d'un buffer de {self.capacity} octets")
        self.data[position:end] = payload
        self.fill = max(self.fill, end)

    def view(self) -> memoryview:
        return memoryview(self.data)[:self.fill]

    def reset(self) -> None:
        self.fill = 0


class PoolRole(enum.Enum):
    READ = 'read'
    RANDOM_READ = 'random_read'
    WRITE = 'write'
    SORT = 'sort'


_ROLE_DIRECTION = {
    PoolRole.READ: Direction.READ,
    PoolRole.RANDOM_READ: Direction.READ,
    PoolRole.WRITE: Direction.WRITE,
    PoolRole.SORT: None,
}


def split_range(start: int, stop: int, parts: int) -> List[Tuple[int, int]]:
    """Découpe [start, stop) en au plus `parts` sous-intervalles contigus non vides."""
    total = max(0, stop - start)
    parts = max(1, min(parts, total))
    if total == 0:
        return []
    size, extra = divmod(total, parts)
    ranges = []
    cursor = start
    for i in range(parts):
        end = cursor + size + (1 if i < extra else 0)
        ranges.append((cursor, end))
        cursor = end
    return ranges


class WorkerPools:
    """Pools de threads nommés (read, random_read, write, sort) dimensionnés par un PoolPlan."""

    def __init__(self, plan: PoolPlan, device: Optional[Device] = None):
        self.plan = plan
        self.device = device
        self._executors: Dict[PoolRole, ThreadPoolExecutor] = {}
        self._lock = threading.Lock()

    def size(self, role: PoolRole) -> int:
        return {
            PoolRole.READ: self.plan.read_pool,
            PoolRole.RANDOM_READ: self.plan.random_read_pool,
            PoolRole.WRITE: self.plan.write_pool,
            PoolRole.SORT: self.plan.sort_pool,
        }[role]

    def _executor(self, role: PoolRole) -> ThreadPoolExecutor:
        with self._lock:
            if role not in self._executors:
                self._executors[role] = ThreadPoolExecutor(max_workers=self.size(role),
                                                           thread_name_prefix=role.value)
            return self._executors[role]

    def run(self, role: PoolRole, fn: Callable, tasks: Sequence) -> List:
        """
        Exécute fn sur chaque tâche; résultats dans l'ordre des tâches.
        La première exception (dans l'ordre des tâches) est propagée une fois toutes les tâches terminées.
        """
        tasks = list(tasks)
        if not tasks:
            return []
        workers = min(self.size(role), len(tasks))
        direction = _ROLE_DIRECTION[role]
        declared = (self.device.declare_workers(direction, workers)
                    if self.device is not None and direction is not None else nullcontext())
        with declared:
            futures = [self._executor(role).submit(fn, task) for task in tasks]
            wait(futures)
        return [future.result() for future in futures]

    def close(self) -> None:
        for executor in self._executors.values():
            executor.shutdown(wait=True)
        self._executors.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _write_chunks(offset: int, length: int, parts: int, line_size: int) -> List[Tuple[int, int]]:
    # bornes alignées sur les lignes du fichier de sortie
    if parts <= 1 or length <= line_size:
        return [(0, length)]
    chunks = []
    cursor = 0
    for i, (_, end) in enumerate(split_range(0, length, parts)):
        aligned = length if i == parts - 1 else min(length, ((offset + end) // line_size) * line_size - offset)
        if aligned > cursor:
            chunks.append((cursor, aligned))
            cursor = aligned
    if cursor < length:
        chunks.append((cursor, length))
    return chunks


def write_sequential(gate: Optional[PhaseGate], handle: DeviceFile, offset: int, data,
                     pools: WorkerPools, phase: str) -> int:
    """Écriture séquentielle concurrente (pool d'écriture) dans une phase d'écriture."""
    view = memoryview(data)
    length = len(view)
    if length == 0:
        view.release()
        return 0
    chunks = _write_chunks(offset, length, pools.size(PoolRole.WRITE), handle.device.spec.line_size)
    try:
        with enter_write_phase(gate):
            pools.run(PoolRole.WRITE,
                      lambda span: handle.write(offset + span[0], view[span[0]:span[1]], SEQ_WRITE, phase),
                      chunks)
    finally:
        view.release()
    return length


def flush_write_buffer(gate: Optional[PhaseGate], buffer: StagingBuffer, handle: DeviceFile,
                       offset: int, pools: WorkerPools, phase: str) -> int:
    """
    Écrit séquentiellement le contenu du buffer à `offset` avec le pool d'écriture,
    dans une phase d'écriture, puis remet le buffer à zéro.

    Returns:
        Nombre d'octets écrits
    """
    if buffer.role is not BufferRole.WRITE_BUFFER:
        raise ValueError("flush_write_buffer attend un buffer d'écriture")
    if buffer.fill == 0:
        return 0
    view = buffer.view()
    try:
        written = write_sequential(gate, handle, offset, view, pools, phase)
    finally:
        view.release()
    buffer.reset()
    return written


class WriteBehind:
    """
    Pipeline du buffer d'écriture selon le modèle de concurrence.

    NoOverlap: vidage synchrone dans une phase d'écriture.
    Overlap: double buffer, vidage en arrière-plan pendant que les lectures continuent.
    NoSync: pas de buffer partagé, chaque worker écrit directement sa portion (`reserve`).
    """

    def __init__(self, gate: PhaseGate, pools: WorkerPools, handle: DeviceFile, capacity: int,
                 phase: str, start_offset: int = 0):
        self.gate = gate
        self.pools = pools
        self.handle = handle
        self.capacity = capacity
        self.phase = phase
        self.offset = start_offset
        self.flushes = 0
        self.direct = gate.mode is ConcurrencyMode.NOSYNC
        double = gate.mode is ConcurrencyMode.OVERLAP
        count = 0 if self.direct else (2 if double else 1)
        self._buffers = [StagingBuffer(capacity) for _ in range(count)]
        self._current = 0
        self._pending: Optional[Future] = None
        self._flusher = ThreadPoolExecutor(max_workers=1, thread_name_prefix='flush') if double else None

    @property
    def buffer(self) -> StagingBuffer:
        if self.direct:
            raise BufferError("pas de buffer d'écriture partagé en mode NoSync")
        return self._buffers[self._current]

    def reserve(self, nbytes: int) -> int:
        """Réserve une plage de sortie pour des écritures directes, retourne son offset."""
        offset = self.offset
        self.offset += nbytes
        return offset

    def write_direct(self, offset: int, data) -> None:
        self.handle.write(offset, data, SEQ_WRITE, self.phase)

    def _wait_pending(self) -> None:
        if self._pending is not None:
            pending, self._pending = self._pending, None
            pending.result()

    def flush(self) -> None:
        """Événement buffer plein (ou fin de merge)."""
        if self.direct:
            return
        buffer = self.buffer
        if buffer.fill == 0:
            return
        offset = self.reserve(buffer.fill)
        self.flushes += 1
        if self._flusher is None:
            flush_write_buffer(self.gate, buffer, self.handle, offset, self.pools, self.phase)
            return
        self._wait_pending()
        self._pending = self._flusher.submit(flush_write_buffer, self.gate, buffer, self.handle,
                                             offset, self.pools, self.phase)
        self._current = 1 - self._current

    def close(self) -> None:
        try:
            self.flush()
            self._wait_pending()
        finally:
            if self._flusher is not None:
                self._flusher.shutdown(wait=True)

    def abort(self) -> None:
        if self._flusher is not None:
            self._flusher.shutdown(wait=True)
        self._pending = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
