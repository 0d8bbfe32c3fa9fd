#!/usr/bin/env python3
"""
Périphérique de stockage: fichier réel ou périphérique BRAID émulé
Délais injectés par ligne de cache, comptabilité exacte du trafic et trace des accès
"""

import enum
import logging
import mmap
import shutil
import tempfile
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import config

logger = logging.getLogger(__name__)

DEFAULT_LINE_SIZE = 64
DEFAULT_CAPACITY = 64 * config.GIB
PS_PER_NS = 1000


class DeviceError(Exception):
    """Erreur de base du périphérique."""


class DeviceSpecError(DeviceError):
    """Paramètres d'émulation invalides ou fichier de spécification illisible."""


class DeviceFullError(DeviceError):
    """Capacité du périphérique dépassée."""


class OutOfRangeError(DeviceError):
    """Accès hors des bornes d'un fichier."""


class ReadOnlyError(DeviceError):
    """Écriture sur un fichier ouvert en lecture seule."""


class Backing(enum.Enum):
    REAL_FILE = 'real'
    EMULATED = 'emulated'


class Direction(enum.Enum):
    READ = 'read'
    WRITE = 'write'


class Pattern(enum.Enum):
    SEQUENTIAL = 'sequential'
    STRIDED = 'strided'
    RANDOM = 'random'


@dataclass(frozen=True)
class AccessKind:
    direction: Direction
    pattern: Pattern

    def __post_init__(self):
        if self.pattern is Pattern.STRIDED and self.direction is not Direction.READ:
            raise DeviceError("le motif Strided est réservé aux lectures")

    def __str__(self):
        return f"{self.direction.value}/{self.pattern.value}"


SEQ_READ = AccessKind(Direction.READ, Pattern.SEQUENTIAL)
STRIDED_READ = AccessKind(Direction.READ, Pattern.STRIDED)
RANDOM_READ = AccessKind(Direction.READ, Pattern.RANDOM)
SEQ_WRITE = AccessKind(Direction.WRITE, Pattern.SEQUENTIAL)
RANDOM_WRITE = AccessKind(Direction.WRITE, Pattern.RANDOM)


def lookup_scaling(table: Dict[int, float], threads: int) -> float:
    """Recherche constante par morceaux: clé mesurée la plus proche en dessous."""
    keys = [k for k in table if k <= threads]
    if not keys:
        return table[min(table)]
    return table[max(keys)]


@dataclass
class DeviceSpec:
    """Paramètres BRAID d'un périphérique (latences en ns par ligne)."""

    backing: Backing = Backing.EMULATED
    line_size: int = DEFAULT_LINE_SIZE
    base_read_latency_ns: float = 100.0
    seq_read_extra_ns: float = 0.0
    rand_read_extra_ns: float = 0.0
    write_extra_ns: float = 0.0
    interference_read_slowdown: float = 2.0
    read_scaling: Dict[int, float] = field(default_factory=lambda: {1: 1.0})
    write_scaling: Dict[int, float] = field(default_factory=lambda: {1: 1.0})
    interference_table: Dict[int, float] = field(default_factory=dict)
    capacity_bytes: int = DEFAULT_CAPACITY
    inject_delay: bool = False
    name: str = 'custom'

    def validate(self) -> 'DeviceSpec':
        latencies = {
            'base_read_latency_ns': self.base_read_latency_ns,
            'seq_read_extra_ns': self.seq_read_extra_ns,
            'rand_read_extra_ns': self.rand_read_extra_ns,
            'write_extra_ns': self.write_extra_ns,
        }
        for name, value in latencies.items():
            if value < 0:
                raise DeviceSpecError(f"{name} doit être >= 0 (reçu {value})")
        if self.line_size < 1:
            raise DeviceSpecError(f"line_size doit être >= 1 (reçu {self.line_size})")
        if self.capacity_bytes < 0:
            raise DeviceSpecError(f"capacity_bytes doit être >= 0 (reçu {self.capacity_bytes})")
        if self.interference_read_slowdown < 1:
            raise DeviceSpecError(
                f"interference_read_slowdown doit être >= 1 (reçu {self.interference_read_slowdown})")
        for name, table in (('read_scaling', self.read_scaling), ('write_scaling', self.write_scaling)):
            if not table:
                raise DeviceSpecError(f"{name} ne peut pas être vide")
            for threads, value in table.items():
                if threads < 1 or value <= 0:
                    raise DeviceSpecError(f"{name}.{threads}={value} invalide")
        for writers, value in self.interference_table.items():
            if writers < 1 or value < 1:
                raise DeviceSpecError(f"interference.{writers}={value} invalide")
        return self

    @property
    def emulated(self) -> bool:
        return self.backing is Backing.EMULATED

    @property
    def interferes(self) -> bool:
        if self.interference_table:
            return max(self.interference_table.values()) > 1
        return self.interference_read_slowdown > 1

    def read_line_ns(self, pattern: Pattern) -> float:
        extra = self.seq_read_extra_ns if pattern is Pattern.SEQUENTIAL else self.rand_read_extra_ns
        return self.base_read_latency_ns + extra

    def write_line_ns(self) -> float:
        return self.base_read_latency_ns + self.write_extra_ns

    def interference_factor(self, writers: int) -> float:
        if writers < 1:
            return 1.0
        if self.interference_table:
            return lookup_scaling(self.interference_table, writers)
        return self.interference_read_slowdown

    def line_delay_ps(self, direction: Direction, pattern: Pattern, threads: int, writers: int = 0) -> int:
        """Délai injecté par ligne, en picosecondes entières."""
        if not self.emulated:
            return 0
        if direction is Direction.READ:
            base = self.read_line_ns(pattern) / lookup_scaling(self.read_scaling, threads)
            base *= self.interference_factor(writers)
        else:
            base = self.write_line_ns() / lookup_scaling(self.write_scaling, threads)
        return int(round(base * PS_PER_NS))


_PRESET_SCALING = {
    'read_scaling': {1: 1.0, 17: 0.5},
    'write_scaling': {1: 1.0, 6: 0.5},
}

PRESETS = {
    'bd': dict(rand_read_extra_ns=500.0, write_extra_ns=0.0, interference_read_slowdown=1.0),
    'brd': dict(rand_read_extra_ns=0.0, write_extra_ns=0.0, interference_read_slowdown=1.0),
    'bard': dict(rand_read_extra_ns=0.0, write_extra_ns=500.0, interference_read_slowdown=1.0),
    'braid': dict(rand_read_extra_ns=0.0, write_extra_ns=1500.0, interference_read_slowdown=2.0),
}


def preset(name: str, **overrides) -> DeviceSpec:
    """Spécification d'un périphérique émulé prédéfini (bd, brd, bard, braid)."""
    key = name.lower()
    if key not in PRESETS:
        raise DeviceSpecError(f"Preset inconnu: {name} (disponibles: {', '.join(PRESETS)})")
    params = dict(PRESETS[key])
    params.update({k: dict(v) for k, v in _PRESET_SCALING.items()})
    params.update(overrides)
    return DeviceSpec(name=key, **params).validate()


_SCALAR_KEYS = {
    'line_size': int,
    'base_read_latency_ns': float,
    'seq_read_extra_ns': float,
    'rand_read_extra_ns': float,
    'write_extra_ns': float,
    'interference_read_slowdown': float,
    'capacity_bytes': config.parse_size,
}
_TABLE_KEYS = {
    'read_scaling': 'read_scaling',
    'write_scaling': 'write_scaling',
    'interference': 'interference_table',
}


def parse_spec(text: str) -> DeviceSpec:
    """Lit une spécification au format clé=valeur."""
    spec = DeviceSpec(read_scaling={}, write_scaling={})
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise DeviceSpecError(f"ligne {lineno}: '=' attendu ({raw.strip()!r})")
        key, value = (part.strip() for part in line.split('=', 1))
        try:
            if key == 'backing':
                spec.backing = Backing(value.lower())
            elif key == 'inject_delay':
                spec.inject_delay = value.lower() == 'true'
            elif key == 'name':
                spec.name = value
            elif key in _SCALAR_KEYS:
                setattr(spec, key, _SCALAR_KEYS[key](value))
            elif '.' in key and key.split('.', 1)[0] in _TABLE_KEYS:
                prefix, threads = key.split('.', 1)
                getattr(spec, _TABLE_KEYS[prefix])[int(threads)] = float(value)
            else:
                raise DeviceSpecError(f"ligne {lineno}: clé inconnue {key!r}")
        except ValueError as e:
            raise DeviceSpecError(f"ligne {lineno}: valeur invalide pour {key}: {e}") from e
    spec.read_scaling = spec.read_scaling or {1: 1.0}
    spec.write_scaling = spec.write_scaling or {1: 1.0}
    return spec.validate()


def format_spec(spec: DeviceSpec) -> str:
    lines = [
        f"name={spec.name}",
        f"backing={spec.backing.value}",
        f"line_size={spec.line_size}",
        f"base_read_latency_ns={spec.base_read_latency_ns!r}",
        f"seq_read_extra_ns={spec.seq_read_extra_ns!r}",
        f"rand_read_extra_ns={spec.rand_read_extra_ns!r}",
        f"write_extra_ns={spec.write_extra_ns!r}",
        f"interference_read_slowdown={spec.interference_read_slowdown!r}",
        f"capacity_bytes={spec.capacity_bytes}",
        f"inject_delay={'true' if spec.inject_delay else 'false'}",
    ]
    for prefix, attr in _TABLE_KEYS.items():
        for threads, value in sorted(getattr(spec, attr).items()):
            lines.append(f"{prefix}.{threads}={value!r}")
    return '\n'.join(lines) + '\n'


def save_spec(spec: DeviceSpec, path) -> None:
    Path(path).write_text(format_spec(spec))


def load_spec(path) -> DeviceSpec:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DeviceSpecError(f"Impossible de lire la spécification {path}: {e}") from e
    return parse_spec(text)


def resolve_spec(name_or_path: Optional[str]) -> DeviceSpec:
    """Nom de preset, chemin de fichier, ou None (preset braid)."""
    if not name_or_path:
        spec = preset('braid')
    elif name_or_path.lower() in PRESETS:
        spec = preset(name_or_path)
    elif name_or_path.lower() == 'real':
        spec = DeviceSpec(backing=Backing.REAL_FILE, name='real')
    else:
        spec = load_spec(name_or_path)
    if config.INJECT_DELAY and spec.emulated:
        spec = replace(spec, inject_delay=True)
    return spec


def lines_spanned(offsets, lengths, line_size: int) -> int:
    """Nombre total de lignes distinctes couvertes par des accès [off, off+len)."""
    offsets = np.asarray(offsets, dtype=np.int64)
    lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), offsets.shape)
    mask = lengths > 0
    if not mask.any():
        return 0
    offsets, lengths = offsets[mask], lengths[mask]
    return int(((offsets + lengths - 1) // line_size - offsets // line_size + 1).sum())


@dataclass
class LedgerCell:
    bytes: int = 0
    ops: int = 0
    lines: int = 0
    delay_ps: int = 0
    interference_lines: int = 0

    @property
    def injected_delay_ns(self) -> float:
        return self.delay_ps / PS_PER_NS


LEDGER_COLUMNS = ['phase', 'direction', 'pattern', 'bytes', 'ops', 'lines',
                  'injected_delay_ns', 'interference_lines']


class TrafficLedger:
    """Compteurs exacts par (phase, direction, motif)."""

    def __init__(self, cells: Optional[Dict[Tuple[str, Direction, Pattern], LedgerCell]] = None):
        self.cells = cells if cells is not None else {}

    def record(self, phase: str, kind: AccessKind, nbytes: int, ops: int, lines: int,
               delay_ps: int, interference_lines: int = 0) -> None:
        cell = self.cells.setdefault((phase, kind.direction, kind.pattern), LedgerCell())
        cell.bytes += nbytes
        cell.ops += ops
        cell.lines += lines
        cell.delay_ps += delay_ps
        cell.interference_lines += interference_lines

    def copy(self) -> 'TrafficLedger':
        return TrafficLedger({key: replace(cell) for key, cell in self.cells.items()})

    def _select(self, phase=None, direction=None, pattern=None):
        for (p, d, pat), cell in self.cells.items():
            if phase is not None and p != phase:
                continue
            if direction is not None and d is not direction:
                continue
            if pattern is not None and pat is not pattern:
                continue
            yield cell

    def total_bytes(self, phase: Optional[str] = None, direction: Optional[Direction] = None,
                    pattern: Optional[Pattern] = None) -> int:
        return sum(cell.bytes for cell in self._select(phase, direction, pattern))

    def total_ops(self, phase=None, direction=None, pattern=None) -> int:
        return sum(cell.ops for cell in self._select(phase, direction, pattern))

    def total_lines(self, phase=None, direction=None, pattern=None) -> int:
        return sum(cell.lines for cell in self._select(phase, direction, pattern))

    def total_delay_ps(self, phase=None, direction=None, pattern=None) -> int:
        return sum(cell.delay_ps for cell in self._select(phase, direction, pattern))

    def total_delay_ns(self, phase=None, direction=None, pattern=None) -> float:
        return self.total_delay_ps(phase, direction, pattern) / PS_PER_NS

    def interference_lines(self, phase: Optional[str] = None) -> int:
        return sum(cell.interference_lines for cell in self._select(phase))

    def phases(self) -> List[str]:
        return sorted({phase for phase, _, _ in self.cells})

    def is_zero(self) -> bool:
        return all(cell == LedgerCell() for cell in self.cells.values())

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                'phase': phase,
                'direction': direction.value,
                'pattern': pattern.value,
                'bytes': cell.bytes,
                'ops': cell.ops,
                'lines': cell.lines,
                'injected_delay_ns': cell.injected_delay_ns,
                'interference_lines': cell.interference_lines,
            }
            for (phase, direction, pattern), cell in self.cells.items()
        ]
        df = pd.DataFrame(rows, columns=LEDGER_COLUMNS)
        return df.sort_values(['phase', 'direction', 'pattern']).reset_index(drop=True)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


@dataclass(frozen=True)
class TraceWindow:
    start_ns: int
    end_ns: int
    direction: Direction
    phase: str
    thread: str


TRACE_COLUMNS = ['start_ns', 'end_ns', 'direction', 'phase', 'thread']


class PhaseTrace:
    """Fenêtres horodatées des accès (lecture ou écriture)."""

    def __init__(self, windows: Optional[List[TraceWindow]] = None):
        self.windows = list(windows or [])

    def __len__(self):
        return len(self.windows)

    def by_direction(self, direction: Direction) -> List[TraceWindow]:
        return [w for w in self.windows if w.direction is direction]

    def overlapping_pairs(self) -> int:
        """Nombre de paires (lecture, écriture) dont les fenêtres se chevauchent."""
        reads = self.by_direction(Direction.READ)
        writes = self.by_direction(Direction.WRITE)
        if not reads or not writes:
            return 0
        read_starts = np.sort(np.array([w.start_ns for w in reads], dtype=np.int64))
        read_ends = np.sort(np.array([w.end_ns for w in reads], dtype=np.int64))
        write_starts = np.array([w.start_ns for w in writes], dtype=np.int64)
        write_ends = np.array([w.end_ns for w in writes], dtype=np.int64)
        started = np.searchsorted(read_starts, write_ends, side='left')
        finished = np.searchsorted(read_ends, write_starts, side='right')
        return int((started - finished).sum())

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {'start_ns': w.start_ns, 'end_ns': w.end_ns, 'direction': w.direction.value,
             'phase': w.phase, 'thread': w.thread}
            for w in self.windows
        ]
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


class DelayMeter:
    """Accumulateur du délai injecté pour le thread courant."""

    def __init__(self):
        self.delay_ps = 0
        self.bytes = 0

    @property
    def delay_ns(self) -> float:
        return self.delay_ps / PS_PER_NS


class DeviceFile:
    """Fichier adressable d'un périphérique (projection mémoire)."""

    def __init__(self, device: 'Device', path: Path, size: int, readonly: bool):
        self.device = device
        self.path = path
        self.size = size
        self.readonly = readonly
        self._fh = None
        self._map = None
        if size == 0:
            self.buffer = bytearray()
            return
        self._fh = open(path, 'rb' if readonly else 'r+b')
        access = mmap.ACCESS_READ if readonly else mmap.ACCESS_WRITE
        self._map = mmap.mmap(self._fh.fileno(), size, access=access)
        self.buffer = self._map

    def check_range(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise OutOfRangeError(f"{self.path.name}: accès [{offset}, {offset + length}) hors de [0, {self.size})")

    def read(self, offset: int, length: int, kind: AccessKind = SEQ_READ, phase: str = 'IO') -> bytes:
        return self.device.read(self, offset, length, kind, phase)

    def write(self, offset: int, data, kind: AccessKind = SEQ_WRITE, phase: str = 'IO') -> None:
        self.device.write(self, offset, data, kind, phase)

    def flush(self) -> None:
        if self._map is not None and not self.readonly:
            self._map.flush()

    def close(self) -> None:
        if self._map is not None:
            self.flush()
            self._map.close()
            self._map = None
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        self.buffer = bytearray()

    @property
    def closed(self) -> bool:
        return self._map is None and self.size > 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Device:
    """
    Périphérique partagé entre threads.
    Chaque accès met à jour le ledger et la trace de façon atomique.
    """

    def __init__(self, spec: DeviceSpec, root=None):
        self.spec = spec.validate()
        self._own_root = root is None
        if root is None:
            self.root = Path(tempfile.mkdtemp(prefix='braidsort-', dir=config.SCRATCH_DIR))
        else:
            self.root = Path(root)
            self.root.mkdir(parents=True, exist_ok=True)
        self.ledger = TrafficLedger()
        self.trace = PhaseTrace()
        self._lock = threading.Lock()
        self._inflight = {Direction.READ: 0, Direction.WRITE: 0}
        self._declared: Dict[Direction, List[List[int]]] = {}
        self._local = threading.local()
        self._files: Dict[Path, DeviceFile] = {}
        self._allocated: Dict[Path, int] = {}
        self._t0 = time.perf_counter_ns()
        logger.debug(f"Périphérique ouvert: {spec.name} ({spec.backing.value}) sous {self.root}")

    # Fichiers

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    @property
    def used_bytes(self) -> int:
        return sum(self._allocated.values())

    def _reserve(self, path: Path, size: int) -> None:
        with self._lock:
            current = self.used_bytes - self._allocated.get(path, 0)
            if current + size > self.spec.capacity_bytes:
                raise DeviceFullError(
                    f"{path.name}: {size} octets demandés, {self.spec.capacity_bytes - current} disponibles")
            self._allocated[path] = size

    def create_file(self, path, size: int) -> DeviceFile:
        """Crée (ou remplace) un fichier de taille fixe."""
        path = self.resolve(path)
        self._release(path)
        self._reserve(path, size)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'wb') as f:
                f.truncate(size)
        except OSError:
            self._allocated.pop(path, None)
            raise
        handle = DeviceFile(self, path, size, readonly=False)
        self._files[path] = handle
        return handle

    def open_file(self, path, readonly: bool = True) -> DeviceFile:
        path = self.resolve(path)
        if not path.exists():
            raise DeviceError(f"Fichier introuvable: {path}")
        self._release(path)
        size = path.stat().st_size
        self._reserve(path, size)
        handle = DeviceFile(self, path, size, readonly=readonly)
        self._files[path] = handle
        return handle

    def _release(self, path: Path) -> None:
        handle = self._files.pop(path, None)
        if handle is not None:
            handle.close()

    def close_file(self, handle: DeviceFile) -> None:
        self._release(handle.path)

    def remove_file(self, target) -> None:
        """Supprime un fichier (poignée ou chemin) et libère sa capacité."""
        path = target.path if isinstance(target, DeviceFile) else self.resolve(target)
        self._release(path)
        with self._lock:
            self._allocated.pop(path, None)
        path.unlink(missing_ok=True)

    def close(self) -> None:
        for path in list(self._files):
            self._release(path)
        if self._own_root:
            shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # Concurrence

    @contextmanager
    def declare_workers(self, direction: Direction, workers: int):
        """Déclare le nombre de workers concurrents d'une direction."""
        declaration = [max(1, workers)]
        with self._lock:
            self._declared.setdefault(direction, []).append(declaration)
        try:
            yield
        finally:
            with self._lock:
                stack = self._declared[direction]
                stack.remove(declaration)
                if not stack:
                    del self._declared[direction]

    @contextmanager
    def delay_meter(self):
        meters = self._meters()
        meter = DelayMeter()
        meters.append(meter)
        try:
            yield meter
        finally:
            meters.remove(meter)

    def _meters(self) -> List[DelayMeter]:
        if not hasattr(self._local, 'meters'):
            self._local.meters = []
        return self._local.meters

    def inflight(self, direction: Direction) -> int:
        with self._lock:
            return self._inflight[direction]

    # Accès

    def _access(self, kind: AccessKind, phase: str, nbytes: int, ops: int, lines: int, action):
        if lines == 0:
            return action()
        direction = kind.direction
        with self._lock:
            self._inflight[direction] += 1
            declared = self._declared.get(direction)
            threads = declared[-1][0] if declared else self._inflight[direction]
            writers = self._inflight[Direction.WRITE] if direction is Direction.READ else 0
            line_ps = self.spec.line_delay_ps(direction, kind.pattern, threads, writers)
        interfering = (direction is Direction.READ and self.spec.emulated
                       and self.spec.interference_factor(writers) > 1)
        delay_ps = lines * line_ps
        start = time.perf_counter_ns()
        try:
            result = action()
            if self.spec.inject_delay and delay_ps:
                _spin_until(start + delay_ps // PS_PER_NS)
        finally:
            end = max(time.perf_counter_ns(), start + 1)
            with self._lock:
                self._inflight[direction] -= 1
                self.ledger.record(phase, kind, nbytes, ops, lines, delay_ps,
                                   lines if interfering else 0)
                self.trace.windows.append(TraceWindow(
                    start - self._t0, end - self._t0, direction, phase, threading.current_thread().name))
        for meter in self._meters():
            meter.delay_ps += delay_ps
            meter.bytes += nbytes
        return result

    def _check_read(self, handle: DeviceFile, kind: AccessKind) -> None:
        if kind.direction is not Direction.READ:
            raise DeviceError(f"accès {kind} passé à une lecture")
        if handle.closed:
            raise DeviceError(f"{handle.path.name}: fichier fermé")

    def _check_write(self, handle: DeviceFile, kind: AccessKind) -> None:
        if kind.direction is not Direction.WRITE:
            raise DeviceError(f"accès {kind} passé à une écriture")
        if handle.readonly:
            raise ReadOnlyError(f"{handle.path.name}: ouvert en lecture seule")
        if handle.closed:
            raise DeviceError(f"{handle.path.name}: fichier fermé")

    def read(self, handle: DeviceFile, offset: int, length: int, kind: AccessKind, phase: str) -> bytes:
        self._check_read(handle, kind)
        handle.check_range(offset, length)
        lines = lines_spanned([offset], [length], self.spec.line_size)
        if length == 0:
            return b''
        return self._access(kind, phase, length, 1, lines,
                            lambda: bytes(handle.buffer[offset:offset + length]))

    def write(self, handle: DeviceFile, offset: int, data, kind: AccessKind, phase: str) -> None:
        self._check_write(handle, kind)
        length = len(data)
        handle.check_range(offset, length)
        if length == 0:
            return

        def action():
            handle.buffer[offset:offset + length] = data

        self._access(kind, phase, length, 1, lines_spanned([offset], [length], self.spec.line_size), action)

    def _record_view(self, handle: DeviceFile, base: int, record_size: int) -> np.ndarray:
        count = (handle.size - base) // record_size if handle.size > base else 0
        if count == 0:
            return np.zeros((0, record_size), dtype=np.uint8)
        return np.frombuffer(handle.buffer, dtype=np.uint8, count=count * record_size,
                             offset=base).reshape(count, record_size)

    def read_records(self, handle: DeviceFile, base: int, record_size: int, indices,
                     length: int, kind: AccessKind, phase: str, column: int = 0) -> np.ndarray:
        """
        Lecture vectorisée de `length` octets à `column` dans chaque enregistrement choisi.

        Returns:
            Tableau uint8 (len(indices), length)
        """
        self._check_read(handle, kind)
        indices = np.asarray(indices, dtype=np.int64)
        if len(indices) == 0 or length == 0:
            return np.zeros((len(indices), length), dtype=np.uint8)
        if column < 0 or column + length > record_size:
            raise OutOfRangeError(f"colonne [{column}, {column + length}) hors d'un enregistrement de {record_size}")
        view = self._record_view(handle, base, record_size)
        if indices.min() < 0 or indices.max() >= len(view):
            raise OutOfRangeError(f"{handle.path.name}: indice d'enregistrement hors de [0, {len(view)})")
        offsets = base + indices * record_size + column
        lines = lines_spanned(offsets, length, self.spec.line_size)
        return self._access(kind, phase, len(indices) * length, len(indices), lines,
                            lambda: view[indices, column:column + length])

    def write_records(self, handle: DeviceFile, base: int, record_size: int, indices,
                      data: np.ndarray, kind: AccessKind, phase: str) -> None:
        """Écriture vectorisée d'enregistrements complets aux indices donnés."""
        self._check_write(handle, kind)
        indices = np.asarray(indices, dtype=np.int64)
        if len(indices) == 0:
            return
        view = self._record_view(handle, base, record_size)
        if indices.min() < 0 or indices.max() >= len(view):
            raise OutOfRangeError(f"{handle.path.name}: indice d'enregistrement hors de [0, {len(view)})")
        lines = lines_spanned(base + indices * record_size, record_size, self.spec.line_size)

        def action():
            view[indices] = data

        self._access(kind, phase, len(indices) * record_size, len(indices), lines, action)

    def read_spans(self, handle: DeviceFile, offsets: Sequence[int], lengths: Sequence[int],
                   kind: AccessKind, phase: str) -> List[bytes]:
        """Lecture vectorisée d'une liste de segments (offset, longueur)."""
        self._check_read(handle, kind)
        offsets = np.asarray(offsets, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if len(offsets) == 0:
            return []
        if offsets.min() < 0 or lengths.min() < 0 or (offsets + lengths).max() > handle.size:
            raise OutOfRangeError(f"{handle.path.name}: segment hors de [0, {handle.size})")
        buf = handle.buffer
        pairs = list(zip(offsets.tolist(), lengths.tolist()))
        lines = lines_spanned(offsets, lengths, self.spec.line_size)
        return self._access(kind, phase, int(lengths.sum()), len(pairs), lines,
                            lambda: [bytes(buf[o:o + n]) for o, n in pairs])

    def snapshot(self) -> Tuple[TrafficLedger, PhaseTrace]:
        with self._lock:
            return self.ledger.copy(), PhaseTrace(self.trace.windows)

    def reset_accounting(self) -> None:
        with self._lock:
            self.ledger = TrafficLedger()
            self.trace = PhaseTrace()


def _spin_until(deadline_ns: int) -> None:
    # attente active calibrée; sleep(0) rend la main aux autres threads
    while time.perf_counter_ns() < deadline_ns:
        time.sleep(0)


Handle = Union[Device, DeviceFile]


def _device(handle: Handle) -> Device:
    return handle.device if isinstance(handle, DeviceFile) else handle


def open_device(spec: DeviceSpec, path=None) -> Device:
    """
    Ouvre un périphérique.

    Args:
        spec: Spécification (réelle ou émulée)
        path: Répertoire racine, ou fichier existant dont le parent sert de racine
              (None: répertoire temporaire)

    Returns:
        Périphérique avec ledger et trace vides
    """
    root = None
    if path is not None:
        path = Path(path)
        root = path.parent if path.is_file() else path
    try:
        return Device(spec, root)
    except OSError as e:
        raise DeviceError(f"Impossible d'ouvrir le périphérique sous {path}: {e}") from e


def dev_read(handle: DeviceFile, offset: int, length: int, kind: AccessKind, phase: str) -> bytes:
    return handle.device.read(handle, offset, length, kind, phase)


def dev_write(handle: DeviceFile, offset: int, data, kind: AccessKind, phase: str) -> None:
    handle.device.write(handle, offset, data, kind, phase)


def ledger_snapshot(handle: Handle) -> TrafficLedger:
    return _device(handle).snapshot()[0]


def trace_snapshot(handle: Handle) -> PhaseTrace:
    return _device(handle).snapshot()[1]
