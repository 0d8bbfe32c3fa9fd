#!/usr/bin/env python3
"""
Microbenchmarks du périphérique et dimensionnement des pools de threads
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

import config
from device import (
    AccessKind, Device, DeviceFile, Direction, Pattern, PS_PER_NS,
    RANDOM_READ, SEQ_WRITE, STRIDED_READ,
)

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (64, 256, 4096)
DEFAULT_THREADS = (1, 2, 4, 8, 16, 32)
DEFAULT_DURATION = 0.05
OPS_PER_WORKER = 64
PROFILE_PHASE = 'PROFILE'
TIE_TOLERANCE = 1e-9

# motifs mesurés: Strided est profilé comme Random
MEASURED_PATTERNS = (Pattern.SEQUENTIAL, Pattern.RANDOM)


class ProfileError(Exception):
    """Profil absent, vide ou illisible."""


@dataclass
class DeviceProfile:
    """Courbes de débit mesurées (octets/s)."""

    read_curve: Dict[Tuple[Pattern, int, int], float] = field(default_factory=dict)
    write_curve: Dict[int, float] = field(default_factory=dict)
    device: str = ''
    measured_at: str = ''

    def scaled(self, factor: float) -> 'DeviceProfile':
        return DeviceProfile(
            {key: value * factor for key, value in self.read_curve.items()},
            {key: value * factor for key, value in self.write_curve.items()},
            self.device, self.measured_at,
        )


@dataclass(frozen=True)
class PoolPlan:
    read_pool: int = config.DEFAULT_READ_POOL
    random_read_pool: int = config.DEFAULT_RANDOM_READ_POOL
    write_pool: int = config.DEFAULT_WRITE_POOL
    sort_pool: int = field(default_factory=lambda: os.cpu_count() or 1)

    def __post_init__(self):
        for name in ('read_pool', 'random_read_pool', 'write_pool', 'sort_pool'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} doit être >= 1 (reçu {getattr(self, name)})")

    @classmethod
    def single_thread(cls) -> 'PoolPlan':
        return cls(1, 1, 1, 1)

    def capped(self, cap: Optional[int]) -> 'PoolPlan':
        if cap is None:
            return self
        return PoolPlan(min(self.read_pool, cap), min(self.random_read_pool, cap),
                        min(self.write_pool, cap), min(self.sort_pool, cap))


def _sample_offsets(pattern: Pattern, region: int, size: int, ops: int, seed: int) -> np.ndarray:
    slots = max(1, region // size)
    if pattern is Pattern.SEQUENTIAL:
        return (np.arange(ops) % slots) * size
    rng = np.random.default_rng(seed)
    return rng.integers(0, slots, size=ops) * size


def _measure(device: Device, scratch: DeviceFile, kind: AccessKind, size: int, threads: int,
             region: int, duration: float) -> float:
    """Débit agrégé d'une cellule (octets/s)."""
    emulated = device.spec.emulated
    payload = bytes(size)

    def worker(worker_id: int) -> Tuple[int, float]:
        base = worker_id * region
        offsets = _sample_offsets(kind.pattern, region, size, OPS_PER_WORKER, seed=worker_id) + base
        moved = 0
        start = time.perf_counter()
        with device.delay_meter() as meter:
            while True:
                for offset in offsets.tolist():
                    if kind.direction is Direction.READ:
                        scratch.read(offset, size, kind, PROFILE_PHASE)
                    else:
                        scratch.write(offset, payload, kind, PROFILE_PHASE)
                    moved += size
                if emulated or time.perf_counter() - start >= duration:
                    break
        if emulated:
            return moved, meter.delay_ps / (PS_PER_NS * 1e9)
        return moved, time.perf_counter() - start

    with device.declare_workers(kind.direction, threads):
        with ThreadPoolExecutor(max_workers=threads, thread_name_prefix='profiler') as pool:
            results = list(pool.map(worker, range(threads)))

    moved = sum(r[0] for r in results)
    elapsed = max(r[1] for r in results)
    if elapsed <= 0:
        raise ProfileError(f"mesure nulle pour {kind} taille={size} threads={threads}")
    return moved / elapsed


def profile_device(device: Device, sizes: Iterable[int] = DEFAULT_SIZES,
                   threads: Iterable[int] = DEFAULT_THREADS,
                   duration: float = DEFAULT_DURATION) -> DeviceProfile:
    """
    Mesure les courbes de débit du périphérique.

    Args:
        device: Périphérique ouvert (utilisé en exclusivité)
        sizes: Tailles d'accès en octets
        threads: Nombres de threads à mesurer
        duration: Durée par cellule (périphériques réels uniquement)

    Returns:
        Profil du périphérique
    """
    sizes = sorted(set(sizes))
    threads = sorted(set(threads))
    if not sizes or not threads or min(threads) < 1 or min(sizes) < 1:
        raise ProfileError("tailles et nombres de threads doivent être non vides et positifs")

    region = max(sizes) * OPS_PER_WORKER
    working_set = region * max(threads)
    available = device.spec.capacity_bytes - device.used_bytes
    if working_set > available:
        raise ProfileError(f"périphérique trop petit: {working_set} octets requis, {available} disponibles")

    scratch = device.create_file('.profile-scratch', working_set)
    # pré-remplissage hors ledger
    scratch.buffer[:] = bytes(working_set)
    profile = DeviceProfile(device=device.spec.name,
                            measured_at=datetime.now().isoformat(timespec='seconds'))
    try:
        for pattern in MEASURED_PATTERNS:
            kind = AccessKind(Direction.READ, pattern)
            for size in sizes:
                for n in threads:
                    profile.read_curve[(pattern, size, n)] = _measure(device, scratch, kind, size, n, region, duration)
                    logger.debug(f"read.{pattern.value}.{size}.{n} = {profile.read_curve[(pattern, size, n)]:.0f} o/s")
        write_size = max(sizes)
        for n in threads:
            profile.write_curve[n] = _measure(device, scratch, SEQ_WRITE, write_size, n, region, duration)
    finally:
        device.remove_file(scratch)

    logger.info(f"Profil mesuré pour {device.spec.name}: {len(profile.read_curve)} cellules de lecture, "
                f"{len(profile.write_curve)} d'écriture")
    return profile


def _argmax_threads(curve: Dict[int, float]) -> int:
    if not curve:
        raise ProfileError("profil vide")
    best = max(curve.values())
    return min(t for t, value in curve.items() if value >= best * (1 - TIE_TOLERANCE))


def pool_size(profile: DeviceProfile, kind: AccessKind, access_size: int) -> int:
    """
    Nombre de threads maximisant le débit mesuré pour un type d'accès.

    Ce n'est pas un argmax strict: un débit à moins de TIE_TOLERANCE (écart relatif)
    du maximum compte comme une égalité, et les égalités sont départagées vers le
    plus petit nombre de threads. La tolérance étant relative, le choix ne dépend
    pas de l'échelle des débits.
    """
    if kind.direction is Direction.WRITE:
        return _argmax_threads(profile.write_curve)

    pattern = Pattern.RANDOM if kind.pattern is Pattern.STRIDED else kind.pattern
    measured = sorted({size for (p, size, _) in profile.read_curve if p is pattern})
    if not measured:
        raise ProfileError(f"profil sans courbe de lecture {pattern.value}")
    snapped = min(measured, key=lambda size: (abs(size - access_size), size))
    curve = {t: value for (p, size, t), value in profile.read_curve.items() if p is pattern and size == snapped}
    return _argmax_threads(curve)


def plan_pools(profile: Optional[DeviceProfile], record_size: int, key_size: int = 10,
               cap: Optional[int] = None) -> PoolPlan:
    """Plan de pools à partir d'un profil (valeurs par défaut sans profil)."""
    if cap is None:
        cap = config.thread_cap()
    if profile is None:
        plan = PoolPlan()
    else:
        plan = PoolPlan(
            read_pool=pool_size(profile, STRIDED_READ, key_size),
            random_read_pool=pool_size(profile, RANDOM_READ, record_size),
            write_pool=pool_size(profile, SEQ_WRITE, record_size),
        )
    return plan.capped(cap)


def format_profile(profile: DeviceProfile) -> str:
    lines = ['# braidsort device profile', f"device={profile.device}", f"measured_at={profile.measured_at}"]
    for (pattern, size, threads), value in sorted(profile.read_curve.items(),
                                                  key=lambda item: (item[0][0].value, item[0][1], item[0][2])):
        lines.append(f"read.{pattern.value}.{size}.{threads}={value!r}")
    for threads, value in sorted(profile.write_curve.items()):
        lines.append(f"write.{threads}={value!r}")
    return '\n'.join(lines) + '\n'


def parse_profile(text: str) -> DeviceProfile:
    profile = DeviceProfile()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep:
            raise ProfileError(f"ligne {lineno}: '=' attendu")
        try:
            parts = key.split('.')
            if key == 'device':
                profile.device = value
            elif key == 'measured_at':
                profile.measured_at = value
            elif parts[0] == 'read' and len(parts) == 4:
                cell = (Pattern(parts[1]), int(parts[2]), int(parts[3]))
                profile.read_curve[cell] = float(value)
            elif parts[0] == 'write' and len(parts) == 2:
                profile.write_curve[int(parts[1])] = float(value)
            else:
                raise ProfileError(f"ligne {lineno}: clé inconnue {key!r}")
        except ValueError as e:
            raise ProfileError(f"ligne {lineno}: {e}") from e

    if not profile.write_curve:
        raise ProfileError("courbe d'écriture absente du profil")
    if not profile.read_curve:
        raise ProfileError("courbe de lecture absente du profil")
    cells = list(profile.read_curve.values()) + list(profile.write_curve.values())
    if min(cells) <= 0:
        raise ProfileError("toutes les cellules du profil doivent être > 0")
    return profile


def save_profile(profile: DeviceProfile, path) -> None:
    Path(path).write_text(format_profile(profile))
    logger.info(f"Profil sauvegardé: {path}")


def load_profile(path) -> DeviceProfile:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ProfileError(f"Impossible de lire le profil {path}: {e}") from e
    return parse_profile(text)
