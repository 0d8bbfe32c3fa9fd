#!/usr/bin/env python3
"""
Rapports par phase: temps mur, délai injecté et octets par type d'accès
"""

import logging
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from device import Device, Direction, Pattern, TrafficLedger

logger = logging.getLogger(__name__)

RUN_READ = 'RUN read'
RUN_SORT = 'RUN sort'
RUN_OTHER = 'RUN other'
RUN_WRITE = 'RUN write'
MERGE_READ = 'MERGE read'
MERGE_OTHER = 'MERGE other'
RECORD_READ = 'RECORD read'
MERGE_WRITE = 'MERGE write'

PHASES = [RUN_READ, RUN_SORT, RUN_OTHER, RUN_WRITE, MERGE_READ, MERGE_OTHER, RECORD_READ, MERGE_WRITE]

_BYTE_COLUMNS = [
    (Direction.READ, Pattern.SEQUENTIAL),
    (Direction.READ, Pattern.STRIDED),
    (Direction.READ, Pattern.RANDOM),
    (Direction.WRITE, Pattern.SEQUENTIAL),
    (Direction.WRITE, Pattern.RANDOM),
]

REPORT_COLUMNS = (['phase', 'wall_s', 'injected_delay_ns', 'read_bytes', 'write_bytes']
                  + [f"{d.value}_{p.value}_bytes" for d, p in _BYTE_COLUMNS])


class PhaseClock:
    """Temps mur cumulé par phase (utilisable depuis plusieurs threads)."""

    def __init__(self):
        self.wall: Dict[str, float] = {}
        self._lock = threading.Lock()

    @contextmanager
    def measure(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.add(phase, time.perf_counter() - start)

    def add(self, phase: str, seconds: float) -> None:
        with self._lock:
            self.wall[phase] = self.wall.get(phase, 0.0) + seconds

    def total(self) -> float:
        return sum(self.wall.values())


def _ordered_phases(phases) -> List[str]:
    known = [p for p in PHASES if p in phases]
    return known + sorted(p for p in phases if p not in PHASES)


class PhaseReport:
    """Jointure du ledger et de l'horloge de phases."""

    def __init__(self, ledger: TrafficLedger, clock: Optional[PhaseClock] = None):
        self.ledger = ledger
        self.clock = clock or PhaseClock()

    def phases(self) -> List[str]:
        return _ordered_phases(set(self.ledger.phases()) | set(self.clock.wall))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for phase in self.phases():
            row = {
                'phase': phase,
                'wall_s': self.clock.wall.get(phase, 0.0),
                'injected_delay_ns': self.ledger.total_delay_ns(phase=phase),
                'read_bytes': self.ledger.total_bytes(phase=phase, direction=Direction.READ),
                'write_bytes': self.ledger.total_bytes(phase=phase, direction=Direction.WRITE),
            }
            for direction, pattern in _BYTE_COLUMNS:
                row[f"{direction.value}_{pattern.value}_bytes"] = self.ledger.total_bytes(phase, direction, pattern)
            rows.append(row)
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def artifact_paths(report_path) -> Dict[str, Path]:
    """Chemins du rapport et des CSV compagnons (<stem>.ledger.csv, <stem>.trace.csv)."""
    report_path = Path(report_path)
    stem = report_path.with_suffix('')
    return {
        'report': report_path,
        'ledger': Path(f"{stem}.ledger.csv"),
        'trace': Path(f"{stem}.trace.csv"),
    }


def write_artifacts(report_path, device: Device, clock: Optional[PhaseClock] = None) -> Dict[str, Path]:
    """Écrit rapport de phases, ledger et trace."""
    paths = artifact_paths(report_path)
    paths['report'].parent.mkdir(parents=True, exist_ok=True)
    ledger, trace = device.snapshot()
    PhaseReport(ledger, clock).to_csv(paths['report'])
    ledger.to_csv(paths['ledger'])
    trace.to_csv(paths['trace'])
    logger.info(f"Rapports écrits: {paths['report']}, {paths['ledger'].name}, {paths['trace'].name}")
    return paths
