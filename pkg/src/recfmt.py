#!/usr/bin/env python3
"""
Formats d'enregistrements, génération de jeux de données et validation
Enregistrements binaires façon sortbenchmark (clé fixe + valeur) et KLV
"""

import enum
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

VLEN_FIELD_SIZE = 4
DIGEST_BITS = 128
DIGEST_MASK = (1 << DIGEST_BITS) - 1
GEN_CHUNK_RECORDS = 1 << 16

_VLEN = struct.Struct('<I')
_MASK64 = (1 << 64) - 1


class RecordFormatError(Exception):
    """Fichier incohérent avec le format d'enregistrement annoncé."""


class LayoutMismatchError(RecordFormatError):
    """Entrée et sortie n'ont pas la même géométrie."""


class CapacityError(Exception):
    """Le jeu de données ne tient pas sur le périphérique."""


class RecordKind(enum.Enum):
    FIXED = 'fixed'
    KLV = 'klv'


@dataclass(frozen=True)
class RecordLayout:
    """Géométrie d'un enregistrement: K octets de clé puis valeur fixe ou KLV."""

    kind: RecordKind
    key_size: int
    value_size: int = 0
    vlen_field_size: int = VLEN_FIELD_SIZE

    def __post_init__(self):
        if self.key_size < 1:
            raise ValueError(f"key_size doit être >= 1 (reçu {self.key_size})")
        if self.kind is RecordKind.FIXED and self.value_size < 0:
            raise ValueError(f"value_size doit être >= 0 (reçu {self.value_size})")
        if self.kind is RecordKind.KLV and self.vlen_field_size != VLEN_FIELD_SIZE:
            raise ValueError("le champ vlength KLV fait toujours 4 octets")

    @classmethod
    def fixed(cls, key_size: int = 10, value_size: int = 90) -> 'RecordLayout':
        return cls(RecordKind.FIXED, key_size, value_size)

    @classmethod
    def klv(cls, key_size: int = 10) -> 'RecordLayout':
        return cls(RecordKind.KLV, key_size, 0)

    @property
    def is_fixed(self) -> bool:
        return self.kind is RecordKind.FIXED

    @property
    def record_size(self) -> int:
        """Taille d'un enregistrement fixe (K + V)."""
        if not self.is_fixed:
            raise RecordFormatError("les enregistrements KLV n'ont pas de taille fixe")
        return self.key_size + self.value_size

    @property
    def header_size(self) -> int:
        """Octets précédant la valeur: K (fixe) ou K + 4 (KLV)."""
        return self.key_size if self.is_fixed else self.key_size + self.vlen_field_size

    def klv_record_size(self, vlength: int) -> int:
        return self.key_size + self.vlen_field_size + vlength


@dataclass
class DatasetMeta:
    layout: RecordLayout
    record_count: int
    seed: int
    total_bytes: int
    path: Path
    vlen_min: int = 0
    vlen_max: int = 0


@dataclass
class ValidationReport:
    is_sorted: bool
    is_permutation: bool
    input_digest: int
    output_digest: int
    first_violation_index: Optional[int] = None
    record_count: int = 0

    @property
    def ok(self) -> bool:
        return self.is_sorted and self.is_permutation


def _mix64_int(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64, arithmétique modulo 2^64 sur uint64
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def value_bytes(seed: int, first_index: int, count: int, width: int) -> np.ndarray:
    """
    Octets de valeur des enregistrements [first_index, first_index + count).
    Fonction pure de (seed, index): une corruption reste détectable.

    Returns:
        Tableau uint8 (count, width)
    """
    if count == 0 or width == 0:
        return np.zeros((count, width), dtype=np.uint8)
    nwords = (width + 7) // 8
    seed_key = np.uint64(_mix64_int(seed ^ 0x9E3779B97F4A7C15))
    idx = np.arange(first_index, first_index + count, dtype=np.uint64)
    words = np.arange(nwords, dtype=np.uint64)
    x = idx[:, None] * np.uint64(nwords) + words[None, :] + seed_key
    mixed = _mix64(x).astype('<u8')
    return mixed.view(np.uint8).reshape(count, nwords * 8)[:, :width]


def _generators(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    keys_seq, vlen_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(keys_seq)), np.random.Generator(np.random.PCG64(vlen_seq))


def gen_dataset(layout: RecordLayout, record_count: int, seed: int, out_path,
                vlen_min: int = 0, vlen_max: int = 0,
                capacity: Optional[int] = None) -> DatasetMeta:
    """
    Génère un jeu de données à clés uniformément aléatoires.

    Args:
        layout: Géométrie des enregistrements
        record_count: Nombre d'enregistrements (N)
        seed: Graine 64 bits
        out_path: Fichier de sortie
        vlen_min, vlen_max: Bornes des longueurs de valeur (KLV uniquement)
        capacity: Capacité du périphérique cible (optionnel)

    Returns:
        Métadonnées du jeu de données
    """
    if record_count < 0:
        raise ValueError(f"record_count doit être >= 0 (reçu {record_count})")
    out_path = Path(out_path)
    key_rng, vlen_rng = _generators(seed)
    keys = key_rng.integers(0, 256, size=(record_count, layout.key_size), dtype=np.uint8)

    if layout.is_fixed:
        vlens = None
        total_bytes = record_count * layout.record_size
    else:
        if not 0 <= vlen_min <= vlen_max:
            raise ValueError(f"bornes vlength invalides: [{vlen_min}, {vlen_max}]")
        vlens = vlen_rng.integers(vlen_min, vlen_max + 1, size=record_count, dtype=np.int64)
        total_bytes = int(record_count * layout.header_size + vlens.sum())

    if capacity is not None and total_bytes > capacity:
        raise CapacityError(f"{total_bytes} octets dépassent la capacité du périphérique ({capacity})")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, 'wb') as f:
        for start in range(0, record_count, GEN_CHUNK_RECORDS):
            stop = min(start + GEN_CHUNK_RECORDS, record_count)
            if layout.is_fixed:
                chunk = np.empty((stop - start, layout.record_size), dtype=np.uint8)
                chunk[:, :layout.key_size] = keys[start:stop]
                chunk[:, layout.key_size:] = value_bytes(seed, start, stop - start, layout.value_size)
                f.write(chunk.tobytes())
            else:
                chunk_vlens = vlens[start:stop]
                width = int(chunk_vlens.max()) if len(chunk_vlens) else 0
                values = value_bytes(seed, start, stop - start, width)
                parts = []
                for i, vlen in enumerate(chunk_vlens.tolist()):
                    parts.append(keys[start + i].tobytes())
                    parts.append(_VLEN.pack(vlen))
                    parts.append(values[i, :vlen].tobytes())
                f.write(b''.join(parts))

    logger.info(f"Jeu de données généré: {out_path} ({record_count} enregistrements, {total_bytes} octets)")
    return DatasetMeta(layout, record_count, seed, total_bytes, out_path,
                       vlen_min if not layout.is_fixed else 0,
                       vlen_max if not layout.is_fixed else 0)


def fixed_records(path, layout: RecordLayout) -> np.ndarray:
    """Charge un fichier d'enregistrements fixes en tableau uint8 (N, K+V)."""
    data = np.fromfile(Path(path), dtype=np.uint8)
    size = layout.record_size
    if size == 0 or len(data) % size:
        raise RecordFormatError(f"{path}: {len(data)} octets, pas un multiple de {size}")
    return data.reshape(-1, size)


def klv_records(path, layout: RecordLayout) -> List[Tuple[bytes, bytes]]:
    """Découpe un fichier KLV en liste de (clé, enregistrement complet)."""
    data = Path(path).read_bytes()
    records = []
    cursor = 0
    head = layout.header_size
    while cursor < len(data):
        if cursor + head > len(data):
            raise RecordFormatError(f"{path}: enregistrement tronqué à l'octet {cursor}")
        (vlen,) = _VLEN.unpack_from(data, cursor + layout.key_size)
        end = cursor + head + vlen
        if end > len(data):
            raise RecordFormatError(f"{path}: vlength {vlen} dépasse la fin du fichier (octet {cursor})")
        records.append((data[cursor:cursor + layout.key_size], data[cursor:end]))
        cursor = end
    return records


def keys_as_strings(keys: np.ndarray) -> np.ndarray:
    """Vue 'S{K}' d'un tableau de clés uint8 (N, K), ordre lexicographique d'octets."""
    keys = np.ascontiguousarray(keys, dtype=np.uint8)
    if keys.shape[0] == 0:
        return np.zeros(0, dtype=f'S{max(keys.shape[1], 1)}')
    return keys.view(f'S{keys.shape[1]}').ravel()


def read_keys(path, layout: RecordLayout) -> np.ndarray:
    """Colonne des clés d'un jeu de données, en dtype 'S{K}'."""
    if layout.is_fixed:
        return keys_as_strings(fixed_records(path, layout)[:, :layout.key_size])
    records = klv_records(path, layout)
    return np.array([key for key, _ in records], dtype=f'S{layout.key_size}')


def inspect_dataset(path, layout: RecordLayout, seed: int = 0) -> DatasetMeta:
    """Reconstruit les métadonnées d'un fichier existant."""
    path = Path(path)
    total_bytes = path.stat().st_size
    if layout.is_fixed:
        if total_bytes % layout.record_size:
            raise RecordFormatError(f"{path}: taille {total_bytes} incohérente avec {layout.record_size}")
        return DatasetMeta(layout, total_bytes // layout.record_size, seed, total_bytes, path)
    records = klv_records(path, layout)
    vlens = [len(rec) - layout.header_size for _, rec in records]
    return DatasetMeta(layout, len(records), seed, total_bytes, path,
                       min(vlens, default=0), max(vlens, default=0))


def _record_hash(record: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(record, digest_size=16).digest(), 'little')


def multiset_digest(path, layout: RecordLayout) -> int:
    """
    Empreinte 128 bits indépendante de l'ordre des enregistrements
    (somme modulo 2^128 des hachages par enregistrement).
    """
    digest = 0
    if layout.is_fixed:
        data = Path(path).read_bytes()
        size = layout.record_size
        if size == 0 or len(data) % size:
            raise RecordFormatError(f"{path}: enregistrement final tronqué")
        view = memoryview(data)
        for start in range(0, len(data), size):
            digest += _record_hash(view[start:start + size])
    else:
        for _, record in klv_records(path, layout):
            digest += _record_hash(record)
    return digest & DIGEST_MASK


def validate(input_path, output_path, layout: RecordLayout) -> ValidationReport:
    """
    Vérifie qu'une sortie est triée et qu'elle est une permutation de l'entrée.

    Returns:
        Rapport de validation
    """
    if layout.is_fixed:
        size = layout.record_size
        for path in (input_path, output_path):
            if Path(path).stat().st_size % size:
                raise LayoutMismatchError(f"{path}: taille incompatible avec des enregistrements de {size} octets")

    keys = read_keys(output_path, layout)
    first_violation = None
    if len(keys) > 1:
        bad = np.flatnonzero(keys[1:] < keys[:-1])
        if len(bad):
            first_violation = int(bad[0])

    input_digest = multiset_digest(input_path, layout)
    output_digest = multiset_digest(output_path, layout)
    report = ValidationReport(
        is_sorted=first_violation is None,
        is_permutation=input_digest == output_digest,
        input_digest=input_digest,
        output_digest=output_digest,
        first_violation_index=first_violation,
        record_count=len(keys),
    )
    if report.ok:
        logger.info(f"Validation OK: {output_path} ({len(keys)} enregistrements)")
    else:
        logger.warning(f"Validation échouée: {output_path} (trié={report.is_sorted}, "
                       f"permutation={report.is_permutation}, violation={first_violation})")
    return report


def oracle_sort(input_path, output_path, layout: RecordLayout) -> None:
    """Tri de référence en mémoire: par clé puis par position d'origine."""
    if layout.is_fixed:
        records = fixed_records(input_path, layout)
        order = np.argsort(keys_as_strings(records[:, :layout.key_size]), kind='stable')
        Path(output_path).write_bytes(records[order].tobytes())
        return
    records = klv_records(input_path, layout)
    order = sorted(range(len(records)), key=lambda i: records[i][0])
    Path(output_path).write_bytes(b''.join(records[i][1] for i in order))
