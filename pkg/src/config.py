#!/usr/bin/env python3
"""
Configuration commune de braidsort
Variables d'environnement (.env) et mise en place du logging
"""

import os
import re
import logging
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Chargement des variables d'environnement
load_dotenv()

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB

_SIZE_UNITS = {
    '': 1,
    'b': 1,
    'k': 1000, 'kb': 1000, 'kib': KIB,
    'm': 1000 ** 2, 'mb': 1000 ** 2, 'mib': MIB,
    'g': 1000 ** 3, 'gb': 1000 ** 3, 'gib': GIB,
}


def parse_size(text) -> int:
    """
    Convertit une taille lisible ("64MiB", "4k", "1000") en octets.

    Args:
        text: Taille (entier ou chaîne avec suffixe optionnel)

    Returns:
        Nombre d'octets
    """
    if isinstance(text, int):
        return text
    match = re.fullmatch(r'\s*(\d+)\s*([a-zA-Z]*)\s*', str(text))
    if not match:
        raise ValueError(f"Taille invalide: {text!r}")
    unit = match.group(2).lower()
    if unit not in _SIZE_UNITS:
        raise ValueError(f"Unité de taille inconnue: {match.group(2)!r}")
    return int(match.group(1)) * _SIZE_UNITS[unit]


# Configuration
LOG_LEVEL = os.getenv('BRAIDSORT_LOG_LEVEL', 'INFO')
LOG_FILE = os.getenv('BRAIDSORT_LOG_FILE', 'braidsort.log')
DEFAULT_READ_BUF = parse_size(os.getenv('BRAIDSORT_READ_BUF', '64MiB'))
DEFAULT_WRITE_BUF = parse_size(os.getenv('BRAIDSORT_WRITE_BUF', '64MiB'))
DEFAULT_INDEX_BUDGET = parse_size(os.getenv('BRAIDSORT_INDEX_BUDGET', '256MiB'))
INJECT_DELAY = os.getenv('BRAIDSORT_INJECT_DELAY', 'false').lower() == 'true'
SCRATCH_DIR = os.getenv('BRAIDSORT_SCRATCH_DIR') or None

# Tailles de pools par défaut (sans profil de périphérique)
DEFAULT_READ_POOL = 8
DEFAULT_RANDOM_READ_POOL = 8
DEFAULT_WRITE_POOL = 2


def thread_cap() -> Optional[int]:
    """Plafond global des pools (BRAIDSORT_THREADS), relu à chaque appel."""
    value = os.getenv('BRAIDSORT_THREADS', '').strip()
    if not value:
        return None
    cap = int(value)
    if cap < 1:
        raise ValueError(f"BRAIDSORT_THREADS doit être >= 1 (reçu {cap})")
    return cap


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure le logging (fichier + console) pour les points d'entrée."""
    handlers = [logging.StreamHandler()]
    log_file = LOG_FILE if log_file is None else log_file
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
