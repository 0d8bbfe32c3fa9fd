"""
Fixtures partagées des tests
"""

import sys
from pathlib import Path

import pytest

# Ajouter le dossier src au path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

import config  # noqa: E402
from device import Device, preset  # noqa: E402
from profiler import PoolPlan  # noqa: E402
from recfmt import RecordLayout, gen_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    monkeypatch.delenv('BRAIDSORT_THREADS', raising=False)
    monkeypatch.setattr(config, 'LOG_FILE', '')


@pytest.fixture
def fixed_layout():
    return RecordLayout.fixed(10, 90)


@pytest.fixture
def pools():
    return PoolPlan(read_pool=4, random_read_pool=4, write_pool=2, sort_pool=2)


@pytest.fixture
def make_device(tmp_path):
    """Fabrique de périphériques émulés sous tmp_path, fermés en fin de test."""
    devices = []

    def factory(name='brd', **overrides):
        device = Device(preset(name, **overrides), tmp_path / f"dev-{len(devices)}")
        devices.append(device)
        return device

    yield factory
    for device in devices:
        device.close()


@pytest.fixture
def device(make_device):
    return make_device('brd')


@pytest.fixture
def make_dataset():
    """Génère un jeu de données à la racine d'un périphérique."""

    def factory(device, layout, records, seed=7, vlen_min=0, vlen_max=0, name='input.dat'):
        return gen_dataset(layout, records, seed, device.root / name, vlen_min, vlen_max)

    return factory
