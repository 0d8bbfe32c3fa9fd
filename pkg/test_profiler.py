"""
Tests du profilage et du dimensionnement des pools
"""

from pathlib import Path

import numpy as np
import pytest

from device import Pattern, RANDOM_READ, SEQ_READ, SEQ_WRITE, STRIDED_READ, ledger_snapshot
from profiler import (
    DEFAULT_SIZES, DEFAULT_THREADS, DeviceProfile, PoolPlan, ProfileError, format_profile, load_profile,
    parse_profile, plan_pools, pool_size, profile_device, save_profile,
)


def _synthetic_profile():
    read = {}
    for size in (64, 4096):
        for threads, value in ((1, 1.0e9), (4, 3.0e9), (8, 3.0e9), (16, 2.0e9)):
            read[(Pattern.SEQUENTIAL, size, threads)] = value
        for threads, value in ((1, 0.5e9), (4, 1.0e9), (8, 2.0e9), (16, 1.5e9)):
            read[(Pattern.RANDOM, size, threads)] = value * (2 if size == 4096 else 1)
    read[(Pattern.RANDOM, 64, 2)] = 2.0e9
    return DeviceProfile(read, {1: 1.0e9, 2: 1.8e9, 4: 1.7e9}, device='synthetic')


def test_pool_size_argmax_prefers_fewer_threads_on_ties():
    profile = _synthetic_profile()
    assert pool_size(profile, SEQ_READ, 4096) == 4
    assert pool_size(profile, SEQ_WRITE, 100) == 2
    # 64 octets: égalité entre 2 et 8 threads
    assert pool_size(profile, RANDOM_READ, 64) == 2
    assert pool_size(profile, STRIDED_READ, 10) == 2
    assert pool_size(profile, RANDOM_READ, 3000) == 8


def test_pool_size_is_scale_invariant():
    profile = _synthetic_profile()
    for kind, size in ((SEQ_READ, 64), (RANDOM_READ, 4096), (SEQ_WRITE, 100)):
        assert pool_size(profile.scaled(3.7), kind, size) == pool_size(profile, kind, size)


def _random_profile(rng):
    threads = rng.choice(DEFAULT_THREADS, size=int(rng.integers(1, len(DEFAULT_THREADS) + 1)), replace=False)
    sizes = rng.choice(DEFAULT_SIZES, size=int(rng.integers(1, len(DEFAULT_SIZES) + 1)), replace=False)
    # valeurs entières: égalités exactes fréquentes
    coarse = rng.random() < 0.5

    def bandwidth():
        return float(rng.integers(1, 6)) * 1e8 if coarse else float(rng.lognormal(21, 1))

    read = {(pattern, int(size), int(t)): bandwidth()
            for pattern in (Pattern.SEQUENTIAL, Pattern.RANDOM) for size in sizes for t in threads}
    write = {int(t): bandwidth() for t in threads}
    return DeviceProfile(read, write, device='random')


def test_pool_size_is_scale_invariant_on_random_profiles():
    rng = np.random.default_rng(8)
    for trial in range(1000):
        profile = _random_profile(rng)
        factor = float(10 ** rng.uniform(-3, 3))
        scaled = profile.scaled(factor)
        access = int(rng.integers(1, 8192))
        for kind in (SEQ_READ, RANDOM_READ, STRIDED_READ, SEQ_WRITE):
            assert pool_size(scaled, kind, access) == pool_size(profile, kind, access), f"profil {trial}"


def test_pool_size_tie_tolerance_is_relative():
    assert pool_size(DeviceProfile(write_curve={1: 1.0e9, 4: 1.0e9 * (1 + 1e-12)}), SEQ_WRITE, 64) == 1
    assert pool_size(DeviceProfile(write_curve={1: 1.0e9, 4: 1.001e9}), SEQ_WRITE, 64) == 4
    assert pool_size(DeviceProfile(write_curve={1: 1.0e-3, 4: 1.001e-3}), SEQ_WRITE, 64) == 4


def test_pool_size_missing_curve():
    profile = DeviceProfile({(Pattern.SEQUENTIAL, 64, 1): 1.0}, {1: 1.0})
    with pytest.raises(ProfileError):
        pool_size(profile, RANDOM_READ, 64)
    with pytest.raises(ProfileError):
        pool_size(DeviceProfile(), SEQ_WRITE, 64)


def test_plan_pools_defaults_and_cap(monkeypatch):
    plan = plan_pools(None, 100)
    assert (plan.read_pool, plan.random_read_pool, plan.write_pool) == (8, 8, 2)
    assert plan_pools(None, 100, cap=1) == PoolPlan(1, 1, 1, 1)
    monkeypatch.setenv('BRAIDSORT_THREADS', '4')
    capped = plan_pools(_synthetic_profile(), 100)
    assert capped.read_pool == 2 and capped.random_read_pool == 2 and capped.write_pool == 2
    assert capped.sort_pool <= 4


def test_pool_plan_rejects_empty_pools():
    with pytest.raises(ValueError):
        PoolPlan(0, 1, 1, 1)
    assert PoolPlan.single_thread() == PoolPlan(1, 1, 1, 1)


def test_profile_file_roundtrip(tmp_path):
    profile = _synthetic_profile()
    save_profile(profile, tmp_path / 'synthetic.profile')
    loaded = load_profile(tmp_path / 'synthetic.profile')
    assert loaded.read_curve == profile.read_curve
    assert loaded.write_curve == profile.write_curve
    assert loaded.device == 'synthetic'
    assert format_profile(loaded) == format_profile(profile)


def test_parse_profile_errors(tmp_path):
    with pytest.raises(ProfileError):
        parse_profile('read.sequential.64.1=1e9\n')
    with pytest.raises(ProfileError):
        parse_profile('write.1=1e9\n')
    with pytest.raises(ProfileError):
        parse_profile('write.1=0\nread.random.64.1=1\n')
    with pytest.raises(ProfileError):
        parse_profile('write.1=1\nread.diagonal.64.1=1\n')
    with pytest.raises(ProfileError):
        parse_profile('write.1=1\nbogus\n')
    with pytest.raises(ProfileError):
        load_profile(tmp_path / 'absent.profile')


def test_fixture_profile_loads():
    profile = load_profile(Path(__file__).parent / 'fixtures' / 'profile_sample.txt')
    assert profile.device == 'braid'
    assert pool_size(profile, SEQ_WRITE, 100) == 4
    assert pool_size(profile, STRIDED_READ, 10) == 16


def test_profile_emulated_device(device):
    profile = profile_device(device, sizes=(64,), threads=(1, 2))
    assert set(profile.read_curve) == {
        (Pattern.SEQUENTIAL, 64, 1), (Pattern.SEQUENTIAL, 64, 2),
        (Pattern.RANDOM, 64, 1), (Pattern.RANDOM, 64, 2),
    }
    assert set(profile.write_curve) == {1, 2}
    # une ligne de 64 octets toutes les 100 ns
    assert profile.read_curve[(Pattern.SEQUENTIAL, 64, 1)] == pytest.approx(6.4e8)
    assert profile.read_curve[(Pattern.SEQUENTIAL, 64, 2)] == pytest.approx(1.28e9)
    assert device.used_bytes == 0
    assert ledger_snapshot(device).total_bytes(phase='PROFILE') > 0


def test_profile_emulated_device_is_deterministic(make_device):
    first = profile_device(make_device('bd'), sizes=(64, 256), threads=(1, 4))
    second = profile_device(make_device('bd'), sizes=(64, 256), threads=(1, 4))
    assert first.read_curve == second.read_curve
    assert first.write_curve == second.write_curve
    assert first.read_curve[(Pattern.RANDOM, 64, 1)] < first.read_curve[(Pattern.SEQUENTIAL, 64, 1)]


def test_profile_rejects_small_device(make_device):
    with pytest.raises(ProfileError):
        profile_device(make_device('brd', capacity_bytes=1024), sizes=(64,), threads=(1,))
    with pytest.raises(ProfileError):
        profile_device(make_device('brd'), sizes=(), threads=(1,))
