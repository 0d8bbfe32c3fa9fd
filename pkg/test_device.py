"""
Tests du périphérique émulé: délais, ledger, trace et gestion des fichiers
"""

import threading
import time

import numpy as np
import pytest

import config
import device as device_mod
from device import (
    RANDOM_READ, SEQ_READ, SEQ_WRITE, STRIDED_READ, AccessKind, Backing, Device, DeviceError,
    DeviceFullError, DeviceSpec, DeviceSpecError, Direction, OutOfRangeError, Pattern, PhaseTrace,
    ReadOnlyError, TraceWindow, TrafficLedger, format_spec, ledger_snapshot, lines_spanned,
    load_spec, open_device, parse_spec, preset, resolve_spec, save_spec,
)


def test_strided_writes_are_rejected():
    with pytest.raises(DeviceError):
        AccessKind(Direction.WRITE, Pattern.STRIDED)


def test_presets():
    bd = preset('bd')
    assert bd.rand_read_extra_ns == 500 and bd.interference_read_slowdown == 1.0
    braid = preset('BRAID')
    assert braid.write_extra_ns == 1500 and braid.interferes
    assert not preset('brd').interferes
    with pytest.raises(DeviceSpecError):
        preset('optane')


def test_line_delay_ps():
    spec = preset('braid')
    assert spec.line_delay_ps(Direction.READ, Pattern.SEQUENTIAL, 1) == 100_000
    assert spec.line_delay_ps(Direction.READ, Pattern.RANDOM, 1, writers=1) == 200_000
    assert spec.line_delay_ps(Direction.READ, Pattern.RANDOM, 17) == 200_000
    assert spec.line_delay_ps(Direction.WRITE, Pattern.SEQUENTIAL, 2) == 1_600_000
    assert spec.line_delay_ps(Direction.WRITE, Pattern.SEQUENTIAL, 6) == 3_200_000
    assert preset('bd').line_delay_ps(Direction.READ, Pattern.STRIDED, 1) == 600_000
    assert DeviceSpec(backing=Backing.REAL_FILE).line_delay_ps(Direction.READ, Pattern.RANDOM, 1) == 0


def test_interference_table_overrides_multiplier():
    spec = DeviceSpec(interference_table={1: 1.5, 4: 3.0})
    assert spec.interference_factor(0) == 1.0
    assert spec.interference_factor(2) == 1.5
    assert spec.interference_factor(8) == 3.0


def test_lines_spanned():
    assert lines_spanned([0], [64], 64) == 1
    assert lines_spanned([63], [2], 64) == 2
    assert lines_spanned([0, 100], [0, 10], 64) == 1
    assert lines_spanned([], [], 64) == 0
    assert lines_spanned(np.arange(10) * 100, 10, 64) == 11


def test_spec_file_roundtrip(tmp_path):
    spec = preset('braid', interference_table={2: 2.5})
    save_spec(spec, tmp_path / 'braid.spec')
    loaded = load_spec(tmp_path / 'braid.spec')
    assert loaded == spec
    assert format_spec(loaded) == format_spec(spec)


def test_spec_parse_errors(tmp_path):
    with pytest.raises(DeviceSpecError):
        parse_spec('write_extra_ns=-5\n')
    with pytest.raises(DeviceSpecError):
        parse_spec('flux_capacitor=1\n')
    with pytest.raises(DeviceSpecError):
        parse_spec('read_scaling.4=abc\n')
    with pytest.raises(DeviceSpecError):
        load_spec(tmp_path / 'absent.spec')
    spec = parse_spec('# commentaire\nbacking=real\ncapacity_bytes=1GiB\n')
    assert spec.backing is Backing.REAL_FILE
    assert spec.capacity_bytes == config.GIB


def test_resolve_spec(monkeypatch):
    assert resolve_spec(None).name == 'braid'
    assert resolve_spec('bard').write_extra_ns == 500
    assert not resolve_spec('real').emulated
    monkeypatch.setattr(config, 'INJECT_DELAY', True)
    assert resolve_spec('brd').inject_delay
    assert not resolve_spec('real').inject_delay


def test_read_write_accounting(make_device):
    dev = make_device('braid')
    handle = dev.create_file('data.bin', 4096)
    handle.write(0, b'\x01' * 128, SEQ_WRITE, 'W')
    assert handle.read(64, 64, SEQ_READ, 'R') == b'\x01' * 64
    ledger = ledger_snapshot(dev)
    assert ledger.total_bytes(direction=Direction.WRITE) == 128
    assert ledger.total_lines(phase='W') == 2
    assert ledger.total_delay_ps(phase='W') == 2 * 1_600_000
    assert ledger.total_ops(phase='R') == 1
    assert ledger.total_delay_ns(phase='R') == 100.0
    assert ledger.interference_lines() == 0


def test_read_records_strided(device, fixed_layout):
    handle = device.create_file('records.bin', 100 * 1000)
    handle.buffer[:] = bytes(range(100)) * 1000
    keys = device.read_records(handle, 0, 100, np.arange(1000), 10, STRIDED_READ, 'RUN read')
    assert keys.shape == (1000, 10)
    assert bytes(keys[5]) == bytes(range(10))
    values = device.read_records(handle, 0, 100, [3, 1], 90, RANDOM_READ, 'RECORD read', column=10)
    assert bytes(values[0]) == bytes(range(10, 100))
    ledger = ledger_snapshot(device)
    assert ledger.total_bytes(pattern=Pattern.STRIDED) == 10_000
    assert ledger.total_ops(pattern=Pattern.STRIDED) == 1000
    assert ledger.total_bytes(pattern=Pattern.RANDOM) == 180
    with pytest.raises(OutOfRangeError):
        device.read_records(handle, 0, 100, [1000], 10, STRIDED_READ, 'RUN read')
    with pytest.raises(OutOfRangeError):
        device.read_records(handle, 0, 100, [0], 20, RANDOM_READ, 'X', column=90)


def test_read_spans_and_write_records(device):
    handle = device.create_file('spans.bin', 256)
    device.write_records(handle, 0, 8, [2, 0], np.frombuffer(b'BBBBBBBBAAAAAAAA', dtype=np.uint8).reshape(2, 8),
                         SEQ_WRITE, 'W')
    assert device.read_spans(handle, [16, 0, 5], [8, 4, 0], RANDOM_READ, 'R') == [b'B' * 8, b'AAAA', b'']
    assert device.read_spans(handle, [], [], RANDOM_READ, 'R') == []
    ledger = ledger_snapshot(device)
    assert ledger.total_ops(phase='R') == 3
    assert ledger.total_bytes(phase='R') == 12


def test_range_and_readonly_errors(device):
    handle = device.create_file('small.bin', 100)
    with pytest.raises(OutOfRangeError):
        handle.read(90, 20, SEQ_READ, 'R')
    with pytest.raises(DeviceError):
        handle.read(0, 10, SEQ_WRITE, 'R')
    device.close_file(handle)
    ro = device.open_file('small.bin', readonly=True)
    with pytest.raises(ReadOnlyError):
        ro.write(0, b'x', SEQ_WRITE, 'W')
    with pytest.raises(DeviceError):
        device.open_file('missing.bin')


def test_capacity_is_enforced(make_device):
    dev = make_device('brd', capacity_bytes=1000)
    first = dev.create_file('a.bin', 600)
    with pytest.raises(DeviceFullError):
        dev.create_file('b.bin', 500)
    dev.remove_file(first)
    dev.create_file('b.bin', 500)
    assert dev.used_bytes == 500


def test_empty_file_and_zero_length_access(device):
    handle = device.create_file('empty.bin', 0)
    assert handle.read(0, 0, SEQ_READ, 'R') == b''
    handle.write(0, b'', SEQ_WRITE, 'W')
    assert ledger_snapshot(device).is_zero()


def test_declared_workers_drive_scaling(device):
    handle = device.create_file('d.bin', 64)
    with device.declare_workers(Direction.READ, 20):
        handle.read(0, 64, SEQ_READ, 'many')
    handle.read(0, 64, SEQ_READ, 'one')
    ledger = ledger_snapshot(device)
    assert ledger.total_delay_ps(phase='many') == 200_000
    assert ledger.total_delay_ps(phase='one') == 100_000


def test_read_during_write_counts_interference(make_device):
    dev = make_device('braid', inject_delay=True)
    target = dev.create_file('w.bin', config.MIB)
    source = dev.create_file('r.bin', 4096)
    writer = threading.Thread(target=lambda: target.write(0, bytes(config.MIB), SEQ_WRITE, 'W'))
    writer.start()
    deadline = time.perf_counter() + 5
    while dev.inflight(Direction.WRITE) == 0 and writer.is_alive() and time.perf_counter() < deadline:
        time.sleep(0)
    source.read(0, 4096, RANDOM_READ, 'R')
    writer.join()
    ledger, trace = dev.snapshot()
    assert ledger.interference_lines() == 64
    assert ledger.total_delay_ps(phase='R') == 64 * 200_000
    assert trace.overlapping_pairs() >= 1


def test_read_during_write_without_slowdown_is_not_interference(make_device):
    dev = make_device('brd', inject_delay=True)
    target = dev.create_file('w.bin', 8 * config.MIB)
    source = dev.create_file('r.bin', 4096)
    writer = threading.Thread(target=lambda: target.write(0, bytes(8 * config.MIB), SEQ_WRITE, 'W'))
    writer.start()
    deadline = time.perf_counter() + 5
    while dev.inflight(Direction.WRITE) == 0 and writer.is_alive() and time.perf_counter() < deadline:
        time.sleep(0)
    source.read(0, 4096, RANDOM_READ, 'R')
    writer.join()
    ledger = ledger_snapshot(dev)
    assert ledger.interference_lines() == 0
    assert ledger.total_delay_ps(phase='R') == 64 * 100_000


def test_delay_injection_waits(make_device):
    dev = make_device('braid', inject_delay=True)
    handle = dev.create_file('slow.bin', 64 * 1000)
    started = time.perf_counter()
    handle.write(0, bytes(64 * 1000), SEQ_WRITE, 'W')
    assert time.perf_counter() - started >= 1000 * 1.6e-6


def test_delay_meter_is_per_thread(device):
    handle = device.create_file('m.bin', 128)
    with device.delay_meter() as meter:
        handle.read(0, 128, SEQ_READ, 'R')
    handle.read(0, 64, SEQ_READ, 'R')
    assert meter.delay_ns == 200.0
    assert meter.bytes == 128


def test_overlapping_pairs():
    windows = [
        TraceWindow(0, 10, Direction.READ, 'a', 't1'),
        TraceWindow(20, 30, Direction.READ, 'a', 't1'),
        TraceWindow(5, 25, Direction.WRITE, 'b', 't2'),
        TraceWindow(30, 40, Direction.WRITE, 'b', 't2'),
    ]
    assert PhaseTrace(windows).overlapping_pairs() == 2
    assert PhaseTrace(windows[:2]).overlapping_pairs() == 0
    assert list(PhaseTrace(windows).to_frame().columns) == device_mod.TRACE_COLUMNS


def test_ledger_frame_and_reset(device, tmp_path):
    handle = device.create_file('f.bin', 64)
    handle.write(0, b'x' * 64, SEQ_WRITE, 'W')
    ledger = ledger_snapshot(device)
    frame = ledger.to_frame()
    assert list(frame.columns) == device_mod.LEDGER_COLUMNS
    assert frame.loc[0, 'injected_delay_ns'] == 100.0
    ledger.to_csv(tmp_path / 'ledger.csv')
    assert (tmp_path / 'ledger.csv').read_text().startswith('phase,direction')
    device.reset_accounting()
    assert device.snapshot()[0].cells == {}
    assert isinstance(TrafficLedger().copy(), TrafficLedger)


def test_open_device_on_file_uses_parent(tmp_path):
    data = tmp_path / 'input.dat'
    data.write_bytes(b'abc')
    with open_device(preset('brd'), data) as dev:
        assert dev.root == tmp_path
        assert dev.open_file('input.dat').read(0, 3, SEQ_READ, 'R') == b'abc'
    assert data.exists()


def test_owned_root_is_removed():
    dev = Device(preset('brd'))
    root = dev.root
    dev.create_file('x.bin', 10)
    dev.close()
    assert not root.exists()
