#!/usr/bin/env python3
"""
Interface en ligne de commande
gen, sort, validate, profile et bench
"""

import argparse
import filecmp
import logging
import sys
import tempfile
import traceback
from pathlib import Path
from typing import List, Optional

import config
from baselines import Algorithm
from bench import SUITES, BenchConfig, BenchError, run_suite, sort_dataset, summarize, write_suite_csv
from device import DeviceError, open_device, resolve_spec
from profiler import ProfileError, load_profile, profile_device, save_profile, format_profile
from recfmt import CapacityError, RecordFormatError, RecordLayout, gen_dataset, inspect_dataset, oracle_sort, validate
from report import write_artifacts
from scheduler import ConcurrencyMode
from wiscsort import SortError, SortMode

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_ERROR = 2

ALGORITHMS = ['wiscsort'] + [a.value for a in Algorithm]


def _size(text: str) -> int:
    try:
        return config.parse_size(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _add_layout_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--key-size', type=int, default=10, help='taille de clé K (octets)')
    parser.add_argument('--value-size', type=int, default=90, help='taille de valeur V (enregistrements fixes)')
    parser.add_argument('--klv', action='store_true', help='enregistrements clé-longueur-valeur')


def _layout(args) -> RecordLayout:
    if args.klv:
        return RecordLayout.klv(args.key_size)
    return RecordLayout.fixed(args.key_size, args.value_size)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='braidsort', description='Tri de données sur stockage adressable à l\'octet')
    parser.add_argument('--log-level', default=None, help='niveau de log (défaut: BRAIDSORT_LOG_LEVEL)')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='générer un jeu de données')
    gen.add_argument('--out', required=True, help='fichier de sortie')
    gen.add_argument('--records', type=int, required=True)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--vlen-min', type=int, default=0)
    gen.add_argument('--vlen-max', type=int, default=0)
    _add_layout_args(gen)

    sort = sub.add_parser('sort', help='trier un jeu de données')
    sort.add_argument('input')
    sort.add_argument('--out', help='fichier trié (défaut: <input>.sorted)')
    sort.add_argument('--algo', choices=ALGORITHMS, default='wiscsort')
    sort.add_argument('--mode', choices=[m.value for m in SortMode], default='auto')
    sort.add_argument('--concurrency', choices=[c.value for c in ConcurrencyMode], default='no-overlap')
    sort.add_argument('--single-thread', action='store_true')
    sort.add_argument('--index-budget', type=_size, default=config.DEFAULT_INDEX_BUDGET)
    sort.add_argument('--read-buf', type=_size, default=config.DEFAULT_READ_BUF)
    sort.add_argument('--write-buf', type=_size, default=config.DEFAULT_WRITE_BUF)
    sort.add_argument('--device', help='preset (bd, brd, bard, braid, real) ou fichier de spécification')
    sort.add_argument('--profile', help='profil de périphérique (dimensionnement des pools)')
    sort.add_argument('--report', help='CSV du rapport de phases (ledger et trace à côté)')
    sort.add_argument('--verify', action='store_true', help='valider la sortie (code 1 si invalide)')
    _add_layout_args(sort)

    check = sub.add_parser('validate', help='vérifier une sortie triée')
    check.add_argument('input')
    check.add_argument('output')
    check.add_argument('--oracle', action='store_true', help='comparer aussi au tri de référence')
    _add_layout_args(check)

    prof = sub.add_parser('profile', help='mesurer les courbes de débit du périphérique')
    prof.add_argument('--device', help='preset ou fichier de spécification')
    prof.add_argument('--out', help='fichier de profil')
    prof.add_argument('--duration', type=float, default=0.05)

    bench = sub.add_parser('bench', help='exécuter une suite de benchmarks')
    bench.add_argument('suite', choices=SUITES)
    bench.add_argument('--records', type=int, default=400_000)
    bench.add_argument('--key-size', type=int, default=10)
    bench.add_argument('--value-size', type=int, default=90)
    bench.add_argument('--seed', type=int, default=42)
    bench.add_argument('--runs', type=int, default=4, help='nombre de runs visé pour les tris à fusion')
    bench.add_argument('--read-buf', type=_size, default=config.DEFAULT_READ_BUF)
    bench.add_argument('--write-buf', type=_size, default=config.DEFAULT_WRITE_BUF)
    bench.add_argument('--device', help='preset ou fichier de spécification')
    bench.add_argument('--profile', help='profil de périphérique')
    bench.add_argument('--background-writers', type=int, default=2)
    bench.add_argument('--background-readers', type=int, default=0)
    bench.add_argument('--out', required=True, help='CSV de sortie')
    return parser


def cmd_gen(args) -> int:
    layout = _layout(args)
    meta = gen_dataset(layout, args.records, args.seed, args.out, args.vlen_min, args.vlen_max)
    print(f"{meta.path}: {meta.record_count} enregistrements, {meta.total_bytes} octets")
    return EXIT_OK


def cmd_sort(args) -> int:
    layout = _layout(args)
    input_path = Path(args.input).resolve()
    output_path = Path(args.out).resolve() if args.out else input_path.with_name(input_path.name + '.sorted')
    if args.algo != 'wiscsort' and args.mode != 'auto':
        raise SortError(f"--mode {args.mode} ne s'applique qu'à wiscsort (--algo {args.algo})")
    meta = inspect_dataset(input_path, layout)
    profile = load_profile(args.profile) if args.profile else None
    spec = resolve_spec(args.device)

    with open_device(spec, input_path) as device:
        result = sort_dataset(device, meta, output_path, args.algo, SortMode(args.mode),
                              ConcurrencyMode(args.concurrency), args.index_budget, args.read_buf,
                              args.write_buf, profile=profile, single_thread=args.single_thread)
        ledger, _ = device.snapshot()
        if args.report:
            write_artifacts(args.report, device, result.clock)

    mode = f" ({result.plan.mode.value})" if result.plan is not None else ''
    print(f"{result.algorithm}{mode}: {meta.record_count} enregistrements -> {output_path}")
    print(f"  trafic: {ledger.total_bytes()} octets, délai injecté: {ledger.total_delay_ns():.0f} ns")

    if args.verify:
        report = validate(input_path, output_path, layout)
        print(f"  trié: {report.is_sorted}, permutation: {report.is_permutation}")
        if not report.ok:
            return EXIT_INVALID
    return EXIT_OK


def cmd_validate(args) -> int:
    layout = _layout(args)
    report = validate(args.input, args.output, layout)
    print(f"trié: {report.is_sorted}, permutation: {report.is_permutation}, "
          f"enregistrements: {report.record_count}")
    if report.first_violation_index is not None:
        print(f"  première inversion à l'indice {report.first_violation_index}")
    if not report.ok:
        return EXIT_INVALID
    if args.oracle:
        with tempfile.TemporaryDirectory() as tmp:
            expected = Path(tmp) / 'oracle.dat'
            oracle_sort(args.input, expected, layout)
            if not filecmp.cmp(expected, args.output, shallow=False):
                print("  sortie différente du tri de référence")
                return EXIT_INVALID
        print("  identique au tri de référence")
    return EXIT_OK


def cmd_profile(args) -> int:
    spec = resolve_spec(args.device)
    with open_device(spec) as device:
        profile = profile_device(device, duration=args.duration)
    if args.out:
        save_profile(profile, args.out)
    else:
        print(format_profile(profile), end='')
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = BenchConfig(
        records=args.records, key_size=args.key_size, value_size=args.value_size, seed=args.seed,
        device=args.device, runs=args.runs, read_buffer=args.read_buf, write_buffer=args.write_buf,
        profile=load_profile(args.profile) if args.profile else None,
        background_readers=args.background_readers, background_writers=args.background_writers,
    )
    frame = run_suite(args.suite, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_suite_csv(frame, args.out)
    print(summarize(frame).to_string(index=False))
    return EXIT_OK


COMMANDS = {
    'gen': cmd_gen,
    'sort': cmd_sort,
    'validate': cmd_validate,
    'profile': cmd_profile,
    'bench': cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config.setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (SortError, DeviceError, ProfileError, RecordFormatError, CapacityError, BenchError,
            ValueError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        logger.debug(traceback.format_exc())
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
