#!/usr/bin/env python3
"""
Script de test local du tri
Génère un petit jeu de données, le trie sur le preset braid puis valide la sortie
"""

import os
import sys
import tempfile
from pathlib import Path

# Ajouter le dossier src au path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

# Configuration pour le mode test
os.environ.setdefault('BRAIDSORT_LOG_FILE', '')
os.environ.setdefault('BRAIDSORT_INDEX_BUDGET', '256KiB')  # force plusieurs runs au-delà de ~14 000 enregistrements
RECORDS = int(os.getenv('RUN_LOCAL_RECORDS', '20000'))

print("=" * 60)
print("Mode TEST - Tri WiscSort sur périphérique émulé")
print("=" * 60)
print(f"Enregistrements: {RECORDS}")
print(f"BRAIDSORT_INDEX_BUDGET: {os.getenv('BRAIDSORT_INDEX_BUDGET')}")
print(f"BRAIDSORT_INJECT_DELAY: {os.getenv('BRAIDSORT_INJECT_DELAY', 'false')}")
print("=" * 60)
print()

from cli import EXIT_OK, main

with tempfile.TemporaryDirectory(prefix='braidsort-local-') as tmp:
    data = Path(tmp) / 'input.dat'
    report = Path(tmp) / 'report.csv'
    steps = [
        ['gen', '--out', str(data), '--records', str(RECORDS), '--seed', '1'],
        ['sort', str(data), '--device', 'braid', '--verify', '--report', str(report)],
        ['validate', str(data), str(data) + '.sorted', '--oracle'],
    ]
    for step in steps:
        print(f"$ braidsort {' '.join(step[:2])}")
        code = main(step)
        if code != EXIT_OK:
            print()
            print("=" * 60)
            print(f"❌ Échec de l'étape {step[0]} (code {code})")
            print("=" * 60)
            sys.exit(code)
    print()
    print(report.read_text())

print("=" * 60)
print("✅ Tri terminé avec succès!")
print(f"   {RECORDS} enregistrements triés et validés")
print("=" * 60)
