#!/usr/bin/env python3
"""Pre-run the cached comparative runs used by the acceptance suite."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from acceptance_runs import COMPARATIVE_SEEDS, ensure_run

for variant in ("contrastive", "reconstruction"):
    for seed in COMPARATIVE_SEEDS:
        run_dir = ensure_run(variant, seed)
        print(f"{variant} seed {seed}: {run_dir}", flush=True)
