#!/usr/bin/env python3
import tempfile
from pathlib import Path

from experiment import load_config, run_experiment

ROOT = Path(__file__).resolve().parent.parent
config = load_config(ROOT / "configs" / "smoke.ini")

with tempfile.TemporaryDirectory() as tmp:
    first, second = Path(tmp) / "first", Path(tmp) / "second"
    run_experiment(config, out=first)
    run_experiment(config, out=second)

    csvs = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
    different = [
        str(p) for p in csvs if (first / p).read_bytes() != (second / p).read_bytes()
    ]
    print(f"✅ Compared {len(csvs)} CSV files across two runs")
    assert csvs and not different, different

    manifest_a = (first / "manifest.json").read_text()
    print("✅ Manifest written after the last phase")
    assert '"eval"' in manifest_a
