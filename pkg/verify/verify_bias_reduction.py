#!/usr/bin/env python3
import os
import statistics
from pathlib import Path

from dotenv import load_dotenv

from artifacts import read_csv
from experiment import load_config, seed_sweep
from reclosses import LossKind

load_dotenv()

ROOT = Path(__file__).resolve().parent.parent
SEEDS = [0, 1, 2, 3, 4]
out = Path(os.getenv("FAIRTRANS_OUT", "fairtrans-out")) / "verify-bias-reduction"

config = load_config(ROOT / "configs" / "imbalanced.ini")
config = config.model_copy(update={"losses": (LossKind.ARCFACE,)})
rows = seed_sweep(config, SEEDS, out)

median = next(r for r in rows if r[0] == "median" and r[1] == "arcface")
d_african, d_asian, d_caucasian, d_indian, d_avg, d_stdv = (
    float(v) for v in median[2:]
)
print(
    f"✅ Median ΔSTDV over {len(SEEDS)} seeds (ArcFace): "
    f"{d_stdv:+.2f}, ΔAVG {d_avg:+.2f}"
)
assert d_stdv < 0

minorities = (("African", d_african), ("Asian", d_asian), ("Indian", d_indian))
improved = [name for name, d in minorities if d > 0]
print(f"✅ Minority groups improved in the median: {', '.join(improved) or 'none'}")
assert len(improved) >= 2


def overall_transfer(seed):
    rows = read_csv(out / f"seed_{seed}" / "treated" / "reports" / "transfer.csv")
    return float(next(r["success_rate"] for r in rows if r["mapping"] == "overall"))


overall = [overall_transfer(s) for s in SEEDS]
print(f"✅ Transfer success: median {statistics.median(overall):.2f}% (chance 25%)")
assert min(overall) > 25.0
