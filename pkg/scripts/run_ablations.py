"""Emit every ablation table under <out>/ablations and print Mean per row.

Results are cached in <out>/ablations/cache.json, so an interrupted sweep resumes.

    python scripts/run_ablations.py --out artifacts [--axis features --axis lambda]
"""

import argparse
import time

from cafe.config import load_config
from cafe.pipeline import AXES, ablate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="artifacts")
    parser.add_argument("--config")
    parser.add_argument("--axis", action="append", choices=AXES)
    args = parser.parse_args()
    cfg = load_config(args.config, {"out": args.out})
    start = time.perf_counter()
    tables = ablate(cfg, tuple(args.axis or AXES))
    for axis, rows in tables.items():
        best = max(r["Mean"] for r in rows)
        print(f"{axis}:")
        for r in rows:
            mark = " *" if r["Mean"] == best else ""
            print(f"  {r['setting']:<32} Mean {r['Mean']:.4f}  boundary mR@100 {r['boundary_mR@100']:.4f}{mark}")
    print(f"finished in {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
