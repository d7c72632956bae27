"""Run the full pipeline on the default synthetic dataset and print the summary.

    python scripts/run_pipeline.py --out artifacts [--config cfg.json]
"""

import argparse
import json
import time

from cafe.config import load_config
from cafe.pipeline import run_pipeline


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="artifacts")
    parser.add_argument("--config")
    args = parser.parse_args()
    cfg = load_config(args.config, {"out": args.out})
    start = time.perf_counter()
    root = run_pipeline(cfg)
    summary = json.loads((root / "provenance.json").read_text())["summary"]
    print(json.dumps(summary, indent=2))
    print(f"finished in {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
