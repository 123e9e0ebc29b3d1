"""Run the desk-scale fixture end to end and print the headline numbers.

    python scripts/run_fixture.py [OUT_DIR] [SEED]
"""
import json
import sys
import time
from pathlib import Path

from leaklab.harness.config import fixture_config
from leaklab.harness.pipeline import run_pipeline


def main(argv):
    out = Path(argv[1]) if len(argv) > 1 else Path("runs/fixture")
    seed = int(argv[2]) if len(argv) > 2 else 42
    cfg = fixture_config(str(out), seed=seed)
    t0 = time.perf_counter()
    run_pipeline(cfg)
    summary = json.loads((out / "run_summary.json").read_text())
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"wall time {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main(sys.argv)
