#!/usr/bin/env python3
"""Run the acceptance suite and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py               # all ten criteria
    python3 scripts/run_acceptance.py --fast        # skip the three trained-model criteria
    python3 scripts/run_acceptance.py --keep runs/accept

``--keep DIR`` stores the trained desk models so a second invocation reuses them.
"""
import argparse
import os
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--fast", action="store_true")
    ap.add_argument("--keep", help="directory for the trained-model runs")
    a = ap.parse_args()
    env = dict(os.environ)
    if a.keep:
        env["CHOPLAB_ACCEPT_DIR"] = str(Path(a.keep).resolve())
    cmd = [sys.executable, "-m", "pytest", str(ROOT / "tests" / "test_acceptance.py"), "-v", "-rN"]
    if a.fast:
        cmd += ["-m", "not slow"]
    sys.exit(subprocess.call(cmd, env=env, cwd=ROOT))


if __name__ == "__main__":
    main()
