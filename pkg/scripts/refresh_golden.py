#!/usr/bin/env python3
"""Re-run the checked-in golden experiment and rewrite its expected output hashes.

Only needed after an intentional change to a file format or to training. The
golden test compares against these hashes byte for byte.
"""

import argparse
import json
import tempfile
from pathlib import Path

from metabaseline.cli import run_experiment

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true", help="compare only, do not write")
    args = ap.parse_args()
    expected = json.loads((GOLDEN / "output_hashes.json").read_text())
    with tempfile.TemporaryDirectory() as tmp:
        got = run_experiment(json.loads((GOLDEN / "experiment.json").read_text()), Path(tmp))
    for name in sorted(set(got) | set(expected)):
        mark = "ok" if got.get(name) == expected.get(name) else "CHANGED"
        print(f"{mark:8s}{name}")
    if not args.check:
        (GOLDEN / "output_hashes.json").write_text(json.dumps(got, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
