"""Regenerate the bundled end-to-end case in ``tests/data/golden``.

Run from the repository root: ``python3 tests/data/make_golden.py``.
The oracle fixture is recorded from the case's ground-truth oracle and the
final PLY digest is stored alongside for the golden comparison.
"""

import hashlib
import json
import shutil
from pathlib import Path

from splatplace.benchmark import make_case, run_case

HERE = Path(__file__).parent / "golden"
STEPS = {"region": 200, "refine": 8, "appearance": 10}
CASE = {"index": 0, "seed": 7, "n_views": 8, "image_size": 32}


def main():
    if HERE.exists():
        shutil.rmtree(HERE)
    case = make_case(**CASE)
    report, result = run_case(case, HERE, STEPS)
    digest = hashlib.sha256((result.out_dir / "final.ply").read_bytes()).hexdigest()
    shutil.rmtree(result.out_dir)
    meta = {"case": CASE, "steps": STEPS, "final_ply_sha256": digest, "miou": report.miou}
    (HERE / "golden.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(json.dumps(meta, indent=2))


if __name__ == "__main__":
    main()
