"""Full-scale acceptance run, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (also visible under
``pytest -s`` or ``-v``) and then asserts both the tolerance and the
runtime budget. Criteria 4-6 are the slow Monte Carlo reproductions and take
several minutes each on one core.
"""

import json
import os
import subprocess
import sys
import time

import pytest

from shehit import verify

RESULTS = {}


def _report(capsys, res):
    RESULTS[res.number] = res
    with capsys.disabled():
        print("\n" + res.line() + ("" if res.in_budget else f"  [over budget {res.budget:g} s]"))


@pytest.mark.parametrize("number", sorted(verify.CRITERIA))
def test_criterion(number, capsys):
    res = verify.run_criterion(number, "full")
    _report(capsys, res)
    assert res.passed, res.line()
    assert res.in_budget, f"{res.seconds:.1f} s exceeds {res.budget:g} s"


def _verify_all(out, threads):
    env = dict(os.environ, SHEHIT_NUM_THREADS=str(threads))
    proc = subprocess.run([sys.executable, "-m", "shehit.cli", "verify-all", "--out", str(out)],
                          env=env, capture_output=True, text=True)
    return proc


def test_criterion_12_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    runs = []
    for threads in (1, 3):
        out = tmp_path / f"threads{threads}"
        proc = _verify_all(out, threads)
        assert proc.returncode == 0, proc.stderr
        info = json.loads((out / "run_info.json").read_text())
        assert info["threads_env"] == str(threads)
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())
                     if p.name != "run_info.json"})
    same = runs[0] == runs[1]
    table = runs[0]["verify.csv"].decode().splitlines()
    res = verify.CriterionResult(
        12, "determinism", same and len(table) == 1 + len(verify.CRITERIA),
        f"{len(runs[0])} artifacts bitwise identical at 1 and 3 threads: {same}; "
        f"{len(table) - 1} criteria in the table",
        time.perf_counter() - t0)
    _report(capsys, res)
    assert res.passed, res.line()
