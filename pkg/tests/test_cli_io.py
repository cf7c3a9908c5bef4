"""Path files, manifests, the task runner and the command line."""

import json
import os
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shehit import cli, drift as dr, field as gf, pathio, runner, verify
from shehit.manifest import ManifestError, load_manifest, parse_manifest

ROOT = Path(__file__).resolve().parents[1]
MANIFESTS = ROOT / "manifests"

BASE = """\
[experiment]
name = t
task = sample
seed = 3
replicas = 1
k_max = 16

[field]
d = 2
{field}
[grid]
nt = 5
nx = 9
"""


def _manifest(field="", extra=""):
    return BASE.format(field=field) + extra


# ---------------------------------------------------------------------------
# path files
# ---------------------------------------------------------------------------

@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**64 - 1))
def test_path_round_trip(d, nt, nx, seed):
    grid = gf.GridSpec.box(0.2, 0.9, 0.0, 1.0, nt, nx)
    vals = np.random.default_rng(seed % 97).standard_normal((d, nt, nx))
    path = gf.SamplePath(vals, grid, None, seed, 7)
    buf = pathio.path_bytes(path)
    assert len(buf) == struct.calcsize("<4sHIIIQI") + 8 * (nt + nx + d * nt * nx)
    grid2, seed2, k2, vals2 = pathio._parse(buf, lambda d, nt, nx, k: (d, nt, nx))
    assert seed2 == seed and k2 == 7
    assert np.array_equal(vals2, vals) and np.array_equal(grid2.times, grid.times)


def test_path_file_round_trip(tmp_path):
    spec = gf.FieldSpec.isotropic(2)
    grid = gf.GridSpec.regular(spec, 5, 9)
    path = gf.sample_path(spec, grid, 11, 16, 2)
    fn = tmp_path / "p.hpth"
    pathio.save_path(path, fn)
    back = pathio.load_path(fn, spec)
    assert back.values.tobytes() == path.values.tobytes()
    assert back.seed == 11 and back.k_max == 16 and back.spec is spec
    assert fn.read_bytes()[:4] == b"HPTH"


def test_noise_round_trip_replays_path(tmp_path):
    spec = gf.FieldSpec.isotropic(2)
    grid = gf.GridSpec.regular(spec, 33, 9)
    drift = dr.DriftSpec.tanh(1.0)
    path, noise = dr.simulate_drift(spec, drift, grid, 5, 16, 0)
    fn = tmp_path / "p.hpth"
    pathio.save_noise(noise, path, pathio.noise_filename(fn))
    rec, g = pathio.load_noise(pathio.noise_filename(fn))
    assert np.array_equal(rec.increments, noise.increments)
    assert rec.seed == 5 and rec.k_max == 16 and np.array_equal(g.sites, grid.sites)
    assert np.array_equal(rec.increments, dr.noise_for(spec, grid, 5, 16, 0).increments)


def test_path_file_errors(tmp_path):
    spec = gf.FieldSpec.isotropic(1)
    path = gf.sample_path(spec, gf.GridSpec.regular(spec, 3, 3), 0, 8)
    good = pathio.path_bytes(path)
    cases = {
        "magic": (b"XPTH" + good[4:], pathio.PathFormatError, "magic"),
        "version": (good[:4] + struct.pack("<H", 9) + good[6:], pathio.PathFormatError, "version"),
        "short": (good[:-8], pathio.PathLengthError, "expected"),
        "long": (good + b"\0" * 8, pathio.PathLengthError, "expected"),
        "stub": (good[:10], pathio.PathLengthError, "header"),
    }
    for name, (buf, exc, msg) in cases.items():
        fn = tmp_path / f"{name}.hpth"
        fn.write_bytes(buf)
        with pytest.raises(exc, match=msg):
            pathio.load_path(fn)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_manifest_defaults():
    m = parse_manifest(_manifest())
    assert m.task == "sample" and m.seed == 3 and m.spec.d == 2
    assert m.grid.nt == 5 and m.grid.times[0] == pytest.approx(0.1) and m.drift.is_zero
    assert len(m.content_hash) == 40


def test_manifest_zero_nt_names_the_line(tmp_path):
    text = _manifest().replace("nt = 5", "nt = 0")
    fn = tmp_path / "bad.txt"
    fn.write_text(text)
    with pytest.raises(ManifestError) as info:
        load_manifest(fn)
    line = text.splitlines().index("nt = 0") + 1
    assert f"bad.txt:{line}: nt:" in str(info.value)


@pytest.mark.parametrize("text, where", [
    (_manifest().replace("seed = 3", "seed = -1"), "seed"),
    (_manifest().replace("seed = 3", "seed = 3\nseed = 4"), "duplicate key"),
    (_manifest().replace("d = 2", "d = 2\ncolour = red"), "colour"),
    (_manifest("drift = wobble:2\n"), "drift"),
    (_manifest("drift = constant:1 2 3\n"), "drift"),
    (_manifest("sigma = 1 0; 0\n"), "sigma"),
    (_manifest("sigma = 1 0; 0 1\nscale = 2\n"), "either sigma or scale"),
    (_manifest().replace("[grid]", "[gird]"), "unknown section"),
    (_manifest().replace("task = sample", "task = juggle"), "task"),
    (_manifest().replace("nx = 9", "nx = nine"), "nx"),
])
def test_manifest_errors(text, where):
    with pytest.raises(ManifestError, match=where):
        parse_manifest(text, "m.ini")


def test_manifest_drift_and_sigma():
    m = parse_manifest(_manifest("sigma = 2 0; 0 1\ndrift = constant:0.5\n"))
    assert np.array_equal(m.spec.sigma, np.diag([2.0, 1.0]))
    assert not m.drift.is_zero


def test_unknown_param_rejected(tmp_path):
    m = parse_manifest(_manifest(extra="\n[params]\nwidget = 1\n"), "m.ini")
    with pytest.raises(ManifestError, match="widget"):
        runner.run(m, tmp_path)


def test_shipped_manifests_parse():
    names = sorted(p.name for p in MANIFESTS.glob("*.ini"))
    assert len(names) >= 8
    for p in MANIFESTS.glob("*.ini"):
        assert load_manifest(p).task in runner.TASKS


# ---------------------------------------------------------------------------
# runner and command line
# ---------------------------------------------------------------------------

def _artifacts(d):
    return {p.name: p.read_bytes() for p in Path(d).iterdir() if p.name != "run_info.json"}


def test_sample_run_is_deterministic(tmp_path):
    for tag in ("a", "b"):
        assert cli.main(["sample", "--manifest", str(MANIFESTS / "sample.ini"),
                         "--out", str(tmp_path / tag)]) == 0
    a, b = _artifacts(tmp_path / "a"), _artifacts(tmp_path / "b")
    assert a == b and "path_00001.hpth.noise" in a
    meta = json.loads(a["metadata.json"])
    assert meta["seed"] == 42 and set(meta["artifacts"]) == set(a) - {"metadata.json"}
    info = json.loads((tmp_path / "a" / "run_info.json").read_text())
    assert info["wall_clock_seconds"] >= 0


def test_seed_override_changes_output(tmp_path):
    args = ["sample", "--manifest", str(MANIFESTS / "sample.ini")]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b"), "--seed", "43"]) == 0
    a = (tmp_path / "a" / "terminal_values.csv").read_bytes()
    b = (tmp_path / "b" / "terminal_values.csv").read_bytes()
    assert a != b
    assert json.loads((tmp_path / "b" / "metadata.json").read_text())["seed"] == 43


def test_csv_dialect(tmp_path):
    cli.main(["cov-audit", "--manifest", str(MANIFESTS / "cov_audit.ini"), "--out", str(tmp_path)])
    raw = (tmp_path / "covariance_audit.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    assert raw.splitlines()[0] == b"t1,x1,t2,x2,delta,cov_series,cov_exact,gamma2,identity_residual"


def test_command_task_mismatch(tmp_path, capsys):
    code = cli.main(["capacity", "--manifest", str(MANIFESTS / "sample.ini"), "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    # line 1 of the shipped file is a comment
    assert "sample.ini:4: task:" in err


def test_bad_manifest_exit_code(tmp_path, capsys):
    fn = tmp_path / "bad.txt"
    fn.write_text(_manifest().replace("nt = 5", "nt = 0"))
    assert cli.main(["sample", "--manifest", str(fn), "--out", str(tmp_path / "o")]) == 2
    assert "bad.txt:" in capsys.readouterr().err
    assert cli.main(["sample", "--manifest", str(tmp_path / "missing.ini")]) == 2


def test_grid_shape_error_is_a_manifest_error(tmp_path, capsys):
    fn = tmp_path / "dim.ini"
    fn.write_text(_manifest().replace("task = sample", "task = dimension"))
    assert cli.main(["dimension", "--manifest", str(fn), "--out", str(tmp_path / "o")]) == 2
    assert "nt = 1" in capsys.readouterr().err


def test_task_failure_exit_code(tmp_path, capsys):
    fn = tmp_path / "mod.ini"
    fn.write_text((MANIFESTS / "modulus.ini").read_text()
                  .replace("holder_replicas = 1000", "holder_replicas = 10"))
    assert cli.main(["modulus", "--manifest", str(fn), "--out", str(tmp_path / "o")]) == 3
    assert "task modulus: ModulusError" in capsys.readouterr().err


def test_verify_all_exit_codes(tmp_path, monkeypatch):
    fn = tmp_path / "v.ini"
    fn.write_text((MANIFESTS / "verify_quick.ini").read_text()
                  .replace("criteria = 1 2 3 7 9 10 11", "criteria = 1 2"))
    assert cli.main(["verify-all", "--manifest", str(fn), "--out", str(tmp_path / "ok")]) == 0
    rows = (tmp_path / "ok" / "verify.csv").read_text().splitlines()
    assert len(rows) == 3

    def broken(mode="full"):
        return verify.CriterionResult(2, "forced failure", False, "always fails")
    monkeypatch.setitem(verify.CRITERIA, 2, broken)
    assert cli.main(["verify-all", "--manifest", str(fn), "--out", str(tmp_path / "bad")]) == 1


def test_output_independent_of_thread_count(tmp_path):
    fn = tmp_path / "v.ini"
    fn.write_text((MANIFESTS / "verify_quick.ini").read_text()
                  .replace("criteria = 1 2 3 7 9 10 11", "criteria = 1 2 10"))
    outs = []
    for threads in ("1", "4"):
        env = dict(os.environ, SHEHIT_NUM_THREADS=threads)
        out = tmp_path / f"t{threads}"
        res = subprocess.run([sys.executable, "-m", "shehit.cli", "verify-all", "--manifest", str(fn),
                              "--out", str(out)], env=env, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        assert json.loads((out / "run_info.json").read_text())["threads_env"] == threads
        outs.append(_artifacts(out))
    assert outs[0] == outs[1]
