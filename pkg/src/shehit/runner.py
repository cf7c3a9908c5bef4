"""Execute a manifest and write its artifacts.

Every run writes data files (CSV, HPTH), a deterministic ``metadata.json``
that echoes the manifest and lists a sha256 for each data file, and a
``run_info.json`` with wall-clock and library versions. Only the last one
varies between identical runs.
"""

import csv
import hashlib
import json
import math
import os
import platform
import time
from pathlib import Path

import numpy as np

from . import drift as dr
from . import field as gf
from . import hitting as ht
from . import modulus as mo
from . import pathio
from . import potential as pt
from . import rng
from . import verify
from .manifest import ManifestError, parse_manifest

DEFAULT_VERIFY_MANIFEST = """\
[experiment]
name = verify
task = verify_all
seed = 0
replicas = 1
k_max = 512

[field]
d = 1

[grid]
nt = 2
nx = 2

[params]
mode = quick
"""


class TaskError(RuntimeError):
    """A numeric failure inside a task, prefixed with the task name."""


def default_manifest():
    return parse_manifest(DEFAULT_VERIFY_MANIFEST, "<default verify manifest>")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _r(x):
    # shortest round-trip repr keeps CSVs bitwise stable
    return repr(float(x))


def domain_n0(grid):
    """Log-kernel normalisation for the manifest's space-time box."""
    t, x = grid.times, grid.sites
    diam = pt.diameter(np.array([[t[0], x[0]], [t[-1], x[-1]]]), "parabolic")
    return pt.default_n0(diam)


# ---------------------------------------------------------------------------
# tasks: each returns (list of artifact names, extra metadata dict)
# ---------------------------------------------------------------------------

def task_sample(m, out):
    names = []
    j = int(np.argmin(np.abs(m.grid.sites - 0.5)))
    rows = []
    for r in range(m.replicas):
        if m.drift.is_zero:
            path, noise = gf.sample_path(m.spec, m.grid, m.seed, m.k_max, r), None
        else:
            path, noise = dr.simulate_drift(m.spec, m.drift, m.grid, m.seed, m.k_max, r)
        fn = f"path_{r:05d}.hpth"
        pathio.save_path(path, out / fn)
        names.append(fn)
        if noise is not None:
            pathio.save_noise(noise, path, out / (fn + ".noise"))
            names.append(fn + ".noise")
        for i in range(m.spec.d):
            rows.append([r, i + 1, _r(m.grid.times[-1]), _r(m.grid.sites[j]),
                         _r(path.values[i, -1, j])])
    _write_csv(out / "terminal_values.csv", ["replica", "component", "t", "x", "value"], rows)
    return names + ["terminal_values.csv"], {}


def task_covariance_audit(m, out):
    pairs = m.param("pairs", int, 200, check=lambda v: v > 0, what="a positive integer")
    gen = rng.stream(m.seed, 0, 0, rng.AUXILIARY)
    g = m.grid
    t_lo, t_hi = max(g.times[0], 1e-12), g.times[-1]
    x_lo, x_hi = g.sites[0], g.sites[-1]
    p = np.column_stack([gen.uniform(t_lo, t_hi, pairs), gen.uniform(x_lo, x_hi, pairs)])
    q = np.column_stack([gen.uniform(t_lo, t_hi, pairs), gen.uniform(x_lo, x_hi, pairs)])
    model = gf.SpectralModel(m.k_max)
    st = gf.pair_stats_array(p, q, model, tol=math.inf)
    exact = gf.heat_covariance(p, q)
    series = st["cov"]
    delta = gf.parabolic_distance(p, q)
    rows = [[_r(p[k, 0]), _r(p[k, 1]), _r(q[k, 0]), _r(q[k, 1]), _r(delta[k]), _r(series[k]),
             _r(exact[k]), _r(st["gamma2"][k]), _r(st["identity_residual"][k])]
            for k in range(pairs)]
    _write_csv(out / "covariance_audit.csv",
               ["t1", "x1", "t2", "x2", "delta", "cov_series", "cov_exact", "gamma2",
                "identity_residual"], rows)
    worst = float(np.max(st["identity_residual"]))
    gap = float(np.max(np.abs(series - exact)))
    _write_csv(out / "summary.csv", ["quantity", "value"],
               [["max_identity_residual", _r(worst)], ["max_series_vs_exact", _r(gap)],
                ["truncation_bound", _r(gf.covariance_tail_bound(m.k_max))]])
    return ["covariance_audit.csv", "summary.csv"], {}


def _region(m):
    kind = m.param_str("region", "full", ("full", "t_section", "x_section"))
    g = m.grid
    I = (float(g.times[0]), float(g.times[-1]))
    J = (float(g.sites[0]), float(g.sites[-1]))
    if kind == "t_section":
        if g.nt != 1:
            raise ManifestError(m.source, m.params["region"].line, "region",
                                "t_section needs a grid with nt = 1")
        return ht.Region.t_section(I[0], J)
    if kind == "x_section":
        if g.nx != 1:
            raise ManifestError(m.source, m.params["region"].line, "region",
                                "x_section needs a grid with nx = 1")
        return ht.Region.x_section(J[0], I)
    return ht.Region.full(I, J)


def task_hitprob(m, out):
    eps_list = m.param_floats("eps", [0.4, 0.3, 0.2, 0.15])
    if any(e <= 0 for e in eps_list):
        raise ManifestError(m.source, m.params["eps"].line, "eps", "radii must be positive")
    center = m.param_floats("center", [0.0] * m.spec.d, n=m.spec.d)
    method = m.param_str("method", "conditional", ("conditional", "grid"))
    region = _region(m)
    exact = m.param_str("sampler", "exact", ("exact", "spectral")) == "exact"
    targets = [ht.Ball(np.array(center), e) for e in eps_list]
    if method == "conditional":
        ests = ht.conditional_sweep(m.spec, m.grid, region, targets, m.seed, m.replicas,
                                    k_max=m.k_max, exact=exact)
    else:
        ens = (gf.sample_grid_exact(m.spec, m.grid, m.seed, m.replicas) if exact
               else gf.sample_ensemble(m.spec, m.grid, m.seed, m.replicas, m.k_max))
        floor = m.param("floor_factor", float, 4.0, check=lambda v: v >= 0, what="a number >= 0")
        ests = [ht.hit_probability(ens, tg, region, floor_factor=floor) for tg in targets]
    ht.write_estimates_csv(out / "estimates.csv", ests)
    names = ["estimates.csv"]
    if len(eps_list) >= 4:
        fit = ht.exponent_fit(list(zip(eps_list, ests)))
        ht.write_fit_csv(out / "fit.csv", {region.kind: fit})
        names.append("fit.csv")
    return names, {}


def task_capacity(m, out):
    beta = m.param("beta", float, 0.5)
    n = m.param("cells", int, 128, check=lambda v: v > 0, what="a positive integer")
    a, b = m.param_floats("interval", [0.0, 1.0], n=2)
    if not b > a:
        raise ManifestError(m.source, m.params["interval"].line, "interval", "need a < b")
    order = pt.KernelOrder.for_diameter(beta, b - a)
    g = pt.GridSet.interval(a, b, n)
    res = pt.capacity_solve(g, order)
    rows = [["capacity", _r(res.value)], ["energy", _r(res.energy)],
            ["iterations", res.iterations], ["duality_gap", _r(res.gap)],
            ["converged", int(res.converged)], ["n0", _r(res.n0)]]
    if m.param_str("oracle", "no", ("yes", "no")) == "yes":
        pg = pt.capacity_projected_gradient(g, order)
        rows.append(["oracle_capacity", _r(pg.value)])
    _write_csv(out / "capacity.csv", ["quantity", "value"], rows)
    pt.write_trace_csv(out / "trace.csv", res)
    pt.write_measure_csv(out / "measure.csv", pt.DiscreteMeasure(g.points, res.weights), ["x"])
    return ["capacity.csv", "trace.csv", "measure.csv"], {"n0": res.n0, "beta": beta}


def task_dimension(m, out):
    z = m.param("level", float, 0.0)
    g = m.grid
    if g.nx > 1 and g.nt == 1:
        selector, extent, step = ("t_section", float(g.times[0])), g.sites[-1] - g.sites[0], g.sites[1] - g.sites[0]
    elif g.nt > 1 and g.nx == 1:
        selector, extent, step = ("x_section", float(g.sites[0])), g.times[-1] - g.times[0], g.times[1] - g.times[0]
    else:
        raise ManifestError(m.source, m.params["__line__"].line, "grid",
                            "dimension needs a single time (nt = 1) or a single site (nx = 1)")
    tail = m.param_str("tail", "auto", ("auto", "yes", "no"))
    use_tail = g.nx == 1 and (tail == "yes" or (
        tail == "auto" and math.pi**2 * (m.k_max + 1) ** 2 * np.min(np.diff(g.times))
        >= gf.TAIL_DECORRELATION))
    clouds = []
    for r in range(m.replicas):
        path = gf.sample_path(m.spec, g, m.seed, m.k_max, r, tail=use_tail)
        clouds.append(ht.level_set(path, z, None, selector))
    levels = ht.resolved_levels(float(extent), float(step))
    min_paths = m.param("min_paths", int, 50, check=lambda v: v > 0, what="a positive integer")
    fit = ht.pooled_box_dimension(clouds, levels=levels, min_paths=min_paths)
    _write_csv(out / "box_counts.csv", ["level", "mean_count"],
               [[lv, _r(c)] for lv, c in zip(fit.levels, fit.counts)])
    _write_csv(out / "dimension.csv", ["selector", "level", "dimension", "stderr", "paths"],
               [[selector[0], _r(z), _r(fit.dim), _r(fit.stderr), m.replicas]])
    return ["box_counts.csv", "dimension.csv"], {"white_tail": bool(use_tail)}


def task_modulus(m, out):
    p = m.param("p", float, 2.0, check=lambda v: v > 0, what="p > 0")
    center = tuple(m.param_floats("center", [0.5, 0.5], n=2))
    hold = m.param("holder_replicas", int, 1000, check=lambda v: v > 0, what="a positive integer")
    rep = mo.modulus_report(m.spec, m.seed, p=p, replicas=m.replicas, center=center,
                            holder_replicas=hold)
    rep.to_csv(out / "modulus.csv")
    return ["modulus.csv"], {}


def task_girsanov(m, out):
    probe = m.param_floats("probe", [float(m.grid.times[-1]), 0.5], n=2)
    n = int(np.argmin(np.abs(m.grid.times - probe[0])))
    j = int(np.argmin(np.abs(m.grid.sites - probe[1])))
    zero = dr.DriftSpec.zero()
    rows = []
    for r in range(m.replicas):
        path, noise = dr.simulate_drift(m.spec, m.drift, m.grid, m.seed, m.k_max, r)
        w = dr.girsanov_weight(path, noise, m.drift, m.spec, "to_free")
        free, nf = dr.simulate_drift(m.spec, zero, m.grid, m.seed + 1, m.k_max, r)
        wf = dr.girsanov_weight(free, nf, m.drift, m.spec, "to_drift")
        rows.append([r, _r(w), _r(path.values[0, n, j]), _r(free.values[0, n, j]), _r(wf)])
    _write_csv(out / "weights.csv",
               ["replica", "weight_to_free", "probe_drift", "probe_free", "weight_to_drift"], rows)
    arr = np.array([[float(v) for v in row[1:]] for row in rows])
    k = len(rows)

    def se(x):
        return float(x.std(ddof=1) / math.sqrt(k)) if k > 1 else math.nan

    rew = arr[:, 2] * arr[:, 3]
    _write_csv(out / "summary.csv", ["quantity", "mean", "stderr"],
               [["weight_to_free", _r(arr[:, 0].mean()), _r(se(arr[:, 0]))],
                ["probe_drift", _r(arr[:, 1].mean()), _r(se(arr[:, 1]))],
                ["reweighted_probe_free", _r(rew.mean()), _r(se(rew))]])
    return ["weights.csv", "summary.csv"], {"probe": [float(m.grid.times[n]), float(m.grid.sites[j])]}


def task_verify_all(m, out):
    mode = m.param_str("mode", "quick", ("quick", "full"))
    e = m.params.get("criteria")
    numbers = None
    if e is not None:
        try:
            numbers = [int(v) for v in e.value.replace(",", " ").split()]
        except ValueError:
            numbers = [0]
        if not numbers or any(k not in verify.CRITERIA for k in numbers):
            raise ManifestError(m.source, e.line, "criteria",
                                f"choose from {sorted(verify.CRITERIA)}")
    results = verify.run_all(mode, numbers, log=print)
    _write_csv(out / "verify.csv", ["criterion", "name", "passed", "summary"],
               [[r.number, r.name, "PASS" if r.passed else "FAIL", r.summary] for r in results])
    timings = {str(r.number): round(r.seconds, 3) for r in results}
    return ["verify.csv"], {"mode": mode, "_timings": timings,
                            "_failed": [r.number for r in results if not r.passed]}


TASKS = {
    "sample": task_sample,
    "covariance_audit": task_covariance_audit,
    "hitprob": task_hitprob,
    "capacity": task_capacity,
    "dimension": task_dimension,
    "modulus": task_modulus,
    "girsanov": task_girsanov,
    "verify_all": task_verify_all,
}


PARAM_KEYS = {
    "sample": (),
    "covariance_audit": ("pairs",),
    "hitprob": ("eps", "center", "method", "region", "sampler", "floor_factor"),
    "capacity": ("beta", "cells", "interval", "oracle"),
    "dimension": ("level", "tail", "min_paths"),
    "modulus": ("p", "center", "holder_replicas"),
    "girsanov": ("probe",),
    "verify_all": ("mode", "criteria"),
}


def check_params(m):
    allowed = PARAM_KEYS[m.task]
    for key, e in m.params.items():
        if key != "__line__" and key not in allowed:
            hint = f"; accepted: {', '.join(allowed)}" if allowed else ""
            raise ManifestError(m.source, e.line, key, f"unknown parameter for task {m.task}{hint}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import numba
    import scipy
    from importlib.metadata import PackageNotFoundError, version
    try:
        own = version("artifact")
    except PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def run(manifest, out_dir=None):
    """Run ``manifest`` and return ``(out_dir, extra)``; raises on failure."""
    from ._backend import backend
    check_params(manifest)
    out = Path(out_dir or manifest.output or Path("out") / manifest.name)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        names, extra = TASKS[manifest.task](manifest, out)
    except (ManifestError, KeyboardInterrupt):
        raise
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise TaskError(f"task {manifest.task}: {type(exc).__name__}: {exc}") from exc
    wall = time.perf_counter() - t0
    private = {k: v for k, v in extra.items() if k.startswith("_")}
    public = {k: v for k, v in extra.items() if not k.startswith("_")}
    meta = {
        "manifest": manifest.summary(),
        "seed": manifest.seed,
        "k_max": manifest.k_max,
        "n0": public.pop("n0", domain_n0(manifest.grid)),
        "grid": {"times": [float(t) for t in manifest.grid.times],
                 "sites": [float(x) for x in manifest.grid.sites]},
        "manifest_hash": manifest.content_hash,
        "task_info": public,
        "artifacts": {name: _sha256(out / name) for name in names},
    }
    with open(out / "metadata.json", "w", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    info = {"wall_clock_seconds": wall, "versions": _versions(), "backend": backend(),
            "threads_env": os.environ.get("SHEHIT_NUM_THREADS"), **private}
    with open(out / "run_info.json", "w", newline="\n") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out, extra
