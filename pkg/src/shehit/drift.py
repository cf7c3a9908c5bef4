"""Spectral Galerkin simulation with a bounded Lipschitz drift.

In ``v = sigma^{-1} u`` coordinates each mode obeys
``dA^k = (-lam_k A^k + theta^k(u)) dt + dW^k`` with
``theta^k = int_0^1 (sigma^{-1} b(u))(x) phi_k(x) dx``. One step of the
exponential Euler rule reads

    A_{n+1} = e^{-lam d} A_n + m_k theta_n + s_k xi_n,
    m_k = (1 - e^{-lam d}) / lam,  s_k^2 = (1 - e^{-2 lam d}) / (2 lam),

so with ``xi~ = xi + (m_k / s_k) theta`` the same path is a drift-free path
driven by ``xi~``. The ratio of the two Gaussian step densities is the
discrete Girsanov weight used below. The drift starts acting at the first
grid time; before it the field is the drift-free one.
"""

from dataclasses import dataclass, field

import math

import numpy as np
from scipy import stats

from . import field as gf
from . import rng


class DriftAuditError(ValueError):
    """Declared bound or Lipschitz constant violated on the random audit."""


class StabilityError(ValueError):
    """Time step too coarse for the declared Lipschitz constant."""


KINDS = ("zero", "constant", "tanh_scale", "custom_table")


@dataclass(eq=False)
class DriftSpec:
    """Drift ``b: R^d -> R^d`` with declared sup-norm bound and Lipschitz constant.

    kinds
        ``zero``; ``constant`` (``params = c``, a d-vector);
        ``tanh_scale`` (``params = a``, ``b_i(u) = a tanh(u_i)``);
        ``custom_table`` (``params = (knots, values)``, ``b_i`` is the
        piecewise-linear interpolant of ``values[:, i]`` in ``u_i``, flat
        outside the knots).
    """

    kind: str = "zero"
    params: object = None
    bound: float = 1.0
    lipschitz: float = 1.0
    audited: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if not (self.bound > 0 and self.lipschitz > 0):
            raise ValueError("bound and lipschitz must be positive")
        if self.kind == "constant":
            self.params = np.atleast_1d(np.asarray(self.params, dtype=np.float64))
        elif self.kind == "tanh_scale":
            self.params = float(self.params)
        elif self.kind == "custom_table":
            knots, values = self.params
            knots = np.asarray(knots, dtype=np.float64)
            values = np.asarray(values, dtype=np.float64)
            if values.ndim == 1:
                values = values[:, None]
            if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
                raise ValueError("table knots must be strictly increasing")
            if values.shape[0] != knots.size:
                raise ValueError("one table row per knot")
            self.params = (knots, values)

    @classmethod
    def zero(cls):
        return cls("zero", None, 1.0, 1.0)

    @classmethod
    def constant(cls, c):
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        return cls("constant", c, max(float(np.max(np.abs(c))), 1e-300), 1e-300)

    @classmethod
    def tanh(cls, a):
        return cls("tanh_scale", float(a), max(abs(a), 1e-300), max(abs(a), 1e-300))

    @property
    def is_zero(self):
        if self.kind == "zero":
            return True
        if self.kind == "constant":
            return not np.any(self.params)
        if self.kind == "tanh_scale":
            return self.params == 0.0
        return not np.any(self.params[1])

    def __call__(self, u):
        """Evaluate on ``u`` of shape (d, ...)."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "zero":
            return np.zeros_like(u)
        if self.kind == "constant":
            c = self.params
            if c.size not in (1, u.shape[0]):
                raise ValueError(f"constant drift has {c.size} components, field has {u.shape[0]}")
            return np.broadcast_to(c.reshape((-1,) + (1,) * (u.ndim - 1)), u.shape).copy()
        if self.kind == "tanh_scale":
            return self.params * np.tanh(u)
        knots, values = self.params
        out = np.empty_like(u)
        for i in range(u.shape[0]):
            col = values[:, min(i, values.shape[1] - 1)]
            out[i] = np.interp(u[i], knots, col)
        return out

    def audit(self, d, n=100_000, seed=0, radius=10.0):
        """Check bound and Lipschitz constant on ``n`` random points (and pairs)."""
        gen = rng.stream(seed, 0, 0, rng.AUXILIARY)
        pts = gen.uniform(-radius, radius, size=(d, n))
        vals = self(pts)
        sup = float(np.max(np.abs(vals))) if vals.size else 0.0
        if sup > self.bound * (1 + 1e-12):
            raise DriftAuditError(f"|b| reaches {sup:.6g} > declared bound {self.bound:.6g}")
        # half the pairs are close together so local slopes are probed too
        near = pts + gen.normal(scale=1e-3, size=pts.shape)
        far = pts[:, gen.permutation(n)]
        for other in (near, far):
            num = np.linalg.norm(self(other) - vals, axis=0)
            den = np.linalg.norm(other - pts, axis=0)
            ok = den > 0
            slope = float(np.max(num[ok] / den[ok])) if np.any(ok) else 0.0
            if slope > self.lipschitz * (1 + 1e-9):
                raise DriftAuditError(
                    f"observed slope {slope:.6g} > declared Lipschitz {self.lipschitz:.6g}")
        self.audited = True
        return True

    def describe(self):
        if self.kind == "constant":
            return {"kind": "constant", "c": [float(v) for v in self.params]}
        if self.kind == "tanh_scale":
            return {"kind": "tanh_scale", "a": self.params}
        if self.kind == "custom_table":
            return {"kind": "custom_table", "knots": self.params[0].tolist(),
                    "values": self.params[1].tolist()}
        return {"kind": "zero"}


@dataclass(eq=False)
class NoiseRecord:
    """Standard normals driving each (component, step, mode); shape (d, nt-1, k_max+1)."""

    increments: np.ndarray
    seed: int = 0
    k_max: int = 0
    replica: int = 0

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=np.float64)
        if inc.ndim != 3:
            raise ValueError("noise increments must be (d, nt-1, k_max+1)")
        if not np.all(np.isfinite(inc)):
            raise ValueError("noise increments must be finite")
        self.increments = inc
        if self.k_max == 0:
            self.k_max = inc.shape[2] - 1


def _step_tables(grid, k_max):
    dt = np.diff(grid.times)
    k = np.arange(k_max + 1)
    lam = gf.PI2 * k.astype(np.float64) ** 2
    decay = np.exp(-np.outer(dt, lam))
    scale = np.sqrt(gf._mode_variance0(k[None, :], dt[:, None]))
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(k[None, :] == 0, dt[:, None], -np.expm1(-np.outer(dt, lam)) / lam)
    return decay, scale, gain


def _trapezoid_weights(sites):
    w = np.zeros(sites.size)
    h = np.diff(sites)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def _projector(grid, k_max):
    """Matrix ``P[j, k] = tw_j phi_k(x_j)``: ``theta = f @ P`` projects grid values."""
    sites = grid.sites
    if sites[0] != 0.0 or sites[-1] != 1.0 or sites.size < 2:
        raise ValueError("drift projection needs sites spanning [0, 1]")
    return _trapezoid_weights(sites)[:, None] * gf.eigenfunctions(sites, k_max)


def _check_grid(grid):
    if grid.nt > 2:
        step = np.diff(grid.times)
        if np.ptp(step) > 1e-9 * step.mean():
            raise ValueError("drift simulation needs a uniform time grid")


def noise_for(spec, grid, seed, k_max, replica=0):
    """The normals :func:`shehit.field.sample_path` consumes, minus the initial column."""
    inc = np.stack([rng.mode_normals(seed, replica, i, k_max + 1, grid.nt)[:, 1:].T
                    for i in range(spec.d)])
    return NoiseRecord(inc, int(seed), int(k_max), int(replica))


def simulate_drift(spec, drift, grid, seed, k_max=64, replica=0):
    """Simulate ``u`` with drift; returns ``(SamplePath, NoiseRecord)``.

    A zero drift delegates to :func:`shehit.field.sample_path`, so the output
    is bitwise identical to the drift-free sampler for the same seed.
    """
    _check_grid(grid)
    if drift.is_zero:
        path = gf.sample_path(spec, grid, seed, k_max, replica)
        path.meta["drift"] = drift.describe()
        return path, noise_for(spec, grid, seed, k_max, replica)
    if not drift.audited:
        drift.audit(spec.d)
    if grid.nt > 1:
        dt = float(grid.times[1] - grid.times[0])
        if dt * drift.lipschitz > 1.0:
            need = int(math.ceil((grid.times[-1] - grid.times[0]) * drift.lipschitz)) + 1
            raise StabilityError(
                f"time step {dt:.3g} times Lipschitz {drift.lipschitz:.3g} exceeds 1; "
                f"use nt >= {need}")
    d = spec.d
    K = k_max + 1
    nt = grid.nt
    phi = gf.eigenfunctions(grid.sites, k_max)
    proj = _projector(grid, k_max)
    decay, scale, gain = _step_tables(grid, k_max)
    sd0 = np.sqrt(gf.mode_variance(np.arange(K), grid.times[0]))
    xi = np.stack([rng.mode_normals(seed, replica, i, K, nt) for i in range(d)])  # (d, K, nt)
    sinv = spec.sigma_inv
    A = sd0[None, :] * xi[:, :, 0]
    values = np.empty((d, nt, grid.nx))
    for n in range(nt):
        u = spec.sigma @ (A @ phi.T)
        values[:, n, :] = u
        if n == nt - 1:
            break
        theta = (sinv @ drift(u)) @ proj
        A = decay[n] * A + gain[n] * theta + scale[n] * xi[:, :, n + 1]
    path = gf.SamplePath(values, grid, spec, int(seed), int(k_max), int(replica))
    path.meta["drift"] = drift.describe()
    noise = NoiseRecord(np.transpose(xi[:, :, 1:], (0, 2, 1)).copy(), int(seed), int(k_max),
                        int(replica))
    return path, noise


def girsanov_weight(path, noise, drift, spec, direction="to_free"):
    """Likelihood ratio between the drift and drift-free laws of one path.

    ``direction="to_free"`` (path simulated with drift, driven by ``noise``):
    ``exp(-S - Q/2)``, the density of the drift-free law. ``"to_drift"``
    (drift-free path and its noise): ``exp(S - Q/2)``. Here
    ``S = sum (m/s) theta xi`` and ``Q = sum ((m/s) theta)^2`` over
    components, steps and modes, with ``theta`` the projected
    ``sigma^{-1} b(u)`` at the left end of each step.
    """
    if direction not in ("to_free", "to_drift"):
        raise ValueError(f"unknown direction {direction!r}")
    inc = noise.increments
    d, n_steps, K = inc.shape
    if path.values.shape[:2] != (d, n_steps + 1):
        raise ValueError("path and noise come from different simulations")
    if drift.is_zero:
        return 1.0
    grid = path.grid
    k_max = K - 1
    proj = _projector(grid, k_max)
    _, scale, gain = _step_tables(grid, k_max)
    sinv = spec.sigma_inv
    s_terms = []
    q_terms = []
    for n in range(n_steps):
        theta = (sinv @ drift(path.values[:, n, :])) @ proj
        z = (gain[n] / scale[n]) * theta
        s_terms.append(np.sum(z * inc[:, n, :]))
        q_terms.append(np.sum(z * z))
    S = math.fsum(s_terms)
    Q = math.fsum(q_terms)
    logw = (-S if direction == "to_free" else S) - 0.5 * Q
    w = math.exp(logw)
    if not math.isfinite(w) or w <= 0:
        raise FloatingPointError(f"non-finite Girsanov weight (log weight {logw:.6g})")
    return w


# ---------------------------------------------------------------------------
# Law comparison
# ---------------------------------------------------------------------------

@dataclass
class LawReport:
    rows: list
    cov_rows: list

    @property
    def min_pvalue(self):
        return min(r["ks_pvalue"] for r in self.rows)

    def flagged(self, alpha=1e-3):
        return [r for r in self.rows if r["ks_pvalue"] < alpha]

    def to_csv(self, path):
        import csv
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, keys, lineterminator="\n")
            wr.writeheader()
            wr.writerows(self.rows)


def _values(ens):
    if isinstance(ens, gf.SampleEnsemble):
        return ens.values, ens.grid
    ens = gf.SampleEnsemble.from_paths(ens)
    return ens.values, ens.grid


def _node(grid, p):
    n = int(np.argmin(np.abs(grid.times - p[0])))
    j = int(np.argmin(np.abs(grid.sites - p[1])))
    return n, j


def _var_se(x):
    n = x.size
    c = x - x.mean()
    m2 = np.mean(c * c)
    m4 = np.mean(c**4)
    return float(np.sqrt(max(m4 - m2 * m2, 0.0) / n))


def law_match_report(ens_a, ens_b, probes):
    """Per-probe two-sample KS tests and moment comparisons.

    Probes snap to the nearest grid node. Covariances are compared for each
    consecutive probe pair (first component) with standard errors from the
    sample variance of the centred products.
    """
    va, ga = _values(ens_a)
    vb, gb = _values(ens_b)
    if not ga.same_as(gb):
        raise TypeError("ensembles live on different grids")
    rows = []
    nodes = [_node(ga, p) for p in probes]
    for (n, j), p in zip(nodes, probes):
        for i in range(va.shape[1]):
            xa = va[:, i, n, j]
            xb = vb[:, i, n, j]
            res = stats.ks_2samp(xa, xb)
            rows.append({
                "t": float(ga.times[n]), "x": float(ga.sites[j]), "component": i + 1,
                "ks_stat": float(res.statistic), "ks_pvalue": float(res.pvalue),
                "mean_a": float(xa.mean()), "mean_b": float(xb.mean()),
                "mean_diff_se": float(np.sqrt(xa.var(ddof=1) / xa.size + xb.var(ddof=1) / xb.size)),
                "var_a": float(xa.var()), "var_b": float(xb.var()),
                "var_diff_se": float(np.hypot(_var_se(xa), _var_se(xb))),
            })
    cov_rows = []
    for (n1, j1), (n2, j2) in zip(nodes[:-1], nodes[1:]):
        pa = (va[:, 0, n1, j1] - va[:, 0, n1, j1].mean()) * (va[:, 0, n2, j2] - va[:, 0, n2, j2].mean())
        pb = (vb[:, 0, n1, j1] - vb[:, 0, n1, j1].mean()) * (vb[:, 0, n2, j2] - vb[:, 0, n2, j2].mean())
        cov_rows.append({
            "cov_a": float(pa.mean()), "cov_b": float(pb.mean()),
            "diff_se": float(np.sqrt(pa.var(ddof=1) / pa.size + pb.var(ddof=1) / pb.size)),
        })
    return LawReport(rows, cov_rows)
