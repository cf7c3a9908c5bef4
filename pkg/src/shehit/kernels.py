"""Hot numeric loops, each with a numba and a pure-numpy implementation.

The public functions dispatch on :func:`shehit._backend.use_numba` at call
time. Both paths follow the same arithmetic recipe; the numba path keeps
reductions serial (or merges per-row partials in index order) so that its
output does not depend on the thread count.
"""

import math

import numpy as np

from . import _backend

if _backend.HAVE_NUMBA:
    from numba import njit, prange
else:  # pragma: no cover
    njit = prange = None


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck mode recursion
# ---------------------------------------------------------------------------

def _ou_numpy(a0, decay, scale, xi, off):
    n_steps, n_modes = decay.shape
    traj = np.empty((n_steps + 1, n_modes))
    traj[0] = a0
    for n in range(n_steps):
        traj[n + 1] = decay[n] * traj[n] + scale[n] * xi[:, n + off]
    return traj


if _backend.HAVE_NUMBA:

    @njit(cache=True)
    def _ou_numba(a0, decay, scale, xi, off):
        n_steps, n_modes = decay.shape
        traj = np.empty((n_steps + 1, n_modes))
        for k in range(n_modes):
            traj[0, k] = a0[k]
        # step-major keeps decay, scale and traj reads contiguous
        for n in range(n_steps):
            for k in range(n_modes):
                traj[n + 1, k] = decay[n, k] * traj[n, k] + scale[n, k] * xi[k, n + off]
        return traj


def ou_recursion(a0, decay, scale, xi, offset=0):
    """Exact OU updates ``A[n+1] = decay[n]*A[n] + scale[n]*xi[:, n + offset]`` per mode.

    ``a0`` has shape (K,), ``decay`` and ``scale`` (S, K), ``xi`` (K, S + offset).
    Returns the trajectory of shape (S + 1, K).
    """
    a0 = np.ascontiguousarray(a0, dtype=np.float64)
    decay = np.ascontiguousarray(decay, dtype=np.float64)
    scale = np.ascontiguousarray(scale, dtype=np.float64)
    xi = np.ascontiguousarray(xi, dtype=np.float64)
    if xi.shape[0] != decay.shape[1] or xi.shape[1] < decay.shape[0] + offset:
        raise ValueError("xi does not cover every mode and step")
    if _backend.use_numba():
        return _ou_numba(a0, decay, scale, xi, int(offset))
    return _ou_numpy(a0, decay, scale, xi, int(offset))


# ---------------------------------------------------------------------------
# Kernel energy double sum
# ---------------------------------------------------------------------------
# kernel codes: 0 -> r**-beta, 1 -> log(n0/r), 2 -> 1

def _kernel_code(beta):
    if beta > 0:
        return 0
    if beta == 0:
        return 1
    return 2


def _pair_terms_numpy(pts, w, i0, i1, beta, n0, parabolic):
    a = pts[i0:i1, None, :]
    b = pts[None, :, :]
    if parabolic:
        r = np.sqrt(np.abs(a[..., 0] - b[..., 0]))
        if pts.shape[1] > 1:
            r = r + np.sqrt(np.sum((a[..., 1:] - b[..., 1:]) ** 2, axis=-1))
    else:
        r = np.sqrt(np.sum((a - b) ** 2, axis=-1))
    code = _kernel_code(beta)
    with np.errstate(divide="ignore"):
        if code == 0:
            kv = r ** (-beta)
        elif code == 1:
            kv = np.log(n0 / r)
        else:
            kv = np.ones_like(r)
    return kv * w[i0:i1, None] * w[None, :]


def _offdiag_sum_numpy(pts, w, beta, n0, parabolic):
    n = pts.shape[0]
    partials = []
    chunk = max(1, 4_000_000 // max(n, 1))
    for i0 in range(0, n, chunk):
        i1 = min(n, i0 + chunk)
        terms = _pair_terms_numpy(pts, w, i0, i1, beta, n0, parabolic)
        rows = np.arange(i0, i1)
        # strict upper triangle only, doubled below
        mask = np.arange(n)[None, :] > rows[:, None]
        partials.append(math.fsum(terms[mask]))
    return 2.0 * math.fsum(partials)


if _backend.HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _offdiag_rows_numba(pts, w, beta, n0, parabolic, code):
        n, dim = pts.shape
        row_sum = np.zeros(n)
        row_comp = np.zeros(n)
        for i in prange(n):
            s = 0.0
            c = 0.0
            for j in range(i + 1, n):
                if parabolic:
                    r = math.sqrt(abs(pts[i, 0] - pts[j, 0]))
                    acc = 0.0
                    for m in range(1, dim):
                        diff = pts[i, m] - pts[j, m]
                        acc += diff * diff
                    r += math.sqrt(acc)
                else:
                    acc = 0.0
                    for m in range(dim):
                        diff = pts[i, m] - pts[j, m]
                        acc += diff * diff
                    r = math.sqrt(acc)
                if code == 0:
                    kv = r ** (-beta) if r > 0 else math.inf
                elif code == 1:
                    kv = math.log(n0 / r) if r > 0 else math.inf
                else:
                    kv = 1.0
                term = kv * w[i] * w[j]
                # Neumaier compensated accumulation
                t = s + term
                if abs(s) >= abs(term):
                    c += (s - t) + term
                else:
                    c += (term - t) + s
                s = t
            row_sum[i] = s
            row_comp[i] = c
        return row_sum, row_comp

    @njit(cache=True)
    def _neumaier(values):
        s = 0.0
        c = 0.0
        for v in values:
            t = s + v
            if abs(s) >= abs(v):
                c += (s - t) + v
            else:
                c += (v - t) + s
            s = t
        return s + c


def offdiag_energy(pts, w, beta, n0, parabolic):
    """Compensated ``sum_{i != j} w_i w_j K(dist(p_i, p_j))`` in index order."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if pts.shape[0] < 2:
        return 0.0
    if _backend.use_numba():
        rs, rc = _offdiag_rows_numba(pts, w, float(beta), float(n0), bool(parabolic),
                                     _kernel_code(beta))
        merged = np.empty(2 * rs.size)
        merged[0::2] = rs
        merged[1::2] = rc
        return 2.0 * _neumaier(merged)
    return _offdiag_sum_numpy(pts, w, beta, n0, parabolic)


# ---------------------------------------------------------------------------
# Frank-Wolfe on the simplex for min w^T K w
# ---------------------------------------------------------------------------

def _fw_numpy(K, w, tol, max_iter, away, refresh):
    n = K.shape[0]
    Kw = K @ w
    energies = np.empty(max_iter + 1)
    gaps = np.empty(max_iter + 1)
    it = 0
    while True:
        energy = float(w @ Kw)
        s = int(np.argmin(Kw))
        gap = 2.0 * (energy - Kw[s])
        energies[it] = energy
        gaps[it] = gap
        if gap <= tol or it >= max_iter:
            break
        use_away = False
        a = -1
        if away:
            support = np.flatnonzero(w > 0)
            a = int(support[np.argmax(Kw[support])])
            away_gap = 2.0 * (Kw[a] - energy)
            use_away = away_gap > gap and w[a] < 1.0
        if use_away:
            # direction w - e_a
            gmax = w[a] / (1.0 - w[a])
            num = Kw[a] - energy
            den = energy - 2.0 * Kw[a] + K[a, a]
            gamma = gmax if den <= 0 else min(gmax, num / den)
            w = (1.0 + gamma) * w
            w[a] -= gamma
            if gamma == gmax:
                w[a] = 0.0
            Kw = (1.0 + gamma) * Kw - gamma * K[:, a]
        else:
            num = energy - Kw[s]
            den = K[s, s] - 2.0 * Kw[s] + energy
            gamma = 1.0 if den <= 0 else min(1.0, num / den)
            w = (1.0 - gamma) * w
            w[s] += gamma
            Kw = (1.0 - gamma) * Kw + gamma * K[:, s]
        it += 1
        if it % refresh == 0:
            w = np.maximum(w, 0.0)
            w /= w.sum()
            Kw = K @ w
    return w, energies[: it + 1], gaps[: it + 1]


if _backend.HAVE_NUMBA:

    @njit(cache=True)
    def _fw_numba(K, w, tol, max_iter, away, refresh):
        n = K.shape[0]
        Kw = K @ w
        energies = np.empty(max_iter + 1)
        gaps = np.empty(max_iter + 1)
        it = 0
        while True:
            energy = 0.0
            for i in range(n):
                energy += w[i] * Kw[i]
            s = 0
            for i in range(1, n):
                if Kw[i] < Kw[s]:
                    s = i
            gap = 2.0 * (energy - Kw[s])
            energies[it] = energy
            gaps[it] = gap
            if gap <= tol or it >= max_iter:
                break
            use_away = False
            a = -1
            if away:
                for i in range(n):
                    if w[i] > 0 and (a < 0 or Kw[i] > Kw[a]):
                        a = i
                away_gap = 2.0 * (Kw[a] - energy)
                use_away = away_gap > gap and w[a] < 1.0
            if use_away:
                gmax = w[a] / (1.0 - w[a])
                num = Kw[a] - energy
                den = energy - 2.0 * Kw[a] + K[a, a]
                gamma = gmax if den <= 0 else min(gmax, num / den)
                for i in range(n):
                    w[i] = (1.0 + gamma) * w[i]
                    Kw[i] = (1.0 + gamma) * Kw[i] - gamma * K[i, a]
                w[a] -= gamma
                if gamma == gmax:
                    w[a] = 0.0
            else:
                num = energy - Kw[s]
                den = K[s, s] - 2.0 * Kw[s] + energy
                gamma = 1.0 if den <= 0 else min(1.0, num / den)
                for i in range(n):
                    w[i] = (1.0 - gamma) * w[i]
                    Kw[i] = (1.0 - gamma) * Kw[i] + gamma * K[i, s]
                w[s] += gamma
            it += 1
            if it % refresh == 0:
                tot = 0.0
                for i in range(n):
                    if w[i] < 0:
                        w[i] = 0.0
                    tot += w[i]
                for i in range(n):
                    w[i] /= tot
                Kw = K @ w
        return w, energies[: it + 1], gaps[: it + 1]


def frank_wolfe(K, w0, tol=1e-8, max_iter=100_000, away=True, refresh=1000):
    """Minimise ``w^T K w`` over the probability simplex.

    Exact line search along the Frank-Wolfe (and, if ``away``, away-step)
    direction. The linear oracle picks the lowest index on ties. Returns
    ``(w, energies, gaps)`` with one trace entry per iteration.
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    w = np.array(w0, dtype=np.float64)
    if _backend.use_numba():
        return _fw_numba(K, w, float(tol), int(max_iter), bool(away), int(refresh))
    return _fw_numpy(K, w, float(tol), int(max_iter), bool(away), int(refresh))


# ---------------------------------------------------------------------------
# Garsia double sum on a space-time grid
# ---------------------------------------------------------------------------

def _garsia_numpy(vals, tt, xx, mass, p, expo):
    n = vals.shape[0]
    rows = np.empty(n)
    for i in range(n):
        dv = np.abs(vals[i] - vals)
        delta = np.sqrt(np.abs(tt[i] - tt)) + np.abs(xx[i] - xx)
        delta[i] = 1.0
        terms = mass[i] * mass * dv**p / delta**expo
        terms[i] = 0.0
        rows[i] = terms.sum()
    return math.fsum(rows)


if _backend.HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _garsia_rows_numba(vals, tt, xx, mass, p, expo):
        # symmetric: row i holds 2 * sum over j > i
        n = vals.shape[0]
        rows = np.zeros(n)
        ip = int(p)
        integral = ip == p and ip > 0
        for i in prange(n):
            s = 0.0
            for j in range(i + 1, n):
                dv = abs(vals[i] - vals[j])
                if dv == 0.0:
                    continue
                if integral:
                    num = 1.0
                    for _ in range(ip):
                        num *= dv
                else:
                    num = dv**p
                delta = math.sqrt(abs(tt[i] - tt[j])) + abs(xx[i] - xx[j])
                s += mass[j] * num / delta**expo
            rows[i] = 2.0 * mass[i] * s
        return rows


def garsia_sum(vals, tt, xx, mass, p, expo):
    """``sum_{i != j} m_i m_j |f_i - f_j|^p / Delta_ij^expo`` over grid nodes."""
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (vals, tt, xx, mass)]
    if _backend.use_numba():
        rows = _garsia_rows_numba(*args, float(p), float(expo))
        return math.fsum(rows)
    return _garsia_numpy(*args, float(p), float(expo))
