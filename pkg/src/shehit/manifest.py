"""Experiment manifests: a small sectioned key-value format.

Example::

    [experiment]
    name = smoke
    task = sample
    seed = 42
    replicas = 2
    k_max = 64

    [field]
    d = 2
    scale = 1.0
    T = 1.0
    t0 = 0.1
    drift = zero

    [grid]
    nt = 9
    nx = 17

    [params]
    probe = 0.5 0.5

Every validation error names the file, the line and the offending key.
The standard ``configparser`` drops line numbers once parsed, hence the
hand-rolled reader.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .drift import DriftSpec
from .field import FieldSpec, GridSpec

TASKS = ("sample", "covariance_audit", "hitprob", "capacity", "dimension", "modulus",
         "girsanov", "verify_all")
SECTIONS = ("experiment", "field", "grid", "params")


class ManifestError(ValueError):
    def __init__(self, source, line, key, message):
        self.source, self.line, self.key = source, line, key
        where = f"{source}:{line}" if line else str(source)
        super().__init__(f"{where}: {key}: {message}" if key else f"{where}: {message}")


@dataclass
class Entry:
    value: str
    line: int


def git_blob_hash(data):
    """Content hash in the style of ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def parse_sections(text, source="<manifest>"):
    sections = {}
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ManifestError(source, no, None, f"malformed section header {raw.strip()!r}")
            current = line[1:-1].strip()
            if current not in SECTIONS:
                raise ManifestError(source, no, None, f"unknown section [{current}]")
            if current in sections:
                raise ManifestError(source, no, None, f"duplicate section [{current}]")
            sections[current] = {"__line__": Entry("", no)}
            continue
        if "=" not in line:
            raise ManifestError(source, no, None, f"expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ManifestError(source, no, None, "key outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ManifestError(source, no, None, "empty key")
        if key in sections[current]:
            raise ManifestError(source, no, key, "duplicate key")
        sections[current][key] = Entry(value, no)
    return sections


class _Reader:
    def __init__(self, source, section, entries):
        self.source, self.section = source, section
        self.entries = entries or {"__line__": Entry("", 0)}
        self.used = {"__line__"}

    def _fail(self, key, msg, entry=None):
        line = entry.line if entry else self.entries["__line__"].line
        raise ManifestError(self.source, line, key, msg)

    def has(self, key):
        return key in self.entries

    def raw(self, key, default=None, required=False):
        if key not in self.entries:
            if required:
                self._fail(key, f"missing required key in [{self.section}]")
            return default
        self.used.add(key)
        return self.entries[key]

    def get(self, key, kind, default=None, required=False, check=None, what=None):
        e = self.raw(key, required=required)
        if e is None:
            return default
        try:
            val = kind(e.value)
        except (ValueError, TypeError):
            self._fail(key, f"cannot read {e.value!r} as {what or kind.__name__}", e)
        if check is not None and not check(val):
            self._fail(key, f"invalid value {e.value!r}" + (f" (need {what})" if what else ""), e)
        return val

    def floats(self, key, default=None, required=False, n=None):
        e = self.raw(key, required=required)
        if e is None:
            return default
        try:
            vals = [float(v) for v in e.value.replace(",", " ").split()]
        except ValueError:
            self._fail(key, f"cannot read {e.value!r} as numbers", e)
        if not vals or (n is not None and len(vals) != n) or not all(map(math.isfinite, vals)):
            self._fail(key, f"need {n or 'some'} finite numbers, got {e.value!r}", e)
        return vals

    def leftover(self):
        for k, e in self.entries.items():
            if k not in self.used:
                self._fail(k, f"unknown key in [{self.section}]", e)


def _positive_int(v):
    return v > 0


@dataclass
class Manifest:
    name: str
    task: str
    seed: int
    replicas: int
    k_max: int
    spec: FieldSpec
    grid: GridSpec
    drift: DriftSpec
    params: dict = field(default_factory=dict)
    output: str = None
    source: str = "<manifest>"
    text: str = ""
    content_hash: str = ""

    def param(self, key, kind=float, default=None, required=False, check=None, what=None):
        r = _Reader(self.source, "params", self.params)
        return r.get(key, kind, default, required, check, what)

    def param_floats(self, key, default=None, required=False, n=None):
        return _Reader(self.source, "params", self.params).floats(key, default, required, n)

    def param_str(self, key, default=None, choices=None):
        e = self.params.get(key)
        if e is None:
            return default
        if choices and e.value not in choices:
            raise ManifestError(self.source, e.line, key, f"must be one of {', '.join(choices)}")
        return e.value

    def with_seed(self, seed):
        from dataclasses import replace
        return replace(self, seed=int(seed))

    def summary(self):
        """Deterministic description echoed into metadata."""
        return {
            "name": self.name, "task": self.task, "seed": self.seed, "replicas": self.replicas,
            "k_max": self.k_max, "d": self.spec.d, "sigma": self.spec.sigma.tolist(),
            "T": self.spec.T, "t0": self.spec.t0, "drift": self.drift.describe(),
            "grid": {"nt": self.grid.nt, "nx": self.grid.nx,
                     "t_range": [float(self.grid.times[0]), float(self.grid.times[-1])],
                     "x_range": [float(self.grid.sites[0]), float(self.grid.sites[-1])]},
            "params": {k: e.value for k, e in sorted(self.params.items()) if k != "__line__"},
            "manifest_hash": self.content_hash,
        }


def _parse_drift(text, d, source, entry):
    kind, _, arg = text.partition(":")
    try:
        if kind == "zero" and not arg:
            return DriftSpec.zero()
        if kind == "constant":
            vals = [float(v) for v in arg.replace(",", " ").split()]
            if len(vals) not in (1, d):
                raise ValueError
            return DriftSpec.constant(vals)
        if kind == "tanh":
            return DriftSpec.tanh(float(arg))
    except ValueError:
        pass
    raise ManifestError(source, entry.line, "drift",
                        f"expected zero, constant:<c> or tanh:<a>, got {text!r}")


def parse_manifest(text, source="<manifest>"):
    if isinstance(text, bytes):
        data = text
        text = text.decode("utf-8")
    else:
        data = text.encode("utf-8")
    secs = parse_sections(text, source)
    for name in ("experiment", "field", "grid"):
        if name not in secs:
            raise ManifestError(source, 0, None, f"missing section [{name}]")
    ex = _Reader(source, "experiment", secs["experiment"])
    name = ex.get("name", str, required=True)
    task = ex.get("task", str, required=True, check=lambda t: t in TASKS,
                  what="one of " + ", ".join(TASKS))
    seed = ex.get("seed", int, 0, check=lambda s: 0 <= s < 2**64, what="an integer in [0, 2^64)")
    replicas = ex.get("replicas", int, 1, check=_positive_int, what="a positive integer")
    k_max = ex.get("k_max", int, 64, check=_positive_int, what="a positive integer")
    output = ex.get("output", str, None)
    ex.leftover()

    fr = _Reader(source, "field", secs["field"])
    d = fr.get("d", int, required=True, check=_positive_int, what="a positive integer")
    T = fr.get("T", float, 1.0, check=lambda v: math.isfinite(v) and v > 0, what="T > 0")
    t0 = fr.get("t0", float, 0.1, check=lambda v: math.isfinite(v) and 0 < v < T, what="0 < t0 < T")
    if fr.has("sigma") and fr.has("scale"):
        fr._fail("sigma", "give either sigma or scale, not both", fr.raw("sigma"))
    if fr.has("sigma"):
        e = fr.raw("sigma")
        try:
            rows = [[float(v) for v in r.split()] for r in e.value.split(";")]
            sigma = np.array(rows, dtype=np.float64)
        except ValueError:
            fr._fail("sigma", "rows of numbers separated by ';' expected", e)
        if sigma.shape != (d, d):
            fr._fail("sigma", f"need a {d}x{d} matrix, got shape {sigma.shape}", e)
    else:
        scale = fr.get("scale", float, 1.0, check=lambda v: math.isfinite(v) and v != 0,
                       what="a nonzero number")
        sigma = scale * np.eye(d)
    drift_entry = fr.raw("drift")
    drift = (_parse_drift(drift_entry.value, d, source, drift_entry) if drift_entry
             else DriftSpec.zero())
    fr.leftover()
    try:
        spec = FieldSpec(d, sigma, T=T, t0=t0)
    except ValueError as exc:
        raise ManifestError(source, secs["field"]["__line__"].line, "sigma", str(exc)) from None

    gr = _Reader(source, "grid", secs["grid"])
    nt = gr.get("nt", int, required=True, check=_positive_int, what="a positive integer")
    nx = gr.get("nx", int, required=True, check=_positive_int, what="a positive integer")
    t_lo = gr.get("t_lo", float, spec.t0 if nt > 1 else T)
    t_hi = gr.get("t_hi", float, T)
    x_lo = gr.get("x_lo", float, 0.0 if nx > 1 else 0.5)
    x_hi = gr.get("x_hi", float, 1.0)
    gr.leftover()
    try:
        grid = GridSpec.box(t_lo, t_hi, x_lo, x_hi, nt, nx)
    except ValueError as exc:
        raise ManifestError(source, secs["grid"]["__line__"].line, "grid", str(exc)) from None

    params = secs.get("params", {"__line__": Entry("", 0)})
    return Manifest(name, task, seed, replicas, k_max, spec, grid, drift, params, output,
                    source, text, git_blob_hash(data))


def load_manifest(path):
    with open(path, "rb") as fh:
        return parse_manifest(fh.read(), str(path))
