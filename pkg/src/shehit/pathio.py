"""Binary persistence for sample paths and their driving noise.

Layout (little-endian)::

    b"HPTH"  u16 version  u32 d  u32 nt  u32 nx  u64 seed  u32 k_max
    f64[nt] times  f64[nx] sites  f64[d*nt*nx] values (component, time, site)

A noise file shares the header and stores ``f64[d*(nt-1)*(k_max+1)]``
standard normals instead of values.
"""

import struct

import numpy as np

from .field import GridSpec, SamplePath

MAGIC = b"HPTH"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIQI")


class PathFormatError(ValueError):
    """Bad magic, unsupported version or inconsistent header."""


class PathLengthError(PathFormatError):
    """File shorter or longer than its header promises."""


def _header(d, nt, nx, seed, k_max):
    return _HEADER.pack(MAGIC, VERSION, d, nt, nx, int(seed) & (2**64 - 1), k_max)


def _grid_bytes(grid):
    return (np.ascontiguousarray(grid.times, dtype="<f8").tobytes()
            + np.ascontiguousarray(grid.sites, dtype="<f8").tobytes())


def path_bytes(path):
    vals = np.ascontiguousarray(path.values, dtype="<f8")
    d, nt, nx = vals.shape
    if (nt, nx) != (path.grid.nt, path.grid.nx):
        raise ValueError("values do not match the grid")
    return _header(d, nt, nx, path.seed, path.k_max) + _grid_bytes(path.grid) + vals.tobytes()


def save_path(path, filename):
    with open(filename, "wb") as fh:
        fh.write(path_bytes(path))


def _parse(buf, payload_shape):
    if len(buf) < _HEADER.size:
        raise PathLengthError(f"file holds {len(buf)} bytes, shorter than the header")
    magic, version, d, nt, nx, seed, k_max = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise PathFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise PathFormatError(f"unsupported format version {version}")
    if d < 1 or nt < 1 or nx < 1:
        raise PathFormatError("header dimensions must be positive")
    shape = payload_shape(d, nt, nx, k_max)
    need = _HEADER.size + 8 * (nt + nx + int(np.prod(shape)))
    if len(buf) != need:
        raise PathLengthError(f"expected {need} bytes, found {len(buf)}")
    off = _HEADER.size
    times = np.frombuffer(buf, "<f8", nt, off).astype(np.float64)
    off += 8 * nt
    sites = np.frombuffer(buf, "<f8", nx, off).astype(np.float64)
    off += 8 * nx
    data = np.frombuffer(buf, "<f8", int(np.prod(shape)), off).astype(np.float64).reshape(shape)
    try:
        grid = GridSpec(times, sites, uniform=False)
    except ValueError as exc:
        raise PathFormatError(f"invalid grid: {exc}") from None
    return grid, seed, k_max, data


def load_path(filename, spec=None):
    """Read a path; the format does not carry ``sigma``, pass ``spec`` to attach one."""
    with open(filename, "rb") as fh:
        buf = fh.read()
    grid, seed, k_max, vals = _parse(buf, lambda d, nt, nx, k: (d, nt, nx))
    return SamplePath(vals, grid, spec, int(seed), int(k_max))


def save_noise(noise, path, filename):
    inc = np.ascontiguousarray(noise.increments, dtype="<f8")
    d, steps, modes = inc.shape
    if steps != path.grid.nt - 1 or modes != noise.k_max + 1:
        raise ValueError("noise shape does not match the path grid")
    with open(filename, "wb") as fh:
        fh.write(_header(d, path.grid.nt, path.grid.nx, noise.seed, noise.k_max)
                 + _grid_bytes(path.grid) + inc.tobytes())


def load_noise(filename):
    from .drift import NoiseRecord
    with open(filename, "rb") as fh:
        buf = fh.read()
    grid, seed, k_max, inc = _parse(buf, lambda d, nt, nx, k: (d, nt - 1, k + 1))
    return NoiseRecord(inc, int(seed), int(k_max)), grid


def noise_filename(path_filename):
    return str(path_filename) + ".noise"
