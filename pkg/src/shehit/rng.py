"""Counter-based normal streams.

Every stream is a Philox generator whose 128-bit key is ``(seed, replica)``
and whose 256-bit counter starts at ``(0, 0, purpose, component)``. Streams
for different replicas or components never overlap and can be drawn in any
order or in parallel. Within a stream, draws for a sample path are laid
out mode-major: mode ``k`` owns the normals ``[k*nt, (k+1)*nt)``, the first
of which initialises the mode at the first grid time and the rest drive the
steps.
"""

import numpy as np

MASK64 = (1 << 64) - 1

# purpose tags (third counter word)
SPECTRAL = 0
NODAL = 1
AUXILIARY = 2
TAIL = 3


def stream(seed, replica=0, component=0, purpose=SPECTRAL):
    key = np.array([int(seed) & MASK64, int(replica) & MASK64], dtype=np.uint64)
    counter = np.array([0, 0, int(purpose), int(component)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def mode_normals(seed, replica, component, n_modes, nt, block=None):
    """Normals of shape (n_modes, nt) for one component, mode-major.

    With ``block`` given, yields successive ``(k0, array)`` chunks of at most
    ``block`` modes; the concatenation equals the unblocked draw.
    """
    gen = stream(seed, replica, component, SPECTRAL)
    if block is None:
        return gen.standard_normal((n_modes, nt))
    return _blocks(gen, n_modes, nt, block)


def _blocks(gen, n_modes, nt, block):
    for k0 in range(0, n_modes, block):
        kb = min(block, n_modes - k0)
        yield k0, gen.standard_normal((kb, nt))
