"""Counter-based Brownian drivers.

Normals are a pure function of ``(seed, stream, tag, row, index)``: a
Philox4x32-10 block cipher maps the counter ``(index // 2, row, stream, tag)``
under the 64-bit seed to 128 random bits, turned into two normals by
Box-Muller.  Batches of streams are generated in one vectorised call, and a
stream never depends on which other streams are drawn with it, so results do
not depend on chunking or worker count.

Brownian increments on power-of-two grids are built by bridge bisection from
the single increment over [0, T]; the grid with 2^k cells is therefore an
exact aggregation of the grid with 2^(k+1) cells, which couples paths across
refinement levels.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

TAG_INCREMENTS = 1
TAG_DIRECT = 2
TAG_SAFEGUARD = 3
TAG_CHILD = 4
TAG_SAMPLER = 5
TAG_INNER = 6


def philox4x32(counter, key, rounds=10):
    """Philox4x32 on arrays of counters.

    Parameters
    ----------
    counter : sequence of 4 uint32-valued arrays (broadcastable)
    key : sequence of 2 uint32 values

    Returns
    -------
    tuple of 4 uint64 arrays holding 32-bit words
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = ((p1 >> _S32) ^ c1 ^ k0, p1 & _MASK,
                          (p0 >> _S32) ^ c3 ^ k1, p0 & _MASK)
    return c0, c1, c2, c3


def _uniform53(hi, lo):
    bits = ((hi << _S32) | lo) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0 ** -53


class BrownianDriver:
    """Seeded source of Brownian increments for any number of streams."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = (self.seed & 0xFFFFFFFF, self.seed >> 32)

    def __repr__(self):
        return f"BrownianDriver(seed={self.seed})"

    def normals(self, streams, tag, row, count):
        """Standard normals of shape (len(streams), count)."""
        streams = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
        blocks = (count + 1) // 2
        idx = np.arange(blocks, dtype=np.uint64)[None, :]
        w = philox4x32((idx, np.uint64(row), streams[:, None], np.uint64(tag)), self._key)
        u1 = _uniform53(w[0], w[1])
        u2 = _uniform53(w[2], w[3])
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty((len(streams), 2 * blocks))
        z[:, 0::2] = r * np.cos(2 * np.pi * u2)
        z[:, 1::2] = r * np.sin(2 * np.pi * u2)
        return z[:, :count]

    def child(self, stream, tag, index):
        """An independent driver derived from (stream, tag, index)."""
        w = philox4x32((np.uint64(index), np.uint64(tag), np.uint64(stream), np.uint64(TAG_CHILD)),
                       self._key)
        return BrownianDriver((int(w[1]) << 32) | int(w[0]))

    def increments(self, streams, steps, T, d):
        """Brownian increments, shape (len(streams), steps, d), each N(0, T/steps)."""
        streams = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
        S = len(streams)
        if steps & (steps - 1) == 0:
            inc = np.sqrt(T) * self.normals(streams, TAG_INCREMENTS, 0, d).reshape(S, 1, d)
            cells = 1
            level = 0
            while cells < steps:
                level += 1
                half_sd = 0.5 * np.sqrt(T / cells)
                z = half_sd * self.normals(streams, TAG_INCREMENTS, level, cells * d).reshape(S, cells, d)
                inc = bridge_bisect(inc, z)
                cells *= 2
            return inc
        dt = T / steps
        return np.sqrt(dt) * self.normals(streams, TAG_DIRECT, steps, steps * d).reshape(S, steps, d)


def bridge_bisect(inc, scaled_normals):
    """Split each increment in two by a Brownian bridge.

    ``inc`` has shape (..., cells, d); ``scaled_normals`` the same shape and
    holds Z * sqrt(cell_dt) / 2.  Returns (..., 2 * cells, d).
    """
    out = np.empty(inc.shape[:-2] + (2 * inc.shape[-2], inc.shape[-1]))
    out[..., 0::2, :] = 0.5 * inc + scaled_normals
    out[..., 1::2, :] = 0.5 * inc - scaled_normals
    return out
