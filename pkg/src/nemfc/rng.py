"""Counter-based random numbers (Philox4x32-10).

Each draw is a pure function of (seed, stream, step, label, particle,
component), so results never depend on evaluation order, batch size or
the number of particles requested alongside it.
"""
from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)

# stream tags keep independent uses of one seed apart
BROWNIAN = 0
INITIAL = 1
DIRECTIONS = 2
SAMPLING = 3


def philox4x32(counter, key, rounds: int = 10):
    """Vectorised Philox4x32. counter: 4 uint32-valued arrays, key: 2."""
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    k0, k1 = (np.asarray(k, dtype=np.uint64) & _MASK for k in key)
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def _key(seed: int):
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be in [0, 2**64)")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def _uniform(words):
    # 32-bit words to the open interval (0, 1)
    return (words.astype(np.float64) + 0.5) * (1.0 / 4294967296.0)


def _blocks(seed, stream, step, labels, particles, n_blocks):
    labels = np.asarray(labels, dtype=np.uint64)
    particles = np.asarray(particles, dtype=np.uint64)
    block = np.arange(n_blocks, dtype=np.uint64)
    c0 = np.uint64(step)
    c1 = particles[None, :, None]
    c2 = labels[:, None, None]
    c3 = (np.uint64(stream) << np.uint64(16)) | block[None, None, :]
    shape = (labels.size, particles.size, n_blocks)
    counter = [np.broadcast_to(c, shape) for c in (c0, c1, c2, c3)]
    return philox4x32(counter, _key(seed))


def uniforms(seed: int, stream: int, step: int, labels, particles, dim: int) -> np.ndarray:
    """Uniform(0,1) draws of shape (len(labels), len(particles), dim)."""
    n_blocks = -(-dim // 4)
    words = _blocks(seed, stream, step, labels, particles, n_blocks)
    out = np.stack([_uniform(w) for w in words], axis=-1)
    return out.reshape(out.shape[0], out.shape[1], 4 * n_blocks)[..., :dim]


def normals(seed: int, stream: int, step: int, labels, particles, dim: int) -> np.ndarray:
    """Standard normal draws of shape (len(labels), len(particles), dim), Box-Muller."""
    n_blocks = -(-dim // 4)
    u0, u1, u2, u3 = (_uniform(w) for w in _blocks(seed, stream, step, labels, particles, n_blocks))
    r0 = np.sqrt(-2.0 * np.log(u0))
    r1 = np.sqrt(-2.0 * np.log(u2))
    out = np.stack(
        [r0 * np.cos(2 * np.pi * u1), r0 * np.sin(2 * np.pi * u1),
         r1 * np.cos(2 * np.pi * u3), r1 * np.sin(2 * np.pi * u3)],
        axis=-1,
    )
    return out.reshape(out.shape[0], out.shape[1], 4 * n_blocks)[..., :dim]


def brownian_increments(seed: int, n_steps: int, n_labels: int, n_particles: int,
                        dim: int, dt: float) -> np.ndarray:
    """Increments of shape (n_steps, n_labels, n_particles, dim), each N(0, dt)."""
    labels = np.arange(n_labels)
    particles = np.arange(n_particles)
    out = np.empty((n_steps, n_labels, n_particles, dim))
    scale = np.sqrt(dt)
    for k in range(n_steps):
        out[k] = scale * normals(seed, BROWNIAN, k, labels, particles, dim)
    return out
