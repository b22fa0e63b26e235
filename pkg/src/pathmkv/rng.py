"""Counter-based noise streams for reproducible parallel Monte Carlo.

Every Brownian increment is addressed by (seed, particle, step, coordinate):
the Philox counter-based generator is keyed by (seed, stream tag, particle),
and (step, coordinate) index into its counter space in C order.  Regenerating
any particle's stream is therefore independent of evaluation order and thread
count, which is what makes flow-property restarts, Yosida ladders and
common-random-number policy comparisons bit-exact.
"""

from __future__ import annotations

import numpy as np

STREAM_BROWNIAN = 0
STREAM_INITIAL = 1
STREAM_POLICY = 2


def particle_generator(seed: int, stream: int, particle: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64((stream << 32) ^ particle)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed: int, n_particles: int, n_steps: int, dk: int, dt: float) -> np.ndarray:
    """iid N(0, dt) increments, shape (N, M, dK), keyed by (seed, particle)."""
    out = np.empty((n_particles, n_steps, dk))
    root = np.sqrt(dt)
    for i in range(n_particles):
        g = particle_generator(seed, STREAM_BROWNIAN, i)
        out[i] = root * g.standard_normal((n_steps, dk))
    return out


def refine_increments(fine: np.ndarray, factor: int) -> np.ndarray:
    """Aggregate fine-step increments into coarse ones (Brownian refinement).

    fine has shape (N, M_fine, dK) with M_fine divisible by factor; the result
    has shape (N, M_fine // factor, dK) and represents the same Brownian path
    sampled on the coarser grid.
    """
    n, m_fine, dk = fine.shape
    if m_fine % factor != 0:
        raise ValueError(f"cannot coarsen {m_fine} steps by factor {factor}")
    return fine.reshape(n, m_fine // factor, factor, dk).sum(axis=2)


def uniforms(seed: int, stream: int, n_particles: int, count: int = 1) -> np.ndarray:
    """Per-particle uniforms on [0,1), shape (N, count); used by randomized policies."""
    out = np.empty((n_particles, count))
    for i in range(n_particles):
        out[i] = particle_generator(seed, stream, i).random(count)
    return out
