"""Particle-based Monte Carlo simulation of diffusion to an absorbing sphere.

Molecules are released from point transmitters and perform independent
Brownian motion with per-axis step standard deviation sqrt(2 * D * dt).  A
molecule is absorbed the first time its step segment crosses the receiver
sphere; the hit position and time are interpolated at the segment-sphere
intersection.  Each (scenario, transmitter) pair owns a dedicated Philox
stream consumed in molecule-major order, so results are bit-identical no
matter how work is scheduled across processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .channel import ChannelParams
from .seeding import STREAM_WALK, as_generator, stream_seed
from .validation import check_points, check_vector

__all__ = ["ScenarioConfig", "HitSet", "sample_tx_placement", "segment_sphere_hit", "simulate_scenario"]


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulated episode: geometry, physics, and its master seed."""

    tx_positions: np.ndarray  # (K, 3) um, all strictly outside the receiver
    n_molecules_per_tx: int
    channel: ChannelParams
    dt_s: float
    master_seed: int
    scenario_index: int = 0

    def __post_init__(self):
        pos = check_points(self.tx_positions, "tx_positions")
        object.__setattr__(self, "tx_positions", pos)
        radii = np.linalg.norm(pos, axis=1)
        if np.any(radii <= self.channel.rx_radius_um):
            raise ValueError(
                f"every transmitter must lie strictly outside the receiver "
                f"(min |tx| = {radii.min():g} um, r = {self.channel.rx_radius_um:g} um)"
            )
        if self.n_molecules_per_tx < 1:
            raise ValueError(f"n_molecules_per_tx must be >= 1, got {self.n_molecules_per_tx}")
        if not (np.isfinite(self.dt_s) and self.dt_s > 0):
            raise ValueError(f"dt_s must be positive, got {self.dt_s!r}")

    @property
    def num_tx(self) -> int:
        return self.tx_positions.shape[0]

    @property
    def n_steps(self) -> int:
        # only whole steps inside the observation window are simulated
        return int(np.floor(self.channel.obs_time_s / self.dt_s + 1e-9))


@dataclass
class HitSet:
    """Absorption records of one scenario, sorted by (source_tx, molecule)."""

    config: ScenarioConfig
    positions: np.ndarray  # (n, 3) um, on the receiver sphere
    times: np.ndarray  # (n,) s, in (0, obs_time_s]
    source_tx: np.ndarray  # (n,) int, emitting transmitter index
    molecule: np.ndarray  # (n,) int, molecule index within its transmitter
    true_sizes: np.ndarray = field(init=False)  # (K,) absorbed count per transmitter

    def __post_init__(self):
        self.true_sizes = np.bincount(self.source_tx, minlength=self.config.num_tx)

    def __len__(self) -> int:
        return self.positions.shape[0]


def sample_tx_placement(k: int, d_min_um: float, d_max_um: float, rx_radius_um: float, seed) -> np.ndarray:
    """Draw k transmitter positions: uniform directions, radius uniform in [d_min, d_max].

    Directions come from normalized 3D Gaussian draws, which are exactly
    uniform on the unit sphere.  ``d_min_um`` must be strictly outside the
    receiver.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if d_min_um <= rx_radius_um:
        raise ValueError(f"d_min_um={d_min_um:g} must exceed the receiver radius {rx_radius_um:g}")
    if d_max_um <= d_min_um:
        raise ValueError(f"d_max_um={d_max_um:g} must exceed d_min_um={d_min_um:g}")
    rng = as_generator(seed)
    dirs = rng.standard_normal((k, 3))
    norms = np.linalg.norm(dirs, axis=1)
    while np.any(norms < 1e-12):  # astronomically rare degenerate draw
        bad = norms < 1e-12
        dirs[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(dirs, axis=1)
    radii = rng.uniform(d_min_um, d_max_um, size=k)
    return dirs / norms[:, None] * radii[:, None]


def segment_sphere_hit(p_from, p_to, r_um: float):
    """First intersection of the segment p_from -> p_to with the sphere |p| = r.

    Returns (point, fraction) where ``fraction`` in [0, 1] is the parametric
    position of the hit along the segment, or None when the segment stays
    outside the ball.  ``p_from`` must lie strictly outside the sphere.
    """
    p = check_vector(p_from, "p_from")
    q = check_vector(p_to, "p_to")
    if np.dot(p, p) <= r_um * r_um:
        raise ValueError("p_from must lie strictly outside the sphere")
    d = q - p
    a = float(np.dot(d, d))
    b = 2.0 * float(np.dot(p, d))
    c = float(np.dot(p, p)) - r_um * r_um
    if b >= 0.0 or a == 0.0:  # moving away (c > 0), cannot reach the sphere
        return None
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    t0 = (-b - np.sqrt(disc)) / (2.0 * a)
    if t0 > 1.0:
        return None
    return p + t0 * d, float(t0)


@numba.njit(cache=True)
def _walk_transmitter(rng, x0, y0, z0, sigma, r2, n_steps, dt, n_mol, hit_pos, hit_t, hit_mol):  # pragma: no cover
    """Walk all molecules of one transmitter on a single random stream.

    Molecule-major consumption: molecule m draws its whole trajectory before
    molecule m+1 starts, so the stream layout does not depend on scheduling.
    The segment-sphere test mirrors segment_sphere_hit()."""
    n_hits = 0
    for m in range(n_mol):
        px, py, pz = x0, y0, z0
        for s in range(n_steps):
            dx = rng.standard_normal() * sigma
            dy = rng.standard_normal() * sigma
            dz = rng.standard_normal() * sigma
            b = 2.0 * (px * dx + py * dy + pz * dz)
            if b < 0.0:
                a = dx * dx + dy * dy + dz * dz
                c = px * px + py * py + pz * pz - r2
                disc = b * b - 4.0 * a * c
                if disc >= 0.0:
                    t0 = (-b - np.sqrt(disc)) / (2.0 * a)
                    if t0 <= 1.0:
                        hit_pos[n_hits, 0] = px + t0 * dx
                        hit_pos[n_hits, 1] = py + t0 * dy
                        hit_pos[n_hits, 2] = pz + t0 * dz
                        hit_t[n_hits] = (s + t0) * dt
                        hit_mol[n_hits] = m
                        n_hits += 1
                        break
            px += dx
            py += dy
            pz += dz
    return n_hits


def simulate_scenario(config: ScenarioConfig) -> HitSet:
    """Simulate every molecule of every transmitter and collect absorptions.

    Deterministic for a given (config, master_seed): transmitter j of
    scenario i draws from the stream keyed (master_seed, i, STREAM_WALK, j).
    """
    ch = config.channel
    sigma = float(np.sqrt(2.0 * ch.diffusion_coeff * config.dt_s))
    r2 = ch.rx_radius_um * ch.rx_radius_um
    n_steps = config.n_steps
    n_mol = config.n_molecules_per_tx

    all_pos, all_t, all_mol, all_src = [], [], [], []
    for j, tx in enumerate(config.tx_positions):
        rng = as_generator(stream_seed(config.master_seed, config.scenario_index, STREAM_WALK, j))
        hit_pos = np.empty((n_mol, 3))
        hit_t = np.empty(n_mol)
        hit_mol = np.empty(n_mol, np.int64)
        n_hits = _walk_transmitter(
            rng, float(tx[0]), float(tx[1]), float(tx[2]), sigma, r2, n_steps, float(config.dt_s),
            n_mol, hit_pos, hit_t, hit_mol,
        )
        all_pos.append(hit_pos[:n_hits])
        all_t.append(hit_t[:n_hits])
        all_mol.append(hit_mol[:n_hits])
        all_src.append(np.full(n_hits, j, np.int64))

    return HitSet(
        config=config,
        positions=np.concatenate(all_pos) if all_pos else np.empty((0, 3)),
        times=np.concatenate(all_t) if all_t else np.empty(0),
        source_tx=np.concatenate(all_src) if all_src else np.empty(0, np.int64),
        molecule=np.concatenate(all_mol) if all_mol else np.empty(0, np.int64),
    )
