"""Mobility, pathloss, correlated fading and link gains.

Subnetworks drive along a rectangular grid of corridors.  Link gains combine
a log-distance pathloss, the scalar antenna gains and AR(1) Rayleigh fading
whose per-TTI correlation follows Jakes' Doppler spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import j0

from .config import ConfigError, EnvConfig

SPEED_OF_LIGHT = 299_792_458.0
_EPS = 1e-9

STRAIGHT, LEFT, RIGHT = 0, 1, 2


def db2lin(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


def lin2db(x):
    return 10.0 * np.log10(x)


def dbm2mw(x):
    return db2lin(x)


# ---------------------------------------------------------------------------
# mobility


@dataclass
class MobilityState:
    positions: np.ndarray  # (N, 2) metres
    headings: np.ndarray  # (N, 2) unit vectors along a grid axis
    speeds: np.ndarray  # (N,) m/s
    # cumulative straight/left/right draws taken at intersections
    turns: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def copy(self) -> "MobilityState":
        return MobilityState(self.positions.copy(), self.headings.copy(), self.speeds.copy(), self.turns.copy())


def grid_extent(cfg: EnvConfig):
    s = cfg.corridor_spacing_m
    return np.floor(cfg.area_m[0] / s + _EPS) * s, np.floor(cfg.area_m[1] / s + _EPS) * s


def _on_line(v: float, s: float) -> bool:
    r = v / s
    return abs(r - round(r)) * s < 1e-7


def is_intersection(pos, cfg: EnvConfig) -> bool:
    s = cfg.corridor_spacing_m
    return _on_line(pos[0], s) and _on_line(pos[1], s)


def rotate_left(h):
    return np.array([-h[1], h[0]])


def rotate_right(h):
    return np.array([h[1], -h[0]])


def choose_turn(rng, probs) -> int:
    """Draw straight/left/right from one uniform variate."""
    u = rng.random()
    c0 = probs[0]
    c1 = probs[0] + probs[1]
    if u < c0:
        return STRAIGHT
    if u < c1:
        return LEFT
    return RIGHT


def apply_turn(heading, turn: int):
    if turn == LEFT:
        return rotate_left(heading)
    if turn == RIGHT:
        return rotate_right(heading)
    return np.array(heading, dtype=float)


def _leaves_grid(x, y, hx, hy, xmax, ymax) -> bool:
    nx, ny = x + hx * 1e-6, y + hy * 1e-6
    return nx < -_EPS or ny < -_EPS or nx > xmax + _EPS or ny > ymax + _EPS


def _distance_to_next_node(coord: float, direction: float, s: float) -> float:
    r = coord / s
    if direction > 0:
        nxt = (math.floor(r + 1e-9) + 1) * s
    else:
        nxt = (math.ceil(r - 1e-9) - 1) * s
    return abs(nxt - coord)


def _snap_coord(v: float, s: float) -> float:
    r = round(v / s)
    return r * s if abs(v / s - r) * s < 1e-7 else v


def _advance(pos, heading, distance, cfg: EnvConfig, rng, turns):
    s = cfg.corridor_spacing_m
    xmax, ymax = grid_extent(cfg)
    x, y = float(pos[0]), float(pos[1])
    hx, hy = float(heading[0]), float(heading[1])
    remaining = distance
    while remaining > _EPS:
        if _on_line(x, s) and _on_line(y, s):
            turn = choose_turn(rng, cfg.turn_probs)
            turns[turn] += 1
            if turn == LEFT:
                nx, ny = -hy, hx
            elif turn == RIGHT:
                nx, ny = hy, -hx
            else:
                nx, ny = hx, hy
            if _leaves_grid(x, y, nx, ny, xmax, ymax):
                # boundary: turn back along the corridor
                if not _leaves_grid(x, y, -hx, -hy, xmax, ymax):
                    nx, ny = -hx, -hy
                else:
                    nx, ny = -nx, -ny
            hx, hy = nx, ny
        if abs(hx) > 0.5:
            dist = _distance_to_next_node(x, hx, s)
        else:
            dist = _distance_to_next_node(y, hy, s)
        if dist < _EPS:
            dist = s
        step = min(remaining, dist)
        x += hx * step
        y += hy * step
        remaining -= step
        # the coordinate orthogonal to the heading sits exactly on a corridor line
        if abs(hx) > 0.5:
            y = round(y / s) * s
            x = _snap_coord(x, s)
        else:
            x = round(x / s) * s
            y = _snap_coord(y, s)
    return np.array([x, y]), np.array([hx, hy])


def step_mobility(state: MobilityState, cfg: EnvConfig, rng) -> MobilityState:
    """Move every subnetwork one TTI along the corridor grid.

    Movers are processed in index order; a move that would bring a
    subnetwork closer than ``min_separation_m`` to any other is cancelled
    for this TTI.
    """
    new = state.copy()
    if not cfg.mobility_enabled:
        return new
    dt = cfg.tti_s
    n = len(new.speeds)
    pts = new.positions.tolist()
    for i in range(n):
        pos, head = _advance(pts[i], new.headings[i], new.speeds[i] * dt, cfg, rng, new.turns)
        px, py = pos
        if any(math.hypot(px - q[0], py - q[1]) < cfg.min_separation_m for j, q in enumerate(pts) if j != i):
            continue
        pts[i] = [px, py]
        new.positions[i] = pos
        new.headings[i] = head
    return new


def _corridors(cfg: EnvConfig):
    s = cfg.corridor_spacing_m
    xmax, ymax = grid_extent(cfg)
    xs = np.arange(0.0, xmax + _EPS, s)
    ys = np.arange(0.0, ymax + _EPS, s)
    # (fixed coord, axis of travel, length)
    lines = [("h", y, xmax) for y in ys] + [("v", x, ymax) for x in xs]
    return lines


def random_corridor_point(cfg: EnvConfig, rng, lines=None):
    lines = lines or _corridors(cfg)
    lengths = np.array([ln[2] for ln in lines], dtype=float)
    k = rng.choice(len(lines), p=lengths / lengths.sum())
    kind, c, length = lines[k]
    t = rng.uniform(0.0, length)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if kind == "h":
        return np.array([t, c]), np.array([sign, 0.0])
    return np.array([c, t]), np.array([0.0, sign])


def place_subnetworks(cfg: EnvConfig, rng, max_attempts: int = 10_000) -> MobilityState:
    """Uniform placement on corridor points, rejection-sampled for separation."""
    n = cfg.n_subnetworks
    speeds = rng.uniform(cfg.speed_range_mps[0], cfg.speed_range_mps[1], size=n)
    if cfg.initial_positions is not None:
        pos = np.array(cfg.initial_positions, dtype=float)
        heads = np.tile(np.array([1.0, 0.0]), (n, 1))
        return MobilityState(pos, heads, speeds)
    positions = np.zeros((n, 2))
    headings = np.zeros((n, 2))
    lines = _corridors(cfg)
    attempts = 0
    i = 0
    while i < n:
        if attempts >= max_attempts:
            raise ConfigError(
                f"could not place {n} subnetworks with {cfg.min_separation_m} m separation "
                f"after {max_attempts} attempts; the deployment area is too dense"
            )
        attempts += 1
        p, h = random_corridor_point(cfg, rng, lines)
        if i and np.min(np.linalg.norm(positions[:i] - p, axis=1)) < cfg.min_separation_m:
            continue
        positions[i] = p
        headings[i] = h
        i += 1
    return MobilityState(positions, headings, speeds)


# ---------------------------------------------------------------------------
# pathloss and fading


def pathloss_db(distance_m, cfg: EnvConfig):
    d = np.maximum(np.asarray(distance_m, dtype=float), 0.1)
    return cfg.pathloss_intercept_db + cfg.excess_loss_db + 10.0 * cfg.pathloss_exponent * np.log10(d)


def doppler_hz(speed_mps: float, carrier_hz: float) -> float:
    return speed_mps * carrier_hz / SPEED_OF_LIGHT


def fading_rho(cfg: EnvConfig) -> float:
    """Per-TTI correlation of the small-scale coefficient.

    Uses the configured value when set, otherwise J0(2 pi f_d dt) at the mean
    speed (clipped into [0, 1)).
    """
    if cfg.fading_correlation is not None:
        return float(cfg.fading_correlation)
    v = 0.5 * (cfg.speed_range_mps[0] + cfg.speed_range_mps[1])
    rho = float(j0(2 * np.pi * doppler_hz(v, cfg.carrier_hz) * cfg.tti_s))
    return float(np.clip(rho, 0.0, 1.0 - 1e-12))


def complex_gaussian(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def ar1_step(h_prev, rho: float, w):
    return rho * h_prev + np.sqrt(1.0 - rho * rho) * w


@dataclass
class FadingState:
    intra: np.ndarray  # (N, K) complex
    cross: np.ndarray  # (N, N) complex, [i, j] = link from j into i

    def power(self):
        return np.abs(self.intra) ** 2, np.abs(self.cross) ** 2


def sample_fading(prev: Optional[FadingState], cfg: EnvConfig, rng) -> FadingState:
    n, k = cfg.n_subnetworks, cfg.n_subcarriers
    if not cfg.fading_enabled:
        return FadingState(np.ones((n, k), dtype=complex), np.ones((n, n), dtype=complex))
    w_intra = complex_gaussian(rng, (n, k))
    w_cross = complex_gaussian(rng, (n, n))
    if prev is None:
        return FadingState(w_intra, w_cross)
    rho = fading_rho(cfg)
    return FadingState(ar1_step(prev.intra, rho, w_intra), ar1_step(prev.cross, rho, w_cross))


# ---------------------------------------------------------------------------
# gains


@dataclass
class GainSnapshot:
    intra: np.ndarray  # (N, K) linear
    cross: np.ndarray  # (N, N) linear, [i, j] = gain from j's transmitter to i's controller; diag 0
    tti: int = 0


def antenna_gain_db(cfg: EnvConfig) -> float:
    return cfg.tx_gain_dbi + cfg.rx_gain_dbi


def link_gain(distance_m, cfg: EnvConfig, fading_power=1.0):
    return db2lin(antenna_gain_db(cfg) - pathloss_db(distance_m, cfg)) * fading_power


def pairwise_distances(positions) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.linalg.norm(diff, axis=-1)


def compute_gains(mob: MobilityState, fading: FadingState, cfg: EnvConfig, tti: int = 0) -> GainSnapshot:
    p_intra, p_cross = fading.power()
    intra = link_gain(cfg.intra_link_distance_m, cfg, p_intra)
    d = pairwise_distances(mob.positions)
    cross = link_gain(d, cfg, p_cross)
    np.fill_diagonal(cross, 0.0)
    return GainSnapshot(intra=np.asarray(intra, dtype=float), cross=cross, tti=tti)
