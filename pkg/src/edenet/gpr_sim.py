"""Synthetic multi-channel GPR B-scans.

A scene is a list of compact buried reflectors.  As the antenna passes over a
reflector its two-way travel time traces a hyperbola; the medium's relative
permittivity sets the wave speed and therefore stretches the depth axis.
Rendering is linear in the scene, so overlapping reflectors simply add.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError

C_VACUUM = 0.2998  # m/ns

# Origin of the synthetic trajectories (UTM easting/northing, metres).
UTM_ORIGIN = (430000.0, 4480000.0)


@dataclass(frozen=True)
class Reflector:
    along_track_position: float
    depth: float
    radius: float = 0.0
    reflectivity: float = 1.0

    def __post_init__(self):
        if not self.depth > 0:
            raise ConfigError(f"reflector depth must be > 0, got {self.depth}")
        if self.radius < 0:
            raise ConfigError(f"reflector radius must be >= 0, got {self.radius}")
        if not 0 < self.reflectivity <= 1:
            raise ConfigError(f"reflectivity must be in (0, 1], got {self.reflectivity}")


@dataclass(frozen=True)
class MediumProfile:
    """Relative permittivity, either global or piecewise along the track.

    ``segments`` holds ``(start_position, epsilon_r)`` pairs sorted by start; a
    position before the first start uses ``epsilon_r``.
    """

    epsilon_r: float
    segments: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        values = [self.epsilon_r] + [eps for _, eps in self.segments]
        if any(not eps >= 1.0 for eps in values):
            raise ConfigError(f"epsilon_r must be >= 1 everywhere, got {values}")
        starts = [s for s, _ in self.segments]
        if starts != sorted(starts):
            raise ConfigError("medium segments must be sorted by start position")

    def at(self, position: float) -> float:
        eps = self.epsilon_r
        for start, seg_eps in self.segments:
            if position >= start:
                eps = seg_eps
        return eps


@dataclass(frozen=True)
class SimConfig:
    """Radar and sampling geometry.

    Times are in ns, lengths in metres, ``beamwidth`` is the half-angle of the
    antenna cone in radians.
    """

    c: float = C_VACUUM
    time_bin: float = 0.5
    dx: float = 1.0
    D: int = 64
    C: int = 3
    beamwidth: float = math.radians(60.0)
    wavelet_width: float = 2.0
    noise_sigma: float = 0.0
    seed: int = 0
    channel_spacing: float = 0.01

    def __post_init__(self):
        for name in ("c", "time_bin", "dx", "beamwidth", "wavelet_width", "channel_spacing"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"SimConfig.{name} must be > 0")
        if self.D < 1 or self.C < 1:
            raise ConfigError("SimConfig.D and SimConfig.C must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("SimConfig.noise_sigma must be >= 0")
        if self.beamwidth >= math.pi / 2:
            raise ConfigError("SimConfig.beamwidth must be below pi/2")

    def channel_offsets(self) -> np.ndarray:
        """Cross-track offset of each channel, centred on the antenna axis."""
        return (np.arange(self.C) - (self.C - 1) / 2.0) * self.channel_spacing


@dataclass
class GprSequence:
    """``S x D x C`` echo volume plus one ``(utm_x, utm_y)`` pose per frame."""

    frames: np.ndarray
    poses: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 2)
        if self.frames.ndim != 3:
            raise ConfigError(f"frames must be S x D x C, got shape {self.frames.shape}")
        if len(self.poses) != len(self.frames):
            raise ConfigError(f"{len(self.poses)} poses for {len(self.frames)} frames")
        if not np.all(np.isfinite(self.frames)):
            raise ConfigError("frames contain non-finite values")

    @property
    def S(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]

    @property
    def C(self) -> int:
        return self.frames.shape[2]

    def copy(self) -> "GprSequence":
        return GprSequence(self.frames.copy(), self.poses.copy())


def travel_time(x_offset, d0, epsilon_r, c=C_VACUUM):
    """Two-way travel time (ns) to a point reflector at depth ``d0`` seen ``x_offset`` away."""
    if np.any(np.asarray(epsilon_r) < 1):
        raise ConfigError(f"epsilon_r must be >= 1, got {epsilon_r}")
    v = c / np.sqrt(epsilon_r)
    return 2.0 / v * np.sqrt(np.square(d0) + np.square(x_offset))


def ricker(t, width):
    """Ricker wavelet with peak frequency ``1/width``, unit amplitude at ``t = 0``."""
    a = (np.pi * np.asarray(t) / width) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def along_track(trajectory) -> np.ndarray:
    """Cumulative path length of each pose from the first one."""
    poses = np.asarray(trajectory, dtype=np.float64).reshape(-1, 2)
    steps = np.hypot(*np.diff(poses, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(steps)])


def straight_trajectory(n: int, dx: float, heading: float = 0.0, origin=UTM_ORIGIN) -> np.ndarray:
    k = np.arange(n, dtype=np.float64) * dx
    return np.column_stack([origin[0] + k * math.cos(heading), origin[1] + k * math.sin(heading)])


def render_bscan(scene: Sequence[Reflector], medium: MediumProfile, cfg: SimConfig,
                 trajectory) -> GprSequence:
    """Render the echo volume seen along ``trajectory``.

    Each in-cone reflector deposits a Ricker wavelet centred on depth bin
    ``round(travel_time / time_bin)`` with amplitude ``reflectivity / (1 + t)``.
    Echoes whose centre bin falls at or beyond ``D`` are dropped.
    """
    poses = np.asarray(trajectory, dtype=np.float64).reshape(-1, 2)
    if len(poses) == 0:
        raise UsageError("trajectory must contain at least one pose")
    positions = along_track(poses)
    S = len(poses)
    frames = np.zeros((S, cfg.D, cfg.C))
    if scene:
        xr = np.array([r.along_track_position for r in scene])
        d0 = np.array([r.depth for r in scene])
        amp0 = np.array([r.reflectivity for r in scene])
        reach = (d0 + 2.0 * np.array([r.radius for r in scene])) * math.tan(cfg.beamwidth)
        offsets = cfg.channel_offsets()
        bins = np.arange(cfg.D)
        for f, x_f in enumerate(positions):
            dx = x_f - xr
            visible = np.abs(dx) <= reach
            if not visible.any():
                continue
            eps = medium.at(x_f)
            # (channel, reflector)
            lateral = np.hypot(dx[visible][None, :], offsets[:, None])
            t = travel_time(lateral, d0[visible][None, :], eps, cfg.c)
            centre = np.rint(t / cfg.time_bin)
            amp = np.where(centre < cfg.D, amp0[visible][None, :] / (1.0 + t), 0.0)
            wave = ricker((bins[None, None, :] - centre[..., None]) * cfg.time_bin, cfg.wavelet_width)
            frames[f] = np.einsum("cr,crd->dc", amp, wave)
    if cfg.noise_sigma > 0:
        frames += np.random.default_rng(cfg.seed).normal(0.0, cfg.noise_sigma, frames.shape)
    return GprSequence(frames, poses)


def rms(seq: GprSequence) -> float:
    return float(np.sqrt(np.mean(seq.frames ** 2)))


INTERFERENCE_KINDS = ("gaussian", "stripe", "burst")


def add_interference(seq: GprSequence, kind: str, level: float, seed: int) -> GprSequence:
    """Corrupt a sequence with seeded interference scaled by ``level * rms(seq)``.

    ``gaussian`` adds i.i.d. noise; ``stripe`` adds constant horizontal bands at
    random depths; ``burst`` zeroes or re-randomizes random spans of frames.
    """
    if kind not in INTERFERENCE_KINDS:
        raise UsageError(f"unknown interference kind {kind!r}; expected one of {INTERFERENCE_KINDS}")
    if level < 0:
        raise UsageError(f"interference level must be >= 0, got {level}")
    out = seq.copy()
    if level == 0:
        return out
    rng = np.random.default_rng(seed)
    scale = level * rms(seq)
    S, D, C = out.frames.shape
    if kind == "gaussian":
        out.frames += rng.normal(0.0, scale, out.frames.shape)
    elif kind == "stripe":
        rows = rng.choice(D, size=max(1, D // 10), replace=False)
        out.frames[:, rows, :] += rng.normal(0.0, scale, (1, len(rows), C))
    else:
        n_spans = max(1, math.ceil(level * S / 20))
        for _ in range(n_spans):
            width = int(rng.integers(1, max(1, S // 20) + 2))
            start = int(rng.integers(0, max(1, S - width + 1)))
            span = slice(start, start + width)
            if rng.random() < 0.5:
                out.frames[span] = 0.0
            else:
                out.frames[span] = rng.normal(0.0, rms(seq), out.frames[span].shape)
    return out


def max_visible_depth(cfg: SimConfig, epsilon_r: float) -> float:
    """Deepest reflector whose apex still lands inside the ``D`` depth bins."""
    return cfg.D * cfg.time_bin * cfg.c / (2.0 * math.sqrt(epsilon_r))


def random_scene(rng: np.random.Generator, length: float, max_depth: float,
                 density: float = 1.0, margin: float = 3.0) -> list[Reflector]:
    """Poisson-distributed reflectors along ``[-margin, length + margin]``."""
    span = length + 2 * margin
    n = int(rng.poisson(density * span))
    pos = rng.uniform(-margin, length + margin, n)
    depth = rng.uniform(0.1 * max_depth, 0.95 * max_depth, n)
    radius = rng.uniform(0.0, 0.1, n)
    refl = rng.uniform(0.2, 1.0, n)
    return [Reflector(float(p), float(d), float(r), float(a))
            for p, d, r, a in sorted(zip(pos, depth, radius, refl))]


def make_dataset(scene_seed: int, n_locations: int, cfg: SimConfig, map_epsilon: float,
                 query_epsilon: float, query_noise: float, interference: str = "gaussian",
                 density: float = 1.0) -> tuple[GprSequence, GprSequence]:
    """One random scene surveyed twice along the same straight track.

    The map pass sees ``map_epsilon``; the revisit sees ``query_epsilon`` plus
    interference of the given kind at level ``query_noise``.  Poses are
    identical, so frame ``i`` of the queries corresponds to frame ``i`` of the map.
    """
    if n_locations < 2:
        raise ConfigError(f"n_locations must be >= 2, got {n_locations}")
    rng = np.random.default_rng(scene_seed)
    heading = float(rng.uniform(0.0, 2 * math.pi))
    trajectory = straight_trajectory(n_locations, cfg.dx, heading)
    length = (n_locations - 1) * cfg.dx
    scene = random_scene(rng, length, max_visible_depth(cfg, map_epsilon), density)
    map_seq = render_bscan(scene, MediumProfile(map_epsilon), cfg, trajectory)
    queries = render_bscan(scene, MediumProfile(query_epsilon), cfg, trajectory)
    if query_noise > 0:
        queries = add_interference(queries, interference, query_noise, seed=scene_seed + 1)
    return map_seq, queries

