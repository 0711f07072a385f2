"""Seeded samplers shared by the verifier and the backstepping checks.

Arrays follow the compiled-expression layout: one row per coordinate, one
column per sample.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import get_settings
from .core import Box, ComparisonFunction, box_corners
from .errors import InversionError, SamplingError

logger = logging.getLogger(__name__)

EXTREME_SHARE = 0.3
SURFACE_SHARE = 0.3
MAX_BOX_DOUBLINGS = 20


def point_streams(seed: int, count: int) -> list[np.random.Generator]:
    """Independent generators, one per grid point, regardless of processing order."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def run_points(task: Callable, points: np.ndarray, seed: int) -> list:
    """task(point, rng) for every row of `points`, threaded up to the configured worker count."""
    streams = point_streams(seed, len(points))
    workers = get_settings().worker_count()
    if workers <= 1 or len(points) < 2:
        return [task(p, rng) for p, rng in zip(points, streams)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, points, streams))


def margin_tolerance(scale: np.ndarray | float) -> np.ndarray | float:
    """Slack below zero that a margin may reach before it counts as a violation."""
    cfg = get_settings()
    return cfg.margin_atol + cfg.margin_rtol * np.abs(scale)


def within_level(values: np.ndarray, level: float) -> np.ndarray:
    return values <= level + margin_tolerance(level)


def generalized_inverse(fn: ComparisonFunction, level: float) -> float:
    """sup{s >= 0 : fn(s) <= level}; infinite when fn never exceeds the level."""
    try:
        return fn.inverse(level)
    except InversionError:
        if fn(0.0) > level:
            raise
        return math.inf


def sample_box(rng: np.random.Generator, half_width: float, dim: int, count: int) -> np.ndarray:
    """Uniform draws in [-hw, hw]^dim, a share of them with coordinates pushed onto faces."""
    draws = rng.uniform(-half_width, half_width, size=(dim, count))
    extreme = rng.random(count) < EXTREME_SHARE
    if extreme.any():
        push = rng.random((dim, count)) < 0.5
        push &= extreme[None, :]
        signs = np.where(rng.random((dim, count)) < 0.5, -1.0, 1.0)
        draws = np.where(push, signs * half_width, draws)
    return draws


def sample_ball(
    rng: np.random.Generator,
    radius: float,
    box: Box,
    count: int,
) -> np.ndarray:
    """Draws with |v| <= radius (uniform in the ball, a share on its sphere), clipped into `box`.

    Clipping towards a box containing 0 never increases the norm.
    """
    dim = len(box)
    if dim == 0:
        return np.zeros((0, count))
    lo = np.array([b[0] for b in box])[:, None]
    hi = np.array([b[1] for b in box])[:, None]
    if math.isinf(radius):
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise SamplingError("unbounded input ball inside an unbounded input box")
        return lo + (hi - lo) * rng.random((dim, count))
    directions = rng.standard_normal((dim, count))
    norms = np.linalg.norm(directions, axis=0)
    norms[norms == 0] = 1.0
    directions /= norms
    radii = radius * rng.random(count) ** (1.0 / dim)
    radii[rng.random(count) < SURFACE_SHARE] = radius
    return np.clip(directions * radii, lo, hi)


def sample_disturbances(rng: np.random.Generator, box: Box, count: int) -> np.ndarray:
    """All corners of D first, then uniform draws, `count` columns in total.

    Only the first `count` corners are kept when D has more corners than that.
    """
    dim = len(box)
    if dim == 0:
        return np.zeros((0, count))
    corners = box_corners(box)
    if corners.shape[1] >= count:
        return corners[:, :count]
    lo = np.array([b[0] for b in box])[:, None]
    hi = np.array([b[1] for b in box])[:, None]
    uniform = lo + (hi - lo) * rng.random((dim, count - corners.shape[1]))
    return np.concatenate([corners, uniform], axis=1)


@dataclass
class SublevelSampler:
    """Rejection sampler for {z : a(V(z)) <= level}, V = max_j V_j.

    The search box starts at half-width a2^-1(a^-1(level)), or at `start_half_width`
    without a2, and is doubled while points just outside it still land in the set.
    """

    v_max: Callable[[np.ndarray], np.ndarray]
    a: ComparisonFunction
    a2: Optional[ComparisonFunction]
    n: int
    level: float
    start_half_width: float = 1.0
    half_width: float = field(init=False)
    doublings: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        inner = generalized_inverse(self.a, self.level)
        if math.isinf(inner):
            raise SamplingError(f"a stays below {self.level}; the sublevel set is unbounded")
        if self.a2 is None:
            self.half_width = self.start_half_width if inner > 0 else 0.0
        else:
            self.half_width = generalized_inverse(self.a2, inner)
        if math.isinf(self.half_width):
            raise SamplingError("a2 is bounded; cannot bound the sublevel set")
        while self.half_width > 0 and self._escapes():
            if self.doublings >= MAX_BOX_DOUBLINGS:
                raise SamplingError("sublevel set keeps escaping its sampling box")
            self.half_width *= 2.0
            self.doublings += 1
        if self.doublings:
            logger.debug("sublevel box doubled %d times (level=%g)", self.doublings, self.level)

    def contains(self, z: np.ndarray) -> np.ndarray:
        return within_level(self.a.batch(self.v_max(z)), self.level)

    def _escapes(self) -> bool:
        hw = self.half_width * 1.01
        outside = [np.sign(box_corners(tuple((-1.0, 1.0) for _ in range(self.n)))) * hw]
        faces = np.concatenate([np.eye(self.n), -np.eye(self.n)], axis=1) * hw
        outside.append(faces)
        return bool(self.contains(np.concatenate(outside, axis=1)).any())

    def draw(
        self,
        rng: np.random.Generator,
        count: int,
        max_factor: int = 10,
        accept: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> np.ndarray:
        """Up to `count` accepted points; fewer when rejection runs out of attempts.

        `accept` narrows the set further (for instance to a B set around g(x)).
        """
        if self.half_width == 0:
            return np.zeros((self.n, 1))
        accepted: list[np.ndarray] = []
        total = 0
        for _ in range(max_factor):
            batch = sample_box(rng, self.half_width, self.n, count)
            mask = self.contains(batch)
            if accept is not None:
                mask &= accept(batch)
            keep = batch[:, mask]
            accepted.append(keep)
            total += keep.shape[1]
            if total >= count:
                break
        points = np.concatenate(accepted, axis=1)
        return points[:, :count]
