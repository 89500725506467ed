"""Digital options on correlated geometric Brownian motions.

A basket of d GBMs driven by the factor model

    W_i(t) = rho W_com(t) + sqrt(1 - rho^2) W_i_ind(t)

is discretized by Euler-Maruyama or (d = 1) Milstein on 2^(gamma l)
steps at level l, and the estimand is P(mean_i S_i(T) > K).  Adaptive
refinement halves the time grid through a Brownian bridge, so a refined
path extends, rather than resamples, its coarser self.  The fine and
coarse legs of a correction share one ladder of paths: each resolution
is materialized once and reused, coarser views being the exact parents
of finer ones.  sigma is the constant d^(-1/2).

For d = 1 the combined driving motion is a standard Brownian motion
whatever rho is, so only one factor array is stored; d > 1 keeps the
common factor plus d idiosyncratic ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import CalibrationError, ConfigurationError
from .streams import Stream

CALIBRATION_PATHS = 10**6
CALIBRATION_STEPS = 128
CALIBRATION_CHUNK = 8192


def _as_tuple(x, d: int) -> tuple[float, ...]:
    if np.isscalar(x):
        return (float(x),) * d
    out = tuple(float(v) for v in x)
    return out


@dataclass(frozen=True)
class GbmSpec:
    d: int = 1
    a: tuple[float, ...] = 0.05
    b: tuple[float, ...] = 0.4
    s0: tuple[float, ...] = 1.0
    rho: float = 0.0
    strike: float = 1.0
    t_final: float = 1.0
    scheme: str = "euler"
    gamma: int = 1

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError(f"dimension must be >= 1, got {self.d}")
        for name in ("a", "b", "s0"):
            object.__setattr__(self, name, _as_tuple(getattr(self, name), self.d))
            if len(getattr(self, name)) != self.d:
                raise ConfigurationError(f"{name} needs {self.d} entries")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0,1], got {self.rho}")
        if self.scheme not in ("euler", "milstein"):
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "milstein" and self.d != 1:
            raise ConfigurationError("milstein is supported for d = 1 only")
        if not (isinstance(self.gamma, int) and self.gamma >= 1):
            raise ConfigurationError(f"gamma must be a positive integer, got {self.gamma}")
        if not self.strike > 0:
            raise ConfigurationError(f"strike must be positive, got {self.strike}")
        if not self.t_final > 0:
            raise ConfigurationError(f"maturity must be positive, got {self.t_final}")

    @property
    def n_factors(self) -> int:
        return 1 if self.d == 1 else self.d + 1

    def steps(self, level: int) -> int:
        return 1 << (self.gamma * level)

    def with_strike(self, strike: float) -> "GbmSpec":
        return GbmSpec(self.d, self.a, self.b, self.s0, self.rho, strike,
                       self.t_final, self.scheme, self.gamma)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    level: int
    step: float
    halvings_per_level: int
    increments: np.ndarray  # shape (n_factors, n_steps)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]


def brownian_init(spec: GbmSpec, ell: int, stream: Stream) -> BrownianPath:
    steps = spec.steps(ell)
    h = spec.t_final / steps
    z = stream.normals(spec.n_factors * steps).reshape(spec.n_factors, steps)
    return BrownianPath(ell, h, spec.gamma, math.sqrt(h) * z)


def brownian_refine(path: BrownianPath, stream: Stream) -> BrownianPath:
    """Split every increment by the midpoint bridge, one level finer."""
    inc, h = path.increments, path.step
    for _ in range(path.halvings_per_level):
        f, n = inc.shape
        zeta = stream.normals(f * n).reshape(f, n)
        half = 0.5 * inc
        spread = math.sqrt(h / 4.0) * zeta
        finer = np.empty((f, 2 * n))
        finer[:, 0::2] = half + spread
        finer[:, 1::2] = half - spread
        inc, h = finer, h / 2.0
    return BrownianPath(path.level + 1, h, path.halvings_per_level, inc)


def coarse_from_fine(path: BrownianPath) -> BrownianPath:
    group = 1 << path.halvings_per_level
    f, n = path.increments.shape
    if n < group:
        raise ConfigurationError(f"cannot coarsen a {n}-step path by a factor {group}")
    inc = path.increments.reshape(f, n // group, group).sum(axis=2)
    return BrownianPath(path.level - 1, path.step * group, path.halvings_per_level, inc)


def _asset_increments(spec: GbmSpec, increments: np.ndarray) -> np.ndarray:
    """Per-asset Brownian increments from the factor arrays (last axis = time)."""
    if spec.d == 1:
        return increments
    common = increments[..., :1, :]
    own = increments[..., 1:, :]
    return spec.rho * common + math.sqrt(1.0 - spec.rho**2) * own


def _growth_factors(spec: GbmSpec, dw: np.ndarray, h: float) -> np.ndarray:
    a = np.asarray(spec.a)[..., :, None]
    b = np.asarray(spec.b)[..., :, None]
    growth = 1.0 + a * h + b * dw
    if spec.scheme == "milstein":
        growth = growth + 0.5 * b * b * (dw * dw - h)
    return growth


def evolve(spec: GbmSpec, path: BrownianPath) -> np.ndarray:
    """Terminal prices S(T) for all d assets on the given path."""
    dw = _asset_increments(spec, path.increments)
    growth = _growth_factors(spec, dw, path.step)
    return np.asarray(spec.s0) * np.prod(growth, axis=-1)


class SharedPath:
    """Ladder of one driving path at every touched resolution.

    The first request materializes the path; finer levels extend it by
    the bridge (consuming this coupling's stream), coarser levels are
    group sums.  Because bridge children are generated from their
    stored parent, coarsening a refined path returns the parent
    bit-for-bit, and both correction legs read identical arrays
    whenever their total levels coincide.
    """

    __slots__ = ("spec", "stream", "levels")

    def __init__(self, spec: GbmSpec, stream: Stream):
        self.spec = spec
        self.stream = stream
        self.levels: dict[int, BrownianPath] = {}

    def at_level(self, k: int) -> BrownianPath:
        if k in self.levels:
            return self.levels[k]
        if not self.levels:
            self.levels[k] = brownian_init(self.spec, k, self.stream)
        elif k > max(self.levels):
            path = self.levels[max(self.levels)]
            for j in range(path.level + 1, k + 1):
                path = brownian_refine(path, self.stream)
                self.levels[j] = path
        else:
            path = self.levels[min(self.levels)]
            for j in range(path.level - 1, k - 1, -1):
                path = coarse_from_fine(path)
                self.levels[j] = path
        return self.levels[k]


@dataclass(frozen=True)
class SdeState:
    level: int
    value: float
    sigma: float
    cost: float
    terminal: tuple[float, ...]


class GbmDigitalProblem:
    """Refinable-sampler contract for the basket digital option.

    All randomness flows through the coupling stream; per-leg streams
    are ignored.  Work counts d SDE steps per evolution, accumulated
    over every (re-)evolution of a leg.
    """

    def __init__(self, spec: GbmSpec):
        self.spec = spec
        self._sigma = spec.d**-0.5

    def start_coupling(self, stream: Stream) -> SharedPath:
        return SharedPath(self.spec, stream)

    def _state(self, coupling: SharedPath, k: int, prev_cost: float) -> SdeState:
        path = coupling.at_level(k)
        s = evolve(self.spec, path)
        return SdeState(
            level=k,
            value=float(s.mean()) - self.spec.strike,
            sigma=self._sigma,
            cost=prev_cost + self.spec.d * path.n_steps,
            terminal=tuple(float(v) for v in s),
        )

    def init_state(self, coupling: SharedPath, level: int, stream: Stream) -> SdeState:
        return self._state(coupling, level, 0.0)

    def refine_state(self, state: SdeState, coupling: SharedPath, stream: Stream) -> SdeState:
        return self._state(coupling, state.level + 1, state.cost)


def digital_true_value(spec: GbmSpec) -> float:
    """P(S(T) > K) for the 1-d lognormal terminal price, in closed form."""
    if spec.d != 1:
        raise ConfigurationError("closed form requires d = 1")
    a, b, s0 = spec.a[0], spec.b[0], spec.s0[0]
    if not b > 0:
        raise ConfigurationError("closed form requires b > 0")
    z = (math.log(s0 / spec.strike) + (a - 0.5 * b * b) * spec.t_final) \
        / (b * math.sqrt(spec.t_final))
    return float(ndtr(z))


def terminal_basket_means(spec: GbmSpec, stream: Stream, n_paths: int,
                          n_steps: int = CALIBRATION_STEPS,
                          chunk: int = CALIBRATION_CHUNK) -> np.ndarray:
    """Monte Carlo draws of mean_i S_i(T) on a fixed fine grid.

    Chunking is a fixed constant so the draw sequence, and therefore
    the result, depends only on (spec, stream state, n_paths, n_steps).
    """
    h = spec.t_final / n_steps
    f = spec.n_factors
    s0 = np.asarray(spec.s0)
    out = np.empty(n_paths)
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        z = stream.normals(m * f * n_steps).reshape(m, f, n_steps)
        dw = _asset_increments(spec, math.sqrt(h) * z)
        growth = _growth_factors(spec, dw, h)
        out[done:done + m] = (s0 * np.prod(growth, axis=2)).mean(axis=1)
        done += m
    return out


def calibrate_strike(spec: GbmSpec, target_p: float, stream: Stream,
                     n_paths: int = CALIBRATION_PATHS,
                     tol: float = 5e-4) -> float:
    """Strike K with P(mean_i S_i(T) > K) = target_p.

    d = 1 inverts the closed form; d > 1 bisects the empirical tail
    probability of a fixed high-accuracy sample until within ``tol``.
    """
    if not 0.0 < target_p < 1.0:
        raise ConfigurationError(f"target probability must be in (0,1), got {target_p}")
    if spec.d == 1:
        a, b, s0 = spec.a[0], spec.b[0], spec.s0[0]
        if not b > 0:
            raise ConfigurationError("closed-form calibration requires b > 0")
        t = spec.t_final
        return float(s0 * math.exp((a - 0.5 * b * b) * t - b * math.sqrt(t) * ndtri(target_p)))

    means = np.sort(terminal_basket_means(spec, stream, n_paths))

    def p_hat(k: float) -> float:
        return (means.size - np.searchsorted(means, k, side="right")) / means.size

    lo, hi = float(means[0]), float(means[-1])
    if target_p >= p_hat(lo):
        raise CalibrationError(
            f"target {target_p} outside empirical range: P(>{lo:.6g}) = {p_hat(lo):.6g}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        p = p_hat(mid)
        if abs(p - target_p) <= tol:
            return mid
        if p > target_p:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"bisection stalled: bracket [{lo:.6g}, {hi:.6g}], target {target_p}")


def sample_gbm_parameters(d: int, rho: float, stream: Stream, *, strike: float = 1.0,
                          scheme: str = "euler", gamma: int = 1) -> GbmSpec:
    """Draw (a, b, s0) uniformly from the model's parameter box."""
    a = 0.05 + 0.10 * stream.uniforms(d)
    b = 0.01 + 0.39 * stream.uniforms(d)
    s0 = 0.9 + 0.2 * stream.uniforms(d)
    return GbmSpec(d=d, a=tuple(a), b=tuple(b), s0=tuple(s0), rho=rho,
                   strike=strike, scheme=scheme, gamma=gamma)


@dataclass(frozen=True)
class Halfspace:
    """Region {x : normal . x >= offset}."""

    normal: tuple[float, ...]
    offset: float = 0.0

    def __post_init__(self):
        if not any(v != 0.0 for v in self.normal):
            raise ConfigurationError("halfspace normal must be nonzero")


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError(f"ball radius must be positive, got {self.radius}")


def signed_distance(point, region) -> float:
    """Distance to the region boundary, positive inside, negative outside."""
    g = np.asarray(point, dtype=float)
    if isinstance(region, Halfspace):
        n = np.asarray(region.normal, dtype=float)
        return float((n @ g - region.offset) / np.linalg.norm(n))
    if isinstance(region, Ball):
        return float(region.radius - np.linalg.norm(g - np.asarray(region.center, dtype=float)))
    raise ConfigurationError(f"unknown region {type(region).__name__}")
