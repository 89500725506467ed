"""Nested-expectation sampler family: g = E[X | Y] via inner Monte Carlo.

The model problem draws an outer standard normal Y and estimates the
conditional expectation of

    X = 0.02 (Y^2 - Y0^2) + (7 sqrt(2) / 25) Y Y1 - 0.0805

over fresh inner normals (Y0, Y1).  A state at total level k averages
the first N_k = N0 * 2^(gamma k) draws of a per-sample inner pool;
refinement extends the average over the next schedule chunk, reusing
every prior draw.  Fine and coarse legs of a correction share one
(Y, pool) coupling, so equal total levels produce bit-identical states
and the correction vanishes exactly.

Moments are kept as mergeable (count, mean, sum of squared deviations)
summaries, one per schedule chunk, folded left in chunk order.  Both
initialization at level k and refinement up to k fold the same chunk
summaries in the same order, which makes the state a pure function of
the pool prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError
from .refine import _COUPLING, RefinementParams, correction_sample, refinement_threshold
from .streams import Stream, derive_stream, standard_normal, stream_keys

_QUAD_COEFF = 0.02
_CROSS_COEFF = 7.0 * math.sqrt(2.0) / 25.0
_OFFSET = -0.0805

# block-sampling knobs: below _BLOCK_MIN the per-sample path wins, and
# stage working sets stay under _SLAB draw values
_BLOCK_MIN = 512
_SLAB = 1 << 22

# E[X|Y] = 0.02 Y^2 - 0.1005 crosses zero at Y^2 = 5.025
_THRESHOLD = 5.025
TRUE_PROBABILITY = float(2.0 * ndtr(-math.sqrt(_THRESHOLD)))

SIGMA_FLOOR = 1e-12


def conditional_mean(y: float) -> float:
    return _QUAD_COEFF * (y * y - 1.0) + _OFFSET


def conditional_variance(y: float) -> float:
    return 2.0 * _QUAD_COEFF**2 + _CROSS_COEFF**2 * y * y


def inner_payoff_batch(y: float, stream: Stream, count: int) -> np.ndarray:
    """Draw ``count`` independent X | Y values, two normals per draw."""
    z = stream.normals(2 * count).reshape(count, 2)
    return _QUAD_COEFF * (y * y - z[:, 0] ** 2) + _CROSS_COEFF * y * z[:, 1] + _OFFSET


def model_inner_payoff(y: float, stream: Stream) -> float:
    return float(inner_payoff_batch(y, stream, 1)[0])


def sample_sigma(n_used: int, m2: float) -> float:
    if n_used < 2:
        raise ConfigurationError(f"sample standard deviation needs >= 2 draws, have {n_used}")
    return max(math.sqrt(m2 / (n_used - 1)), SIGMA_FLOOR)


@dataclass(frozen=True)
class NestedModelSpec:
    """Inner-sample schedule N_k = N0 * 2^(gamma k) and sigma rule."""

    n0: int = 16
    gamma: float = 1.0
    sigma_constant: float | None = None

    def __post_init__(self):
        if self.n0 < 2:
            raise ConfigurationError(f"n0 must be at least 2, got {self.n0}")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.inner_count(1) <= self.n0:
            raise ConfigurationError(
                f"inner schedule must grow: n0={self.n0}, gamma={self.gamma}")
        if self.sigma_constant is not None and not self.sigma_constant > 0:
            raise ConfigurationError("constant sigma must be positive")

    def inner_count(self, k: int) -> int:
        return int(round(self.n0 * 2.0 ** (self.gamma * k)))

    def default_c(self) -> float:
        return 3.0 / math.sqrt(self.n0)


@dataclass(frozen=True)
class NestedState:
    level: int
    value: float
    sigma: float
    cost: float
    n_used: int
    y: float


def _merge_moments(a: tuple[int, float, float], b: tuple[int, float, float]):
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    delta = mb - ma
    return n, ma + delta * nb / n, sa + sb + delta * delta * na * nb / n


def _fold_rows(ma, sa, na: int, mb, sb, nb: int):
    """:func:`_merge_moments` over aligned sample rows, same float steps."""
    n = na + nb
    delta = mb - ma
    return ma + delta * nb / n, (sa + sb) + (delta * delta * na) * nb / n


class NestedCoupling:
    """Outer draw plus the lazily extended shared inner pool.

    ``prefix_moments(k)`` returns mergeable moments of the first N_k
    draws, folding cached per-chunk summaries so every caller sees the
    identical float result for a given prefix.
    """

    __slots__ = ("y", "spec", "_stream", "_draws", "_prefixes")

    def __init__(self, y: float, stream: Stream, spec: NestedModelSpec):
        self.y = y
        self.spec = spec
        self._stream = stream
        self._draws = np.empty(0)
        self._prefixes: list[tuple[int, float, float]] = []

    def _extend_to(self, n: int) -> None:
        if n > self._draws.size:
            fresh = inner_payoff_batch(self.y, self._stream, n - self._draws.size)
            self._draws = np.concatenate([self._draws, fresh])

    def prefix_moments(self, k: int) -> tuple[int, float, float]:
        while len(self._prefixes) <= k:
            j = len(self._prefixes)
            lo = self.spec.inner_count(j - 1) if j else 0
            hi = self.spec.inner_count(j)
            self._extend_to(hi)
            chunk = self._draws[lo:hi]
            mean = float(chunk.mean())
            summary = (chunk.size, mean, float(((chunk - mean) ** 2).sum()))
            self._prefixes.append(summary if not j
                                  else _merge_moments(self._prefixes[-1], summary))
        return self._prefixes[k]

    @property
    def pool_size(self) -> int:
        return self._draws.size


class NestedProblem:
    """Refinable-sampler contract for the nested model problem.

    All randomness comes from the coupling stream; the per-leg streams
    the engine supplies are ignored, which is what makes the fine and
    coarse legs read one shared pool.
    """

    def __init__(self, spec: NestedModelSpec | None = None):
        self.spec = spec if spec is not None else NestedModelSpec()

    def start_coupling(self, stream: Stream) -> NestedCoupling:
        return NestedCoupling(standard_normal(stream), stream, self.spec)

    def _state_at(self, coupling: NestedCoupling, k: int) -> NestedState:
        n, mean, m2 = coupling.prefix_moments(k)
        if self.spec.sigma_constant is not None:
            sigma = self.spec.sigma_constant
        else:
            sigma = sample_sigma(n, m2)
        return NestedState(level=k, value=mean, sigma=sigma, cost=float(n),
                           n_used=n, y=coupling.y)

    def init_state(self, coupling: NestedCoupling, level: int, stream: Stream) -> NestedState:
        return self._state_at(coupling, level)

    def refine_state(self, state: NestedState, coupling: NestedCoupling,
                     stream: Stream) -> NestedState:
        return self._state_at(coupling, state.level + 1)

    def sample_block(self, ell: int, ell0: int, params: RefinementParams,
                     seed: int, count: int, *, phase: int, start_index: int,
                     stats) -> None:
        """Accumulate ``count`` correction samples into ``stats`` in bulk.

        Yields aggregates bit-identical to drawing the same sample
        addresses one at a time: identical words, payoffs, moment folds
        and refinement decisions, just evaluated a block of samples per
        stage.  Small requests take the per-sample path, where compiled
        kernels cannot pay for their dispatch.
        """
        if ell < ell0:
            raise ValueError(f"correction level {ell} below base level {ell0}")
        if count <= 0:
            return
        if count < _BLOCK_MIN:
            for i in range(start_index, start_index + count):
                sample = correction_sample(self, ell, ell0, params,
                                           derive_stream(seed, (phase, ell, i)))
                stats.add(sample.delta_h, sample.cost)
            return
        from . import _kernels  # deferred: the JIT import outweighs small batches

        batch = max(_BLOCK_MIN, _SLAB // self.spec.inner_count(ell))
        for lo in range(0, count, batch):
            self._block_batch(_kernels, ell, ell0, params, seed, phase,
                              start_index + lo, min(count - lo, batch), stats)

    def _block_batch(self, kernels, ell, ell0, params, seed, phase,
                     first, size, stats) -> None:
        spec = self.spec
        indices = np.arange(first, first + size, dtype=np.uint64)
        keys = stream_keys(seed, (phase, ell), indices, (_COUPLING,))
        ys = np.empty((size, 1))
        kernels.fill_normals(keys, 0, ys)
        ys = ys[:, 0]

        # prefix moments of chunks 0..ell for every sample, keeping the
        # level-(ell-1) prefix for the coarse leg and the chunk-ell
        # moments its first refinement would recompute
        mean = m2 = None
        coarse_mean = coarse_m2 = chunk_ell = None
        for j in range(ell + 1):
            cm, c2 = self._chunk_moments(kernels, keys, ys, j)
            if j == 0:
                mean, m2 = cm, c2
            else:
                mean, m2 = _fold_rows(mean, m2, spec.inner_count(j - 1),
                                      cm, c2, spec.inner_count(j) - spec.inner_count(j - 1))
            if j == ell - 1:
                coarse_mean, coarse_m2 = mean, m2
            if j == ell:
                chunk_ell = (cm, c2)

        fine_value, fine_pool = self._leg(kernels, keys, ys, params, ell,
                                          mean, m2, None)
        if np.isnan(fine_value).any():
            raise ValueError("heaviside of NaN: sampler produced an invalid value")
        h_fine = (fine_value >= 0.0).astype(np.int64)
        if ell == ell0:
            delta_h = h_fine
            cost = fine_pool.sum()
        else:
            coarse_value, coarse_pool = self._leg(kernels, keys, ys, params, ell - 1,
                                                  coarse_mean, coarse_m2, chunk_ell)
            if np.isnan(coarse_value).any():
                raise ValueError("heaviside of NaN: sampler produced an invalid value")
            delta_h = h_fine - (coarse_value >= 0.0).astype(np.int64)
            cost = fine_pool.sum() + coarse_pool.sum()

        stats.count += size
        stats.sum += float(delta_h.sum())
        stats.sum_sq += float((delta_h * delta_h).sum())
        stats.cost_sum += float(cost)

    def _chunk_moments(self, kernels, keys, ys, j: int):
        """Per-sample mean and squared deviation of inner chunk ``j``."""
        lo = self.spec.inner_count(j - 1) if j else 0
        width = self.spec.inner_count(j) - lo
        first_word = 1 + 2 * lo  # word 0 is the outer draw, two words per inner draw
        size = keys.shape[0]
        mean = np.empty(size)
        m2 = np.empty(size)
        step = max(1, _SLAB // width)
        for r0 in range(0, size, step):
            r1 = min(size, r0 + step)
            rows = np.empty((r1 - r0, width))
            kernels.fill_pair_quadratic(keys[r0:r1], first_word, ys[r0:r1],
                                        _QUAD_COEFF, _CROSS_COEFF, _OFFSET, rows)
            rm = rows.mean(axis=1)
            mean[r0:r1] = rm
            m2[r0:r1] = ((rows - rm[:, None]) ** 2).sum(axis=1)
        return mean, m2

    def _sigma_rows(self, n_used: int, m2) -> np.ndarray:
        if self.spec.sigma_constant is not None:
            return np.full(m2.shape, self.spec.sigma_constant)
        return np.maximum(np.sqrt(m2 / (n_used - 1)), SIGMA_FLOOR)

    def _leg(self, kernels, keys, ys, params, leg_level, mean0, m2_0, first_chunk):
        """Vectorized refinement run; returns final values and pool sizes."""
        spec = self.spec
        value = mean0.copy()
        m2 = m2_0.copy()
        sigma = self._sigma_rows(spec.inner_count(leg_level), m2)
        pool = np.full(keys.shape[0], spec.inner_count(leg_level), dtype=np.int64)
        active = np.arange(keys.shape[0])
        for eta in range(params.depth_cap(leg_level)):
            delta = value[active] / sigma[active]
            if np.isnan(delta).any():
                raise ValueError(f"NaN delta at level {leg_level + eta}")
            active = active[np.abs(delta) < refinement_threshold(leg_level, eta, params)]
            if active.size == 0:
                break
            k = leg_level + eta + 1
            if eta == 0 and first_chunk is not None:
                cm, c2 = first_chunk[0][active], first_chunk[1][active]
            else:
                cm, c2 = self._chunk_moments(kernels, keys[active], ys[active], k)
            na = spec.inner_count(k - 1)
            value[active], m2[active] = _fold_rows(value[active], m2[active], na,
                                                   cm, c2, spec.inner_count(k) - na)
            sigma[active] = self._sigma_rows(spec.inner_count(k), m2[active])
            pool[active] = spec.inner_count(k)
        return value, pool
