"""Artificial sampling problem whose target g is observable per sample.

The latent value is g = -mu + xi with xi standard normal, so
P(g > 0) = Phi(-mu) is known in closed form.  Level-k approximations
come from the deterministic error model

    g_k = g + 2^{-k gamma/2} (2^{-k gamma/2} + zeta^2 - 1)

with a single zeta shared by the fine leg, the coarse leg and every
refinement inside one correction sample.  Sampling g_k costs an
artificial 2^{gamma k} units; refining from k to k+1 is charged the
difference of the level costs, so a finished leg has paid exactly the
cost of its final level.

The normalized error (g_k - g) / (sigma 2^{-k gamma/2}) has mean
2^{-k gamma/2} / sigma but a left tail bounded below by -1/sigma:
conditional on exceeding 1/sigma in magnitude, its sign is always +1.
One-sided errors of this kind are the regime where adaptive refinement
cannot improve the weak-error rate, which is what this problem exists
to demonstrate.  Because g itself is observable, the per-sample
Heaviside error H(g) - H(g_{l+eta}) can be measured directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import ndtr, ndtri

from .errors import ConfigurationError
from .refine import (
    _COARSE,
    _COUPLING,
    _FINE,
    CorrectionSample,
    RefinementParams,
    heaviside,
    paired_correction,
)
from .streams import Stream

DEFAULT_SIGMA = math.sqrt(3.0)


def mu_for_target(p: float) -> float:
    """Offset mu such that P(-mu + xi > 0) = p for standard normal xi."""
    if not 0.0 < p < 1.0:
        raise ConfigurationError(f"target probability must lie in (0, 1), got {p}")
    return float(-ndtri(p))


@dataclass(frozen=True)
class SyntheticSpec:
    """Error-model parameters; sigma is the constant scale fed to the
    refinement rule (the model itself has no sampling noise per level)."""

    mu: float
    gamma: float = 1.0
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ConfigurationError(f"mu must be positive, got {self.mu}")
        if not self.gamma > 0.0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if not self.sigma > 0.0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")

    @property
    def true_probability(self) -> float:
        return float(ndtr(-self.mu))

    def level_cost(self, k: int) -> float:
        return 2.0 ** (self.gamma * k)


def level_value(spec: SyntheticSpec, g: float, zeta: float, k: int) -> float:
    """g_k for the latent pair (g, zeta); deterministic, no fresh noise."""
    scale = 2.0 ** (-0.5 * spec.gamma * k)
    return g + scale * (scale + zeta * zeta - 1.0)


@dataclass(frozen=True)
class SyntheticCoupling:
    g: float
    zeta: float


@dataclass(frozen=True)
class SyntheticState:
    level: int
    value: float
    sigma: float
    cost: float
    g: float


class SyntheticProblem:
    """Correction sampler over the closed-form error model."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec

    def start_coupling(self, stream: Stream) -> SyntheticCoupling:
        xi, zeta = stream.normals(2)
        return SyntheticCoupling(g=-self.spec.mu + float(xi), zeta=float(zeta))

    def init_state(self, coupling: SyntheticCoupling, level: int, stream: Stream) -> SyntheticState:
        return self._state(coupling, level)

    def refine_state(self, state: SyntheticState, coupling: SyntheticCoupling,
                     stream: Stream) -> SyntheticState:
        return self._state(coupling, state.level + 1)

    def _state(self, coupling: SyntheticCoupling, k: int) -> SyntheticState:
        # cumulative cost telescopes, so a leg at level k has paid 2^{gamma k}
        return SyntheticState(
            level=k,
            value=level_value(self.spec, coupling.g, coupling.zeta, k),
            sigma=self.spec.sigma,
            cost=self.spec.level_cost(k),
            g=coupling.g,
        )


@dataclass(frozen=True)
class SyntheticCorrection(CorrectionSample):
    """Correction sample plus the observable H(g) of its latent draw."""

    latent_h: int


def synthetic_correction(
    spec: SyntheticSpec,
    ell: int,
    ell0: int,
    params: RefinementParams,
    stream: Stream,
) -> SyntheticCorrection:
    """One correction draw that also reports H of the exact latent g.

    Consumes the same sub-stream roles as the generic engine, so the
    delta_h, cost and depth fields match ``correction_sample`` bit for
    bit on the same stream.
    """
    if ell < ell0:
        raise ValueError(f"correction level {ell} below base level {ell0}")
    problem = SyntheticProblem(spec)
    coupling = problem.start_coupling(stream.child(_COUPLING))
    base = paired_correction(
        problem, coupling, ell, ell0, params,
        stream.child(_FINE), stream.child(_COARSE),
    )
    return SyntheticCorrection(
        base.delta_h, base.cost, base.eta_fine, base.eta_coarse,
        latent_h=heaviside(coupling.g),
    )
