"""Adaptive refinement of level-``ell`` samples and multilevel corrections.

A sample of the level-``ell`` approximation ``g_ell`` whose sign is
uncertain (``|g/sigma|`` small) is refined to higher levels until its
sign is trusted or a refinement budget is exhausted.  The loop
implemented by :func:`adaptive_sample` refines while

    |g_{ell+eta} / sigma_{ell+eta}| < c * 2^{gamma (theta ell (1-r) - eta) / r}

and ``eta < ceil(theta * ell)``.  Multilevel correction samples
``H(fine) - H(coarse)`` pair a refinement run at level ``ell`` with one
at ``ell - 1`` sharing the same latent randomness, so that corrections
vanish whenever both runs land on the same total level.

Problems plug in through three methods:

``start_coupling(stream)``
    Draw the latent randomness shared by the fine and coarse runs of
    one correction sample (an inner-sample pool, a Brownian path, ...).

``init_state(coupling, level, stream)``
    Produce the level-``level`` state: an object with attributes
    ``level``, ``value`` (g), ``sigma`` (> 0) and ``cost``.

``refine_state(state, coupling, stream)``
    Return the state one level deeper, adding its extra cost.

The ``stream`` handed to the two run methods is a per-run sub-stream;
the shipped problems draw everything from the coupling object and
ignore it, but problems needing run-local randomness may consume it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Protocol

from .streams import Stream

_COUPLING, _FINE, _COARSE = 0, 1, 2


@dataclass(frozen=True)
class RefinementParams:
    """Parameters of the refinement rule.

    r        refinement strictness (> 1); larger r refines less eagerly.
    theta    refinement range multiplier; depth at level ell is capped
             at ceil(theta * ell).
    c        confidence constant scaling the threshold.
    gamma    work growth rate of the level hierarchy (must match the
             problem's own gamma).
    adaptive with False the loop is skipped entirely (eta == 0 always).
    """

    r: float = 1.95
    theta: float = 1.0
    c: float = 1.0
    gamma: float = 1.0
    adaptive: bool = True

    def __post_init__(self):
        if not self.r > 1.0:
            raise ValueError(f"r must exceed 1, got {self.r}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.c > 0.0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.theta < 0.0 or (self.adaptive and self.theta == 0.0):
            raise ValueError(f"theta must be positive when adaptive, got {self.theta}")

    def depth_cap(self, ell: int) -> int:
        return math.ceil(self.theta * ell) if self.adaptive else 0


@dataclass(frozen=True)
class CorrectionSample:
    """One draw of H(fine) - H(coarse) with its work and depths."""

    delta_h: int
    cost: float
    eta_fine: int
    eta_coarse: int


class RefinableState(Protocol):
    level: int
    value: float
    sigma: float
    cost: float


class RefinableProblem(Protocol):
    def start_coupling(self, stream: Stream) -> Any: ...

    def init_state(self, coupling: Any, level: int, stream: Stream) -> RefinableState: ...

    def refine_state(self, state: Any, coupling: Any, stream: Stream) -> RefinableState: ...


def heaviside(x: float) -> int:
    """1 if x >= 0 else 0; NaN means a broken sampler and is an error."""
    if math.isnan(x):
        raise ValueError("heaviside of NaN: sampler produced an invalid value")
    return 1 if x >= 0 else 0


def refinement_threshold(ell: int, eta: int, params: RefinementParams) -> float:
    """Trust threshold on |delta| at refinement depth eta of a level-ell sample."""
    exponent = params.gamma * (params.theta * ell * (1.0 - params.r) - eta) / params.r
    return params.c * 2.0**exponent


def _refinement_run(
    problem: RefinableProblem,
    coupling: Any,
    ell: int,
    params: RefinementParams,
    stream: Stream,
    trace: list | None = None,
) -> tuple[RefinableState, int]:
    """Run the refinement loop at level ``ell``; return (state, eta)."""
    state = problem.init_state(coupling, ell, stream)
    eta = 0
    cap = params.depth_cap(ell)
    while eta < cap:
        delta = state.value / state.sigma
        if math.isnan(delta):
            raise ValueError(f"NaN delta at level {state.level}")
        threshold = refinement_threshold(ell, eta, params)
        if trace is not None:
            trace.append((eta, abs(delta), threshold))
        if abs(delta) >= threshold:
            break
        state = problem.refine_state(state, coupling, stream)
        eta += 1
    return state, eta


def adaptive_sample(
    problem: RefinableProblem,
    ell: int,
    params: RefinementParams,
    stream: Stream,
    trace: list | None = None,
) -> RefinableState:
    """One adaptively refined sample of g at level ``ell``.

    ``trace``, when given, collects ``(eta, |delta|, threshold)`` for
    every stopping-rule evaluation (exit-condition instrumentation).
    """
    coupling = problem.start_coupling(stream.child(_COUPLING))
    state, _ = _refinement_run(problem, coupling, ell, params, stream.child(_FINE), trace)
    return state


def paired_correction(
    problem: RefinableProblem,
    coupling: Any,
    ell: int,
    ell0: int,
    params: RefinementParams,
    fine_stream: Stream,
    coarse_stream: Stream,
) -> CorrectionSample:
    """Correction sample on an externally constructed coupling object."""
    fine, eta_fine = _refinement_run(problem, coupling, ell, params, fine_stream)
    if ell == ell0:
        return CorrectionSample(heaviside(fine.value), fine.cost, eta_fine, 0)
    coarse, eta_coarse = _refinement_run(problem, coupling, ell - 1, params, coarse_stream)
    delta_h = heaviside(fine.value) - heaviside(coarse.value)
    return CorrectionSample(delta_h, fine.cost + coarse.cost, eta_fine, eta_coarse)


def correction_sample(
    problem: RefinableProblem,
    ell: int,
    ell0: int,
    params: RefinementParams,
    stream: Stream,
) -> CorrectionSample:
    """One draw of the level-``ell`` multilevel correction.

    At the base level (``ell == ell0``) this is H of a single refined
    sample; above it, fine and coarse refinement runs share the latent
    randomness of one coupling object but consume disjoint sub-streams.
    """
    if ell < ell0:
        raise ValueError(f"correction level {ell} below base level {ell0}")
    coupling = problem.start_coupling(stream.child(_COUPLING))
    return paired_correction(
        problem, coupling, ell, ell0, params,
        stream.child(_FINE), stream.child(_COARSE),
    )
