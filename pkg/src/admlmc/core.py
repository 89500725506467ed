"""Level-agnostic multilevel Monte Carlo engine.

Estimates P(g > 0) = E[H(g)] by the telescoping sum of correction
samples produced by :mod:`admlmc.refine`: per-level running statistics,
the work-optimal sample allocation, rate fitting on level data, bias
extrapolation, a continuation loop that grows levels and samples until
the target mean-square error splits are met, starting-level selection,
and the closed-form parameter rules (theta, admissible r, complexity
regime) for configuring the refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigurationError, FitError
from .refine import RefinementParams, RefinableProblem, correction_sample
from .streams import derive_stream

# stream-path phases keeping sampling contexts disjoint under one seed
PHASE_RUN = 0
PHASE_PILOT = 1
PHASE_DIAG = 2
PHASE_CALIBRATE = 3
PHASE_PARAMS = 4
PHASE_PILOT_BASE = 5

_LN2 = math.log(2.0)


@dataclass
class LevelStats:
    """Running aggregates of correction samples at one level.

    Merging is plain addition of sums, so batches may be accumulated in
    any grouping; mean, variance and mean work are derived views.
    """

    level: int
    count: int = 0
    sum: float = 0.0
    sum_sq: float = 0.0
    cost_sum: float = 0.0

    def add(self, delta_h: int, cost: float) -> None:
        self.count += 1
        self.sum += delta_h
        self.sum_sq += delta_h * delta_h
        self.cost_sum += cost

    def merge(self, other: "LevelStats") -> "LevelStats":
        if other.level != self.level:
            raise ValueError(f"cannot merge level {other.level} into {self.level}")
        return LevelStats(
            self.level,
            self.count + other.count,
            self.sum + other.sum,
            self.sum_sq + other.sum_sq,
            self.cost_sum + other.cost_sum,
        )

    @property
    def mean(self) -> float:
        return self.sum / self.count if self.count else 0.0

    @property
    def variance(self) -> float:
        """Unbiased sample variance, clamped to be non-negative."""
        if self.count < 2:
            return 0.0
        return max(0.0, (self.sum_sq - self.sum * self.mean) / (self.count - 1))

    @property
    def mean_cost(self) -> float:
        return self.cost_sum / self.count if self.count else 0.0

    def mean_se(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count else math.inf


@dataclass(frozen=True)
class RateFit:
    """Fitted decay/growth rates of |E_l|, V_l, W_l with 2^intercept constants."""

    alpha_ind: float
    beta_ind: float
    gamma: float
    c_e: float
    c_v: float
    c_w: float
    alpha_se: float
    beta_se: float
    gamma_se: float
    levels: tuple[int, ...]


@dataclass(frozen=True)
class MlmcConfig:
    epsilon: float = 1e-2
    start_level: int = 0
    max_level: int = 20
    m_min: int = 32
    phi: float = 0.5
    pilot: int = 400
    theory_alpha: float | None = None
    theory_beta: float | None = None
    theory_gamma: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.phi < 1:
            raise ConfigurationError(f"phi must lie in (0,1), got {self.phi}")
        if self.m_min < 2:
            raise ConfigurationError(f"m_min must be at least 2, got {self.m_min}")
        if self.start_level < 0:
            raise ConfigurationError(f"start_level must be non-negative, got {self.start_level}")
        if self.max_level < self.start_level + 2:
            raise ConfigurationError(
                f"max_level {self.max_level} leaves no room above start_level {self.start_level}"
            )


@dataclass(frozen=True)
class MlmcResult:
    estimate: float
    raw_estimate: float
    levels: tuple[LevelStats, ...]
    total_cost: float
    final_level: int
    fit: RateFit | None
    flags: tuple[str, ...] = ()

    @property
    def bias_unresolved(self) -> bool:
        return "bias_unresolved" in self.flags


def sample_level(
    problem: RefinableProblem,
    ell: int,
    ell0: int,
    params: RefinementParams,
    seed: int,
    count: int,
    *,
    phase: int = PHASE_RUN,
    start_index: int = 0,
    stats: LevelStats | None = None,
    on_sample=None,
) -> LevelStats:
    """Draw ``count`` correction samples at level ``ell`` into ``stats``.

    Sample ``i`` depends only on ``(seed, phase, ell, start_index + i)``,
    so batches extend and merge deterministically in any order.  A
    problem exposing ``sample_block`` takes the aggregate-only requests
    in bulk; it must produce the same aggregates as this loop does.
    """
    if stats is None:
        stats = LevelStats(ell)
    block = getattr(problem, "sample_block", None)
    if block is not None and on_sample is None:
        block(ell, ell0, params, seed, count, phase=phase,
              start_index=start_index, stats=stats)
        return stats
    for i in range(start_index, start_index + count):
        s = correction_sample(problem, ell, ell0, params, derive_stream(seed, (phase, ell, i)))
        stats.add(s.delta_h, s.cost)
        if on_sample is not None:
            on_sample(s)
    return stats


def _weighted_line(xs, ys, weights) -> tuple[float, float, float]:
    """Weighted least squares y = intercept + slope*x; returns (slope, intercept, slope_se).

    Weights are inverse variances of y, so Var(slope) = 1/sum(w*(x-xbar)^2).
    """
    w = sum(weights)
    xm = sum(wi * xi for wi, xi in zip(weights, xs)) / w
    ym = sum(wi * yi for wi, yi in zip(weights, ys)) / w
    sxx = sum(wi * (xi - xm) ** 2 for wi, xi in zip(weights, xs))
    sxy = sum(wi * (xi - xm) * (yi - ym) for wi, xi, yi in zip(weights, xs, ys))
    slope = sxy / sxx
    return slope, ym - slope * xm, math.sqrt(1.0 / sxx)


def _plain_line(xs, ys) -> tuple[float, float, float]:
    """Unweighted least squares with residual-based slope standard error."""
    n = len(xs)
    xm = sum(xs) / n
    ym = sum(ys) / n
    sxx = sum((x - xm) ** 2 for x in xs)
    slope = sum((x - xm) * (y - ym) for x, y in zip(xs, ys)) / sxx
    intercept = ym - slope * xm
    if n > 2:
        rss = sum((y - intercept - slope * x) ** 2 for x, y in zip(xs, ys))
        se = math.sqrt(rss / (n - 2) / sxx)
    else:
        se = 0.0
    return slope, intercept, se


def _forced_intercept(xs, ys, weights, slope) -> float:
    w = sum(weights)
    return sum(wi * (yi - slope * xi) for wi, xi, yi in zip(weights, xs, ys)) / w


def _delta_moment_se(stat: LevelStats) -> tuple[float, float]:
    """(SE of mean, SE of variance estimate) from (count, variance, mean) only.

    Uses s = E[dH^2] reconstructed as V*(M-1)/M + m^2, valid because the
    corrections take values in {-1, 0, 1}; restricting inputs to the
    (M, V, m) triple keeps fits identical whether computed in-process or
    from an emitted levels file.
    """
    m, v, n = stat.mean, stat.variance, stat.count
    mean_se = math.sqrt(v / n) if n else math.inf
    s = min(1.0, max(0.0, v * (n - 1) / n + m * m))
    var_se = math.sqrt(s * (1.0 - s) / n) if n else math.inf
    return mean_se, var_se


def fit_rates(
    stats,
    fit_window=None,
    *,
    force_alpha: float | None = None,
    force_beta: float | None = None,
    force_gamma: float | None = None,
) -> RateFit:
    """Fit log2 |E_l|, log2 V_l, log2 W_l against l on the window.

    The bias and variance fits are weighted by inverse squared
    delta-method standard errors of the log2 estimates; the work fit is
    unweighted (per-level work has no dispersion column in the levels
    file format).  Levels with a zero |E_l| estimate are dropped from
    the bias fit, zero-variance levels from the variance fit.  A
    ``force_*`` value pins that slope and fits only the constant.
    """
    chosen = sorted((s for s in stats if fit_window is None or s.level in set(fit_window)),
                    key=lambda s: s.level)
    if len(chosen) < 2:
        raise FitError(f"need at least 2 levels to fit, have {len(chosen)}")

    bias_pts, var_pts, work_pts = [], [], []
    for s in chosen:
        mean_se, var_se = _delta_moment_se(s)
        if abs(s.mean) > 0.0:
            se_log = mean_se / (abs(s.mean) * _LN2)
            bias_pts.append((s.level, math.log2(abs(s.mean)), 1.0 / max(se_log**2, 1e-24)))
        if s.variance > 0.0:
            se_log = var_se / (s.variance * _LN2)
            var_pts.append((s.level, math.log2(s.variance), 1.0 / max(se_log**2, 1e-24)))
        work_pts.append((s.level, math.log2(s.mean_cost)))

    def fitted(points, forced_slope, weighted=True):
        """(slope, intercept, slope_se) of the log2 line, with optional pinned slope."""
        if len(points) < 2:
            raise FitError(f"fewer than 2 usable levels on window {[s.level for s in chosen]}")
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ws = [p[2] for p in points]
        if forced_slope is not None:
            return forced_slope, _forced_intercept(xs, ys, ws, forced_slope), 0.0
        if weighted:
            return _weighted_line(xs, ys, ws)
        return _plain_line(xs, ys)

    neg_alpha, log_ce, alpha_se = fitted(bias_pts, None if force_alpha is None else -force_alpha)
    neg_beta, log_cv, beta_se = fitted(var_pts, None if force_beta is None else -force_beta)
    gamma, log_cw, gamma_se = fitted([(x, y, 1.0) for x, y in work_pts], force_gamma,
                                     weighted=False)
    return RateFit(
        alpha_ind=-neg_alpha, beta_ind=-neg_beta, gamma=gamma,
        c_e=2.0**log_ce, c_v=2.0**log_cv, c_w=2.0**log_cw,
        alpha_se=alpha_se, beta_se=beta_se, gamma_se=gamma_se,
        levels=tuple(s.level for s in chosen),
    )


def optimal_allocation(stats, epsilon: float, phi: float, *, m_min: int = 32,
                       variances=None) -> list[int]:
    """Work-optimal sample counts bringing estimator variance under phi*eps^2.

    ``variances`` optionally overrides the observed per-level variances
    (the continuation passes floored values); zero-variance levels get
    the floor count m_min.
    """
    if not 0 < phi < 1 or epsilon <= 0:
        raise ConfigurationError("need epsilon > 0 and phi in (0,1)")
    vs = [s.variance for s in stats] if variances is None else list(variances)
    ws = [s.mean_cost for s in stats]
    if any(w <= 0 for w in ws):
        raise ConfigurationError("every level needs a positive mean work estimate")
    tail = sum(math.sqrt(v * w) for v, w in zip(vs, ws) if v > 0)
    budget = phi * epsilon * epsilon
    # absorb a few ulps of roundoff so analytically integral targets stay integral
    guard = 1.0 - 8.0 * 2.0**-52
    counts = []
    for v, w in zip(vs, ws):
        if v <= 0:
            counts.append(m_min)
        else:
            counts.append(max(m_min, math.ceil(math.sqrt(v / w) * tail / budget * guard)))
    return counts


def extrapolate_bias(fit: RateFit, L: int) -> float:
    """Geometric-tail bound on the bias of the estimator truncated at level L."""
    alpha = fit.alpha_ind
    if alpha <= 0:
        raise FitError(f"bias rate {alpha:.3g} <= 0: hierarchy shows no convergence")
    return fit.c_e * 2.0 ** (-alpha * (L + 1)) / (1.0 - 2.0**-alpha)


def run_mlmc(
    problem: RefinableProblem,
    epsilon: float,
    config: MlmcConfig,
    params: RefinementParams,
    seed: int,
) -> MlmcResult:
    """Continuation MLMC: grow levels and samples until (L, M_l) stabilize.

    Starts with pilot samples on the base level and two corrections,
    then alternates rate fitting, choice of the smallest final level L
    whose extrapolated squared bias fits in (1-phi)*eps^2, and optimal
    reallocation, drawing toward the targets at no more than a doubling
    per level per pass.  Rates are fit
    on the deepest correction levels with statistically significant
    means, so pre-asymptotic early levels and sample-starved deep ones
    cannot skew the tail extrapolation.  While no level within the cap
    certifies the bias budget, L deepens one level per pass.  Levels
    beyond the final L contribute their cost but not their mean.
    """
    ell0 = config.start_level
    stats: dict[int, LevelStats] = {}
    flags: set[str] = set()

    def ensure(ell: int, target: int) -> None:
        st = stats.setdefault(ell, LevelStats(ell))
        if st.count < target:
            sample_level(problem, ell, ell0, params, seed, target - st.count,
                         phase=PHASE_RUN, start_index=st.count, stats=st)

    for ell in range(ell0, ell0 + 3):
        ensure(ell, config.pilot)

    L = ell0 + 2
    fit = None
    bias_budget = math.sqrt(1.0 - config.phi) * epsilon
    stable = False
    stalls = 0
    for _ in range(40):
        # fit the asymptotic regime: deepest correction levels whose means
        # stand clear of their own standard errors
        usable = [l for l in sorted(stats)
                  if l > ell0 and stats[l].count >= config.m_min
                  and abs(stats[l].mean) > 2.0 * stats[l].mean_se()]
        window = usable[-5:]
        try:
            fit = fit_rates([stats[l] for l in window], window,
                            force_alpha=config.theory_alpha,
                            force_beta=config.theory_beta,
                            force_gamma=config.theory_gamma)
        except FitError:
            fit = None

        prev_L = L
        resolved = False  # tail bound at the level in use meets the budget
        if fit is not None:
            certified = None
            if fit.alpha_ind > 0:
                for cand in range(ell0, config.max_level + 1):
                    if extrapolate_bias(fit, cand) <= bias_budget:
                        certified = cand
                        break
            # Trust the fitted tail only a few levels past the deepest
            # resolved mean; a target further out costs exponentially more
            # on levels that cannot sharpen the fit, so move toward it and
            # let the next fits confirm or retract it.
            cap = min(window[-1] + 3, config.max_level)
            if certified is not None and certified <= cap:
                L = certified
                resolved = True
                flags.discard("bias_unresolved")
            else:
                L = cap if certified is not None else min(prev_L + 1, cap)
                if L == config.max_level:
                    flags.add("bias_unresolved")
        # with no usable correction signal, hold L and let data accrue

        for ell in range(ell0, L + 1):
            ensure(ell, config.m_min)

        active = [stats[l] for l in range(ell0, L + 1)]
        if fit is not None and fit.beta_ind > 0:
            floors = [fit.c_v * 2.0 ** (-fit.beta_ind * s.level) / 10.0 for s in active]
            variances = [max(s.variance, f) if s.level > ell0 else s.variance
                         for s, f in zip(active, floors)]
        else:
            variances = [s.variance for s in active]
        targets = optimal_allocation(active, epsilon, config.phi,
                                     m_min=config.m_min, variances=variances)
        shortfall = [max(0, t - s.count) for t, s in zip(targets, active)]
        if L == prev_L and not any(shortfall):
            if resolved or fit is None or L == config.max_level:
                stable = True
                break
            # allocation met but the tail is uncertified: the cheapest level
            # that can deepen the significance window is the first one whose
            # mean is still unresolved, so spend there rather than across the
            # whole probe span, whose work grows geometrically with depth
            stalls += 1
            if stalls > 8:
                flags.add("bias_unresolved")
                stable = True
                break
            frontier = min(window[-1] + 1, L)
            ensure(frontier, 2 * stats[frontier].count)
        else:
            # Approach the targets geometrically: no level more than doubles
            # per pass, so a target inflated by a transient fit or by a
            # soon-retracted L sinks at most one doubling of work before the
            # next pass can correct it (samples cannot be un-drawn).
            for s, extra in zip(active, shortfall):
                if extra:
                    ramp = max(2 * s.count, config.pilot)
                    ensure(s.level, min(s.count + extra, ramp))
    if not stable:
        flags.add("unstable")

    raw = sum(stats[l].mean for l in range(ell0, L + 1))
    ordered = tuple(stats[l] for l in sorted(stats))
    return MlmcResult(
        estimate=min(1.0, max(0.0, raw)),
        raw_estimate=raw,
        levels=ordered,
        total_cost=sum(s.cost_sum for s in ordered),
        final_level=L,
        fit=fit,
        flags=tuple(sorted(flags)),
    )


def select_start_level(
    problem: RefinableProblem,
    params: RefinementParams,
    pilot_m: int,
    candidates,
    seed: int,
) -> int:
    """Pick the base level minimizing a pilot estimate of total cost.

    For each candidate l0 the proxy is (sum over the pilot window of
    sqrt(V_l W_l))^2, the square of the work-optimal cost functional,
    with the window mirroring a run's pilot levels: the base term at l0
    plus the next two corrections.  Ties break to the smaller l0.
    """
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise ConfigurationError("empty start-level candidate range")
    if pilot_m < 100:
        raise ConfigurationError(f"pilot_m must be at least 100, got {pilot_m}")

    base_cache: dict[int, LevelStats] = {}
    corr_cache: dict[int, LevelStats] = {}

    def base_term(ell: int) -> LevelStats:
        if ell not in base_cache:
            base_cache[ell] = sample_level(problem, ell, ell, params, seed, pilot_m,
                                           phase=PHASE_PILOT_BASE)
        return base_cache[ell]

    def correction_term(ell: int) -> LevelStats:
        if ell not in corr_cache:
            corr_cache[ell] = sample_level(problem, ell, ell - 1, params, seed, pilot_m,
                                           phase=PHASE_PILOT)
        return corr_cache[ell]

    def proxy(ell0: int) -> float:
        terms = [base_term(ell0)] + [correction_term(l) for l in (ell0 + 1, ell0 + 2)]
        return sum(math.sqrt(t.variance * t.mean_cost) for t in terms) ** 2

    return min(candidates, key=lambda c: (proxy(c), c))


def complexity_regime(beta_ind: float, gamma: float, alpha_ind: float) -> tuple[str, float]:
    """Classify total-work growth in the target tolerance.

    Returns (tag, exponent p) meaning work ~ eps^-p, where the
    log-penalized case carries an extra log^2(eps) factor.
    """
    if min(beta_ind, gamma, alpha_ind) <= 0:
        raise ValueError("all rates must be positive")
    if alpha_ind < min(gamma, beta_ind) / 2.0:
        raise ValueError(
            f"alpha_ind {alpha_ind} below min(gamma, beta_ind)/2: complexity bound not applicable"
        )
    if beta_ind > gamma:
        return "canonical", 2.0
    if beta_ind == gamma:
        return "log-penalized", 2.0
    return "penalized", 2.0 + (gamma - beta_ind) / alpha_ind


def optimal_theta(beta: float, gamma: float, q: float = math.inf, *, strict: bool = False) -> float:
    """Refinement range multiplier minimizing the variance bound exponent."""
    if beta <= 0 or gamma <= 0:
        raise ValueError("beta and gamma must be positive")
    if not (q > 2):
        raise ValueError(f"q must exceed 2 (or be infinite), got {q}")
    q_ratio = 1.0 if math.isinf(q) else (q + 1.0) / q
    if strict:
        return 1.0 if beta > gamma else 1.0 / (2.0 * gamma / beta - 1.0)
    if beta > q_ratio * gamma:
        return 1.0
    return 1.0 / (2.0 * q_ratio * gamma / beta - 1.0)


@dataclass(frozen=True)
class RBound:
    """Largest admissible refinement strictness r; open means r must stay strictly below."""

    value: float
    is_open: bool


def r_bound(beta: float, gamma: float, q: float = math.inf, *, strict: bool = False,
            need_bias_rate: bool = False) -> RBound:
    """Admissible range of r under the variance bounds (general or strict
    moment growth) or, with ``need_bias_rate``, the tighter bound that
    also preserves the improved bias rate."""
    if beta <= 0 or gamma <= 0:
        raise ValueError("beta and gamma must be positive")
    if not (q > 2):
        raise ValueError(f"q must exceed 2 (or be infinite), got {q}")
    inf_q = math.isinf(q)

    if need_bias_rate and beta <= gamma:
        factor = 1.0 if inf_q else (q - 2.0) / q
        return RBound(2.0 * gamma / beta * factor, True)

    if strict or need_bias_rate:
        if beta <= gamma:
            factor = 1.0 if inf_q else 1.0 - 1.0 / q
            return RBound(2.0 * gamma / beta * factor, True)
        cutoff = 2.0 if inf_q else 2.0 * (q - 1.0) / (q - 2.0)
        if beta < cutoff * gamma:
            coeff = 0.5 if inf_q else (q - 2.0) / (2.0 * (q - 1.0))
            return RBound(1.0 / (1.0 - coeff * beta / gamma), False)
        return RBound(math.inf, True)

    q_ratio = 1.0 if inf_q else (q + 1.0) / q
    if beta <= q_ratio * gamma:
        return RBound(2.0 * gamma / beta, True)
    cutoff = 2.0 if inf_q else 2.0 * (q + 1.0) / (q - 1.0)
    if beta < cutoff * gamma:
        coeff = 0.5 if inf_q else (q - 1.0) / (2.0 * (q + 1.0))
        return RBound(1.0 / (1.0 - coeff * beta / gamma), False)
    return RBound(math.inf, True)
