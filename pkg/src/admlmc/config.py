"""Experiment configuration: flat ``key = value`` files resolved into
runnable problem + engine setups, plus the manifest that makes every
emitted CSV traceable to one resolved configuration.

Unknown keys are rejected, defaults are materialized into the resolved
settings, and the manifest hash is a git-style blob hash of the
canonical settings text, so two runs with the same hash drew from
byte-identical configurations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .core import PHASE_CALIBRATE, PHASE_PARAMS, MlmcConfig
from .errors import ConfigurationError
from .nested import TRUE_PROBABILITY, NestedModelSpec, NestedProblem
from .refine import RefinementParams
from .sde import (
    GbmDigitalProblem,
    GbmSpec,
    calibrate_strike,
    digital_true_value,
    sample_gbm_parameters,
)
from .streams import derive_stream
from .synthetic import DEFAULT_SIGMA, SyntheticProblem, SyntheticSpec, mu_for_target

PROBLEM_NAMES = ("nested", "gbm", "synthetic")

AUTO_START_CANDIDATES = range(0, 5)
AUTO_START_PILOT = 1000


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` comments and blanks allowed."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigurationError(
                f"config line {lineno}: expected 'key = value', got {line.strip()!r}"
            )
        if key in out:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


class _Settings:
    """Raw key-value view that records consumption and canonical values."""

    def __init__(self, raw: dict[str, str]):
        self._raw = dict(raw)
        self.resolved: dict[str, str] = {}

    def take(self, key: str, default: str) -> str:
        value = self._raw.pop(key, default)
        self.resolved[key] = value
        return value

    def take_float(self, key: str, default: float) -> float:
        raw = self.take(key, repr(float(default)))
        try:
            value = float(raw)
        except ValueError:
            raise ConfigurationError(f"config key {key}: expected a number, got {raw!r}") from None
        self.resolved[key] = repr(value)
        return value

    def take_int(self, key: str, default: int) -> int:
        raw = self.take(key, str(default))
        try:
            value = int(raw)
        except ValueError:
            raise ConfigurationError(f"config key {key}: expected an integer, got {raw!r}") from None
        self.resolved[key] = str(value)
        return value

    def take_choice(self, key: str, default: str, choices: tuple[str, ...]) -> str:
        value = self.take(key, default)
        if value not in choices:
            raise ConfigurationError(
                f"config key {key}: expected one of {', '.join(choices)}, got {value!r}"
            )
        return value

    def take_optional_float(self, key: str) -> float | None:
        raw = self.take(key, "none")
        if raw == "none":
            return None
        try:
            value = float(raw)
        except ValueError:
            raise ConfigurationError(f"config key {key}: expected a number, got {raw!r}") from None
        self.resolved[key] = repr(value)
        return value

    def finish(self) -> None:
        if self._raw:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(self._raw))}")


@dataclass(frozen=True)
class Experiment:
    """A fully resolved run setup: problem, engine knobs, refinement rule."""

    problem_name: str
    problem: object
    engine: MlmcConfig
    params: RefinementParams
    seed: int
    auto_start: bool
    constants: dict[str, object]
    settings: dict[str, str]


@dataclass(frozen=True)
class ExperimentManifest:
    problem: str
    seed: int
    settings: dict[str, str]
    constants: dict[str, object] = field(default_factory=dict)
    config_hash: str = ""


def settings_hash(settings: dict[str, str]) -> str:
    """Git-style blob hash of the canonical sorted ``key = value`` text."""
    text = "".join(f"{k} = {v}\n" for k, v in sorted(settings.items()))
    data = text.encode()
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def manifest_for(experiment: Experiment) -> ExperimentManifest:
    return ExperimentManifest(
        problem=experiment.problem_name,
        seed=experiment.seed,
        settings=dict(experiment.settings),
        constants=dict(experiment.constants),
        config_hash=settings_hash(experiment.settings),
    )


def write_manifest(manifest: ExperimentManifest, path, command: dict | None = None) -> None:
    payload = {
        "problem": manifest.problem,
        "seed": manifest.seed,
        "settings": manifest.settings,
        "constants": manifest.constants,
        "config_hash": manifest.config_hash,
    }
    if command is not None:
        payload["command"] = command
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _gbm_base_spec(s: _Settings, seed: int) -> tuple[GbmSpec, dict[str, object]]:
    d = s.take_int("d", 1)
    rho = s.take_float("rho", 0.0)
    scheme = s.take_choice("scheme", "euler", ("euler", "milstein"))
    gamma = s.take_int("gamma", 1)
    mode = s.take("params_mode", "fixed:0.05,0.4,1.0")
    constants: dict[str, object] = {}
    if mode == "sampled":
        spec = sample_gbm_parameters(
            d, rho, derive_stream(seed, (PHASE_PARAMS,)), scheme=scheme, gamma=gamma
        )
        constants["a"] = list(spec.a)
        constants["b"] = list(spec.b)
        constants["s0"] = list(spec.s0)
        return spec, constants
    if mode.startswith("fixed:"):
        parts = mode[len("fixed:"):].split(",")
        if len(parts) != 3:
            raise ConfigurationError(f"params_mode {mode!r}: expected fixed:a,b,s0")
        try:
            a, b, s0 = (float(p) for p in parts)
        except ValueError:
            raise ConfigurationError(f"params_mode {mode!r}: expected three numbers") from None
        return GbmSpec(d=d, a=a, b=b, s0=s0, rho=rho, scheme=scheme, gamma=gamma), constants
    raise ConfigurationError(f"params_mode {mode!r}: expected 'sampled' or 'fixed:a,b,s0'")


def _gbm_strike(spec: GbmSpec, s: _Settings, seed: int) -> tuple[GbmSpec, dict[str, object]]:
    raw = s.take("K", "auto:0.025")
    constants: dict[str, object] = {}
    if raw.startswith("auto:"):
        try:
            target = float(raw[len("auto:"):])
        except ValueError:
            raise ConfigurationError(f"config key K: bad target in {raw!r}") from None
        if not 0.0 < target < 1.0:
            raise ConfigurationError(f"config key K: target {target} outside (0, 1)")
        stream = None if spec.d == 1 else derive_stream(seed, (PHASE_CALIBRATE,))
        spec = spec.with_strike(calibrate_strike(spec, target, stream))
        constants["truth"] = target
    else:
        try:
            spec = spec.with_strike(float(raw))
        except ValueError:
            raise ConfigurationError(f"config key K: expected a number or auto:p, got {raw!r}") from None
        if spec.d == 1:
            constants["truth"] = digital_true_value(spec)
    constants["K"] = spec.strike
    return spec, constants


def build_experiment(
    problem_name: str,
    raw: dict[str, str],
    *,
    seed: int | None = None,
    adaptive: bool | None = None,
) -> Experiment:
    """Resolve raw settings (CLI flags winning over config keys) into an
    Experiment; rejects unknown keys so typos fail loudly."""
    if problem_name not in PROBLEM_NAMES:
        raise ConfigurationError(f"unknown problem {problem_name!r}, expected one of {PROBLEM_NAMES}")
    s = _Settings(raw)

    run_seed = s.take_int("seed", 0)
    if seed is not None:
        run_seed = seed
        s.resolved["seed"] = str(seed)
    if run_seed < 0:
        raise ConfigurationError(f"seed must be non-negative, got {run_seed}")

    adaptive_mode = s.take_choice("adaptive", "on", ("on", "off"))
    if adaptive is not None:
        adaptive_mode = "on" if adaptive else "off"
        s.resolved["adaptive"] = adaptive_mode

    epsilon = s.take_float("epsilon", 1e-2)
    phi = s.take_float("phi", 0.5)
    m_min = s.take_int("m_min", 32)
    max_level = s.take_int("max_level", 20)
    pilot = s.take_int("pilot", 400)
    start_raw = s.take("start_level", "0")
    auto_start = start_raw == "auto"
    if auto_start:
        start_level = 0
    else:
        try:
            start_level = int(start_raw)
        except ValueError:
            raise ConfigurationError(
                f"config key start_level: expected an integer or 'auto', got {start_raw!r}"
            ) from None
    theory_alpha = s.take_optional_float("theory_alpha")
    theory_beta = s.take_optional_float("theory_beta")
    theory_gamma = s.take_optional_float("theory_gamma")

    r = s.take_float("r", 1.95)
    theta = s.take_float("theta", 1.0)

    constants: dict[str, object] = {}
    if problem_name == "nested":
        n0 = s.take_int("n0", 16)
        gamma = s.take_float("gamma", 1.0)
        sigma_raw = s.take("sigma_mode", "sample")
        if sigma_raw == "sample":
            sigma_constant = None
        else:
            try:
                sigma_constant = float(sigma_raw)
            except ValueError:
                raise ConfigurationError(
                    f"config key sigma_mode: expected 'sample' or a number, got {sigma_raw!r}"
                ) from None
        spec = NestedModelSpec(n0=n0, gamma=gamma, sigma_constant=sigma_constant)
        c = s.take_float("c", spec.default_c())
        problem: object = NestedProblem(spec)
        constants["truth"] = TRUE_PROBABILITY
    elif problem_name == "gbm":
        gbm, sampled = _gbm_base_spec(s, run_seed)
        gbm, strike_consts = _gbm_strike(gbm, s, run_seed)
        constants.update(sampled)
        constants.update(strike_consts)
        gamma = float(gbm.gamma)
        c = s.take_float("c", 1.0)
        problem = GbmDigitalProblem(gbm)
    else:
        gamma = s.take_float("gamma", 1.0)
        sigma = s.take_float("sigma", DEFAULT_SIGMA)
        target_p = s.take_float("target_p", 0.025)
        spec = SyntheticSpec(mu=mu_for_target(target_p), gamma=gamma, sigma=sigma)
        c = s.take_float("c", 1.0)
        problem = SyntheticProblem(spec)
        constants["mu"] = spec.mu
        constants["truth"] = spec.true_probability

    s.finish()

    engine = MlmcConfig(
        epsilon=epsilon,
        start_level=start_level,
        max_level=max_level,
        m_min=m_min,
        phi=phi,
        pilot=pilot,
        theory_alpha=theory_alpha,
        theory_beta=theory_beta,
        theory_gamma=theory_gamma,
    )
    params = RefinementParams(
        r=r, theta=theta, c=c, gamma=gamma, adaptive=adaptive_mode == "on"
    )
    return Experiment(
        problem_name=problem_name,
        problem=problem,
        engine=engine,
        params=params,
        seed=run_seed,
        auto_start=auto_start,
        constants=constants,
        settings=dict(s.resolved),
    )
