import configparser
import logging
import os
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

try:
    from engines.errors import ConfigError
    from engines.model_core import (ModelParams, Profile, ProfileSpec, VacuumRegime, VelocityProfile,
                                    make_initial_data)
    from engines.solver import StepControl
except ImportError:
    # Handle case where run from root
    from src.engines.errors import ConfigError
    from src.engines.model_core import (ModelParams, Profile, ProfileSpec, VacuumRegime, VelocityProfile,
                                        make_initial_data)
    from src.engines.solver import StepControl

logger = logging.getLogger(__name__)

# Number of random sine modes used for seeded velocity perturbations
NOISE_MODES = 4


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class RegimeSection(_Section):
    tag: Literal["discontinuous", "continuous"] = "discontinuous"
    alpha: Optional[float] = None
    k1: Optional[float] = None
    k2: Optional[float] = None
    k3: Optional[float] = None
    k4: Optional[float] = None

    @model_validator(mode="after")
    def _build(self):
        self.to_regime()
        return self

    def to_regime(self):
        if self.tag == "discontinuous":
            return VacuumRegime.discontinuous()
        ks = (self.k1, self.k2, self.k3, self.k4)
        return VacuumRegime(tag="continuous", alpha=self.alpha, k_consts=None if None in ks else ks)


class ProfileSection(_Section):
    """
    m0_*/n0_* describe the mass profiles, u0_* the velocity. A phi_power profile
    without an explicit power takes alpha/2 (m0) or alpha (n0) from the regime.
    """
    m0_kind: Literal["constant", "bump", "phi_power"] = "constant"
    m0_value: float = 0.5
    m0_amplitude: float = 0.0
    m0_scale: float = 1.0
    m0_power: Optional[float] = None
    n0_kind: Literal["constant", "bump", "phi_power"] = "constant"
    n0_value: float = 0.5
    n0_amplitude: float = 0.0
    n0_scale: float = 1.0
    n0_power: Optional[float] = None
    u0_kind: Literal["zero", "constant", "linear", "sine"] = "zero"
    u0_amplitude: float = 0.0
    u0_noise: float = Field(default=0.0, ge=0)
    a0: float = 0.0

    def to_profile_spec(self, regime, seed):
        alpha = regime.alpha if regime.alpha is not None else 0.5
        m0 = Profile(kind=self.m0_kind, value=self.m0_value, amplitude=self.m0_amplitude, scale=self.m0_scale,
                     power=self.m0_power if self.m0_power is not None else alpha / 2.0)
        n0 = Profile(kind=self.n0_kind, value=self.n0_value, amplitude=self.n0_amplitude, scale=self.n0_scale,
                     power=self.n0_power if self.n0_power is not None else alpha)
        modes = ()
        if self.u0_noise > 0:
            rng = np.random.default_rng(seed)
            modes = tuple(float(a) * self.u0_noise / (k + 1) for k, a in enumerate(rng.standard_normal(NOISE_MODES)))
        u0 = VelocityProfile(kind=self.u0_kind, amplitude=self.u0_amplitude, noise_modes=modes)
        return ProfileSpec(m0=m0, n0=n0, u0=u0, a0=self.a0)


class GridSection(_Section):
    cells: int = Field(default=64, ge=8)


class SamplesSection(_Section):
    count: int = Field(default=11, ge=1)
    spacing: Literal["linear", "log"] = "linear"
    # first nonzero sample of a log schedule, as a fraction of t_end
    log_start: float = Field(default=1e-3, gt=0, lt=1)


class OutputSection(_Section):
    directory: str = "lagvac_out"


class DiagnosticsSection(_Section):
    monitors: bool = True
    snapshots: bool = True
    decay_fit: bool = True
    boundary_oracle: bool = True
    probe_x: float = Field(default=0.5, ge=0, le=1)
    energy_rtol: float = Field(default=1e-6, gt=0)
    momentum_tol: float = Field(default=1e-8, gt=0)
    identity_tol: float = Field(default=1e-3, gt=0)
    # the identity residual is checked over t <= identity_t_max
    identity_t_max: float = Field(default=10.0, gt=0)
    oracle_rtol: float = Field(default=0.02, gt=0)


class FitSection(_Section):
    window_lo: Optional[float] = Field(default=None, ge=0)
    window_hi: Optional[float] = Field(default=None, gt=0)
    slack: float = Field(default=0.2, ge=0, lt=1)


class RandomSection(_Section):
    seed: int = 0


class RunConfig(BaseModel):
    """Validated run configuration. Every admissibility assumption is checked on construction."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelParams
    regime: RegimeSection = RegimeSection()
    profile: ProfileSection = ProfileSection()
    grid: GridSection = GridSection()
    step: StepControl = StepControl()
    samples: SamplesSection = SamplesSection()
    output: OutputSection = OutputSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()
    fit: FitSection = FitSection()
    random: RandomSection = RandomSection()

    @model_validator(mode="after")
    def _check_assumptions(self):
        regime = self.vacuum_regime()
        regime.check_density_cap(self.model.rho_l)
        make_initial_data(self.model, regime, self.profile_spec(), self.grid.cells)
        return self

    def vacuum_regime(self):
        return self.regime.to_regime()

    def profile_spec(self):
        return self.profile.to_profile_spec(self.vacuum_regime(), self.random.seed)

    def initial_data(self):
        return make_initial_data(self.model, self.vacuum_regime(), self.profile_spec(), self.grid.cells)

    def sample_times(self):
        t_end = self.step.t_end
        if t_end == 0:
            return np.array([0.0])
        if self.samples.count < 2:
            return np.array([0.0, t_end])
        if self.samples.spacing == "linear":
            return np.linspace(0.0, t_end, self.samples.count)
        tail = np.geomspace(self.samples.log_start * t_end, t_end, self.samples.count - 1)
        return np.concatenate(([0.0], tail))

    def fit_window(self):
        t_end = self.step.t_end
        lo = self.fit.window_lo if self.fit.window_lo is not None else t_end / 10.0
        hi = self.fit.window_hi if self.fit.window_hi is not None else t_end
        return lo, hi

    def with_overrides(self, **sections):
        """Copy with some section fields replaced, e.g. with_overrides(model={"gamma": 2.5})."""
        data = self.model_dump()
        for section, values in sections.items():
            data[section] = {**data[section], **values}
            if section == "model" and "moment_n" not in values:
                # let the smallest admissible moment order follow the new exponents
                data["model"].pop("moment_n", None)
        return _validate(data)

    def to_ini_text(self):
        parser = configparser.ConfigParser(interpolation=None)
        for section, values in self.model_dump(exclude_none=True).items():
            parser[section] = {key: _format_value(value) for key, value in values.items()}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {value}" for key, value in parser[section].items())
            lines.append("")
        return "\n".join(lines)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _format_validation_error(err):
    parts = []
    for item in err.errors():
        loc = ".".join(str(p) for p in item["loc"])
        msg = item["msg"].removeprefix("Value error, ")
        parts.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(parts)


def _validate(data):
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def parse_config_text(text):
    """Parses INI text strictly: duplicate keys or sections are errors carrying the line number."""
    parser = configparser.ConfigParser(strict=True, interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(str(e).splitlines()[0], lineno=e.lineno) from e
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("missing section header", lineno=e.lineno) from e
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ConfigError("cannot parse line", lineno=lineno) from e

    known = set(RunConfig.model_fields)
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if "model" not in parser:
        raise ConfigError("missing required section [model]")
    return _validate({section: dict(parser[section]) for section in parser.sections()})


def _check_writable(directory):
    path = Path(directory).resolve()
    while not path.exists():
        path = path.parent
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {directory} is not writable")


def load_config(path):
    """Reads and fully validates a run configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    config = parse_config_text(path.read_text())
    _check_writable(config.output.directory)
    logger.info(f"Loaded config {path}: gamma={config.model.gamma}, beta={config.model.beta}, "
                f"regime={config.regime.tag}, N={config.grid.cells}")
    return config


def parse_grid(text):
    """
    Parses a sweep grid such as "gamma=2,2.5;beta=0.5,1" (or with commas only,
    "gamma=2,beta=0.5,1") into {"gamma": [...], "beta": [...]}.
    """
    grid = {}
    key = None
    for token in text.replace(";", ",").split(","):
        token = token.strip()
        if not token:
            continue
        if "=" in token:
            key, token = (part.strip() for part in token.split("=", 1))
            if key not in ("gamma", "beta", "rho_l"):
                raise ConfigError(f"grid key must be gamma, beta or rho_l, got {key!r}")
            if key in grid:
                raise ConfigError(f"grid key {key!r} given twice")
            grid[key] = []
        if key is None:
            raise ConfigError(f"grid value {token!r} has no key")
        try:
            grid[key].append(float(token))
        except ValueError as e:
            raise ConfigError(f"grid value {token!r} is not a number") from e
    if not grid:
        raise ConfigError("empty parameter grid")
    return grid
