"""Experiment configuration: one strict JSON document per run."""

from __future__ import annotations

import json
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ------------------------------------------------------------------ systems


class MapSystem(Strict):
    kind: Literal["map"] = "map"
    gamma: float = Field(gt=0, le=1)


class SyntheticTower(Strict):
    kind: Literal["synthetic_tower"] = "synthetic_tower"
    gamma: float = Field(gt=0, le=1)
    kappa_tail: float = Field(gt=0)
    n_max: int = Field(ge=2, le=100_000)


class ExplicitTower(Strict):
    kind: Literal["explicit_tower"] = "explicit_tower"
    heights: list[int]
    probs: list[float]


class MapTower(Strict):
    """Tower read off the inducing scheme of the map with parameter gamma."""

    kind: Literal["map_tower"] = "map_tower"
    gamma: float = Field(gt=0, le=1)
    n_max: int = Field(ge=2, le=100_000)


TowerSystem = Annotated[Union[SyntheticTower, ExplicitTower, MapTower], Field(discriminator="kind")]
AnySystem = Annotated[Union[MapSystem, SyntheticTower, ExplicitTower, MapTower],
                      Field(discriminator="kind")]


# -------------------------------------------------------------- observables


class ParityObservable(Strict):
    """rho = +-1 on the base by label parity; psi = sum theta^{N_j} rho(g_j)."""

    kind: Literal["parity"] = "parity"
    theta: float = Field(ge=0, lt=1)
    rho_only: bool = False


class IdentityObservable(Strict):
    """phi(x) = x - 1/2 on the doubling map."""

    kind: Literal["identity"] = "identity"


class CoboundaryObservable(Strict):
    kind: Literal["coboundary"] = "coboundary"


AnyObservable = Annotated[Union[ParityObservable, IdentityObservable, CoboundaryObservable],
                          Field(discriminator="kind")]


class OutputSpec(Strict):
    format: Literal["csv", "json", "both"] = "both"
    dir: str | None = None


Seed = Annotated[int, Field(ge=0, lt=2**64)]


class Base(Strict):
    master_seed: Seed = 0
    output: OutputSpec = OutputSpec()


def _check_pair(system, obs):
    is_map = isinstance(system, MapSystem)
    if is_map and system.gamma != 1.0:
        raise ValueError("random map orbits are only available for gamma = 1 (doubling map)")
    if is_map and isinstance(obs, ParityObservable):
        raise ValueError("the parity observable needs a tower system")
    if not is_map and not isinstance(obs, ParityObservable):
        raise ValueError(f"observable {obs.kind!r} needs the map system with gamma = 1")


# -------------------------------------------------------------- experiments


class MapTails(Base):
    experiment: Literal["map_tails"]
    gamma: float = Field(gt=0, le=1)
    x0: float = Field(default=1.0, gt=0, le=1)
    n_max: int = Field(default=500, ge=3)
    fit_range: tuple[int, int] = (20, 500)


class MapVerify(Base):
    experiment: Literal["map_verify"]
    gamma: float = Field(gt=0, le=1)
    n_max: int = Field(default=200, ge=2)
    n_small: int = Field(default=50, ge=1)
    pairs_per_branch: int = Field(default=10_000, ge=1)


class TowerMeeting(Base):
    experiment: Literal["tower_meeting"]
    system: TowerSystem
    method: Literal["exact", "monte_carlo"] = "exact"
    replicas: int = Field(default=100_000, ge=1)
    n_max: int = Field(default=300, ge=3)
    fit_range: tuple[int, int] | None = None


class DeltaDecay(Base):
    experiment: Literal["delta_decay"]
    system: TowerSystem
    theta: float = Field(gt=0, lt=1)
    method: Literal["exact", "monte_carlo"] = "monte_carlo"
    replicas: int = Field(default=100_000, ge=2)
    ell_max: int = Field(default=200, ge=3)
    fit_range: tuple[int, int] | None = None


class Covariance(Base):
    experiment: Literal["covariance"]
    system: AnySystem
    observable: AnyObservable
    replicas: int = Field(default=200, ge=2)
    length: int = Field(default=4000, ge=10)
    max_lag: int = Field(default=8, ge=0)

    @model_validator(mode="after")
    def _pair(self):
        _check_pair(self.system, self.observable)
        if self.max_lag >= self.length:
            raise ValueError("max_lag must be below length")
        return self


class Variance(Base):
    experiment: Literal["variance"]
    system: AnySystem
    observable: AnyObservable
    replicas: int = Field(default=200, ge=2)
    length: int = Field(default=4000, ge=64)
    max_lag: int | None = None
    horizons: list[int] | None = None

    @model_validator(mode="after")
    def _pair(self):
        _check_pair(self.system, self.observable)
        if self.horizons is not None and max(self.horizons) > self.length:
            raise ValueError("horizons must not exceed length")
        return self


class BlocksSchedule(Base):
    experiment: Literal["blocks_schedule"]
    n: int = Field(ge=2)
    gamma: float = Field(gt=0, le=1)
    kappa_block: float = Field(gt=0)
    delta_hat: float | None = Field(default=None, gt=0)


class _BlockRun(Base):
    system: AnySystem
    observable: AnyObservable
    n: int = Field(ge=2, le=3**15)
    gamma: float | None = Field(default=None, gt=0, le=1)
    kappa_block: float = Field(gt=0)

    @model_validator(mode="after")
    def _pair(self):
        _check_pair(self.system, self.observable)
        return self


class BlocksGap(_BlockRun):
    experiment: Literal["blocks_gap"]
    replicas: int = Field(default=3, ge=1)


class BlockVariance(_BlockRun):
    experiment: Literal["block_variance"]
    ell_range: tuple[int, int]
    replicas: int = Field(default=200, ge=2)
    length: int = Field(default=3000, ge=10)
    correlation_level: int | None = None
    correlation_replicas: int = Field(default=1000, ge=10)


class AsipProbe(_BlockRun):
    experiment: Literal["asip_probe"]
    replicas: int = Field(default=500, ge=100)
    c2: float | None = Field(default=None, gt=0)


ExperimentConfig = Annotated[
    Union[MapTails, MapVerify, TowerMeeting, DeltaDecay, Covariance, Variance,
          BlocksSchedule, BlocksGap, BlockVariance, AsipProbe],
    Field(discriminator="experiment"),
]

EXPERIMENTS = ("map_tails", "map_verify", "tower_meeting", "delta_decay", "covariance",
               "variance", "blocks_schedule", "blocks_gap", "block_variance", "asip_probe")

_adapter = TypeAdapter(ExperimentConfig)


def parse_config(data) -> Base:
    """Validate a dict (or JSON text) into the matching experiment model."""
    if isinstance(data, (str, bytes)):
        data = json.loads(data)
    return _adapter.validate_python(data)


def load_config(path, experiment: str | None = None) -> Base:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    if experiment is not None:
        given = data.setdefault("experiment", experiment)
        if given != experiment:
            raise ValueError(f"config is for {given!r}, command line asks for {experiment!r}")
    return parse_config(data)
