"""Scenario files: JSON description of one managed run.

Example::

    {
      "skeleton": {"kind": "pipeline", "stages": [
          {"kind": "seq", "label": "s1", "service": 1.0},
          {"kind": "farm", "worker": {"kind": "seq", "label": "w", "service": 4.0}},
          {"kind": "seq", "label": "s3", "service": 0.5}]},
      "contracts": [{"kind": "secureData"}, {"kind": "minThroughput", "rate": 1.0}],
      "pool": [{"id": "t0", "domain": "trusted"}, ...],
      "workload": [{"duration": 600, "rate": 2.0}],
      "mode": "sm",
      "sim": {"seed": 7, "run_length": 600},
      "knobs": {"hysteresis_factor": 1.5}
    }

Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ScenarioError
from .graph import Farm, Pipeline, PowerClass, Seq, check_skeleton
from .managers import MinThroughput, PowerBudget, SecureData
from .rules import Knobs
from .sim import Domain, Resource, SimConfig, WorkloadPhase


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SeqSpec(_Model):
    kind: Literal["seq"]
    label: str
    service: float = Field(gt=0)


class FarmSpec(_Model):
    kind: Literal["farm"]
    worker: "SkeletonSpec"
    degree: int | None = Field(default=None, ge=1)
    label: str = ""


class PipelineSpec(_Model):
    kind: Literal["pipeline"]
    stages: list["SkeletonSpec"] = Field(min_length=2)


SkeletonSpec = Annotated[Union[SeqSpec, FarmSpec, PipelineSpec], Field(discriminator="kind")]
FarmSpec.model_rebuild()
PipelineSpec.model_rebuild()


class SecureDataSpec(_Model):
    kind: Literal["secureData"]


class MinThroughputSpec(_Model):
    kind: Literal["minThroughput"]
    rate: float = Field(gt=0)


class PowerBudgetSpec(_Model):
    kind: Literal["powerBudget"]
    budget: float = Field(gt=0)


ContractSpec = Annotated[Union[SecureDataSpec, MinThroughputSpec, PowerBudgetSpec],
                         Field(discriminator="kind")]


class ResourceSpec(_Model):
    id: str
    domain: Domain = Domain.TRUSTED
    powerClass: PowerClass = PowerClass.GREEN
    powerCost: float = Field(default=1.0, gt=0)
    speed: float = Field(default=1.0, gt=0)


class PhaseSpec(_Model):
    duration: float = Field(gt=0)
    rate: float = Field(ge=0)
    jitter: bool = False


class SimSpec(_Model):
    seed: int = 0
    tick: float = Field(default=5.0, gt=0)
    window: float = Field(default=10.0, gt=0)
    ssl_overhead: float = Field(default=1.1, ge=1)
    run_length: float = Field(default=600.0, gt=0)


class KnobSpec(_Model):
    hysteresis_factor: float = Field(default=1.5, ge=1)
    priorities: dict[str, int] = Field(default_factory=dict)
    max_greedy: bool = False
    default_degree: int = Field(default=4, ge=1)
    priority_floor: int = Field(default=0, ge=0)
    frugal_alternative: bool = False


class ScenarioSpec(_Model):
    skeleton: SkeletonSpec
    contracts: list[ContractSpec] = Field(min_length=1)
    pool: list[ResourceSpec] = Field(min_length=1)
    workload: list[PhaseSpec] = Field(min_length=1)
    mode: Literal["sm", "cm"] = "sm"
    sim: SimSpec = Field(default_factory=SimSpec)
    knobs: KnobSpec = Field(default_factory=KnobSpec)


# ---------------------------------------------------------------------------

def _skeleton(spec):
    if isinstance(spec, SeqSpec):
        return Seq(spec.label, spec.service)
    if isinstance(spec, FarmSpec):
        return Farm(_skeleton(spec.worker), spec.degree, spec.label)
    return Pipeline([_skeleton(s) for s in spec.stages])


def _contract(spec):
    if isinstance(spec, MinThroughputSpec):
        return MinThroughput(spec.rate)
    if isinstance(spec, PowerBudgetSpec):
        return PowerBudget(spec.budget)
    return SecureData()


class Scenario:
    """Validated scenario turned into domain objects."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        try:
            self.skeleton = _skeleton(spec.skeleton)
            check_skeleton(self.skeleton)
            self.contracts = [_contract(c) for c in spec.contracts]
            self.pool = [Resource(r.id, r.domain, r.powerClass, r.powerCost, r.speed) for r in spec.pool]
            self.workload = [WorkloadPhase(p.duration, p.rate, p.jitter) for p in spec.workload]
            self.sim = SimConfig(**spec.sim.model_dump())
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
        if len({r.id for r in self.pool}) != len(self.pool):
            raise ScenarioError("resource ids must be unique")
        self.mode = spec.mode
        self.knobs = Knobs(**spec.knobs.model_dump())

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        try:
            return cls(ScenarioSpec.model_validate(doc))
        except ValidationError as exc:
            raise ScenarioError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(doc)
