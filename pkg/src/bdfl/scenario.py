"""Scenario files: versioned TOML describing one simulation run.

Top-level keys hold the run shape; the optional tables ``[chain]``,
``[auditor]``, ``[train]``, ``[noise]`` and ``[client]`` override module
constants, and the arrays of tables ``[[attack_plans]]``,
``[[corrupt_auditors]]``, ``[[churn]]`` and ``[[model_requests]]`` list
scheduled behaviour. See ``scenarios/README.md`` for the schema.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adversary import MODES, AttackPlan, ScenarioRejected, validate_corrupt_fraction
from .auditor import AuditorConfig
from .chain import ChainConfig
from .client import NoiseConfig, TrainConfig

SCHEMA_VERSION = 1
DATA_ENV = "BDFL_DATA_DIR"
DEFAULT_DATA_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist"


@dataclass
class ClientParams:
    l_gap: float = 0.05
    self_confidence: float = 1.0
    holdout_fraction: float = 0.2


@dataclass
class ChurnEvent:
    time: int
    kind: str  # join | leave | fail
    client: str
    bootstrap: str | None = None


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    max_rounds: int = 30
    num_clients: int = 20
    L: int = 3
    # data
    dataset: str = "synthetic"
    data_dir: str | None = None
    mnist_images: str = "mnist-10k-images-idx3-ubyte.gz"
    mnist_labels: str = "mnist-10k-labels-idx1-ubyte.gz"
    mnist_subset: int = 10000
    synthetic_classes: int = 10
    synthetic_per_class: int = 300
    synthetic_dim: int = 20
    synthetic_spread: float = 2.0
    test_size: int = 1000
    validation_seed_size: int = 1000
    validation_size: int = 2000
    contribution_size: int = 10
    partition: str = "iid"
    hidden: list[int] = field(default_factory=lambda: [32])
    reference_epochs: int = 5
    # scheduling
    periods: list[int] = field(default_factory=lambda: [1, 2, 3])
    message_delay: int = 0
    # defense and attacks
    reputation_enabled: bool = True
    malicious_fraction: float = 0.0
    attack_mode: str = "label-flip"
    attack_epochs: int = 5              # local epochs an attacker spends on its poisoned data
    attack_plans: list[AttackPlan] = field(default_factory=list)
    num_auditors: int = 10
    corrupt_auditors: dict[str, float] = field(default_factory=dict)
    churn: list[ChurnEvent] = field(default_factory=list)
    model_requests: list[dict] = field(default_factory=list)
    # module constants
    chain: ChainConfig = field(default_factory=ChainConfig)
    auditor: AuditorConfig = field(default_factory=AuditorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(sigma_dp=0.001))
    client: ClientParams = field(default_factory=ClientParams)
    schema_version: int = SCHEMA_VERSION

    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir or os.environ.get(DATA_ENV) or DEFAULT_DATA_DIR)

    def client_ids(self) -> list[str]:
        return [f"c{i:03d}" for i in range(self.num_clients)]

    def auditor_ids(self) -> list[str]:
        return [f"a{i:02d}" for i in range(self.num_auditors)]

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ScenarioRejected(f"unsupported schema_version {self.schema_version}")
        if self.max_rounds < 1:
            raise ScenarioRejected("max_rounds must be >= 1")
        if self.num_clients < 1 or self.L < 1:
            raise ScenarioRejected("num_clients and L must be >= 1")
        if not 0.0 <= self.malicious_fraction < 1.0:
            raise ScenarioRejected("malicious_fraction must lie in [0, 1)")
        if self.attack_mode not in MODES:
            raise ScenarioRejected(f"unknown attack mode {self.attack_mode!r}")
        if not self.periods or min(self.periods) < 1:
            raise ScenarioRejected("client periods must be positive")
        if self.attack_epochs < 1:
            raise ScenarioRejected("attack_epochs must be >= 1")
        if self.message_delay < 0:
            raise ScenarioRejected("message_delay must be >= 0")
        validate_corrupt_fraction(len(self.corrupt_auditors), self.num_auditors)
        unknown = set(self.corrupt_auditors) - set(self.auditor_ids())
        if unknown:
            raise ScenarioRejected(f"corrupt auditors {sorted(unknown)} are not configured")
        for ev in self.churn:
            if ev.kind not in ("join", "leave", "fail"):
                raise ScenarioRejected(f"unknown churn kind {ev.kind!r}")
            if ev.time < 1:
                raise ScenarioRejected("churn times start at 1")
        if self.dataset not in ("synthetic", "mnist"):
            raise ScenarioRejected(f"unknown dataset {self.dataset!r}")

    def with_overrides(self, **kw) -> "Scenario":
        return dataclasses.replace(self, **kw)


_SECTIONS = {"chain": ChainConfig, "auditor": AuditorConfig, "train": TrainConfig,
             "noise": NoiseConfig, "client": ClientParams}


def _build(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ScenarioRejected(f"unknown keys in {where}: {sorted(extra)}")
    return cls(**data)


def scenario_from_dict(raw: dict) -> Scenario:
    raw = dict(raw)
    if "schema_version" not in raw:
        raise ScenarioRejected("scenario lacks schema_version")
    kw = {}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kw[key] = _build(cls, raw.pop(key), f"[{key}]")
    if "attack_plans" in raw:
        kw["attack_plans"] = [AttackPlan(p["client"], p.get("mode", "label-flip"),
                                         p.get("schedule", "always"), p.get("strength", 1.0))
                              for p in raw.pop("attack_plans")]
    if "corrupt_auditors" in raw:
        kw["corrupt_auditors"] = {c["auditor"]: float(c["offset"])
                                  for c in raw.pop("corrupt_auditors")}
    if "churn" in raw:
        kw["churn"] = [ChurnEvent(int(c["time"]), c["kind"], c["client"], c.get("bootstrap"))
                       for c in raw.pop("churn")]
    try:
        sc = _build(Scenario, {**raw, **kw}, "scenario")
    except TypeError as exc:
        raise ScenarioRejected(str(exc)) from exc
    sc.validate()
    return sc


def load_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return scenario_from_dict(raw)
