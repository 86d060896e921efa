"""Attack injection for poisoned clients and corrupt auditors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learning import Dataset

MODES = ("label-flip", "random-weights", "noise-scaled")


class ScenarioRejected(ValueError):
    pass


@dataclass(frozen=True)
class AttackPlan:
    client_id: str
    mode: str = "label-flip"
    schedule: str | frozenset[int] = "always"
    strength: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.schedule != "always":
            rounds = frozenset(int(r) for r in self.schedule)
            if any(r <= 0 for r in rounds):
                raise ValueError("scheduled attack rounds must be positive")
            object.__setattr__(self, "schedule", rounds)

    @property
    def always(self) -> bool:
        return self.schedule == "always"

    def attacks_at(self, rnd: int) -> bool:
        return self.always or rnd in self.schedule


def poison_dataset(data: Dataset, mode: str = "label-flip", seed: int = 0) -> Dataset:
    """Label flip maps ``y -> (y + 1) mod K``; features are untouched."""
    labels = data.labels.copy()
    if mode == "label-flip":
        labels = (labels + 1) % data.num_classes
    return Dataset(data.features, labels, data.num_classes, "poisoned")


def random_weights(n: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, scale, size=n)


def scale_noise(weights, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    """Honest weights plus Gaussian noise of ``strength`` times their own std."""
    w = np.asarray(weights, dtype=np.float64)
    return w + rng.normal(0.0, strength * (w.std() or 1.0), size=w.shape)


def step_malicious_client(plan: AttackPlan, rnd: int, honest_step, poisoned_step,
                          rng: np.random.Generator, weight_count: int):
    """Produce this round's update for an attacker.

    ``honest_step()`` is the unmodified client pipeline; ``poisoned_step()``
    runs the same pipeline on the poisoned dataset. Both return weights.
    Off-schedule rounds return exactly the honest pipeline's output.
    """
    if not plan.attacks_at(rnd):
        return honest_step(), False
    if plan.mode == "label-flip":
        return poisoned_step(), True
    if plan.mode == "random-weights":
        return random_weights(weight_count, rng, plan.strength), True
    return scale_noise(honest_step(), rng, plan.strength), True


def step_deviant_auditor(true_accuracy: float, offset: float) -> float:
    return min(1.0, max(0.0, true_accuracy + offset))


def validate_corrupt_fraction(n_corrupt: int, n_auditors: int) -> None:
    if n_auditors <= 0:
        raise ScenarioRejected("at least one auditor is required")
    if 3 * n_corrupt >= n_auditors:
        raise ScenarioRejected(
            f"{n_corrupt} corrupt of {n_auditors} auditors reaches the 1/3 fault bound")
