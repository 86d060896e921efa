"""Client-side model exchange: training, DP noise, fingerprints, reputation
gating, local pre-evaluation and confidence-weighted aggregation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import learning
from .chain import Standing
from .hashing import fingerprint as fingerprint_of
from .learning import Dataset, ModelSpec

log = logging.getLogger(__name__)

CLIENT_LOG_FIELDS = ["round", "client_id", "role", "local_acc", "agg_acc", "neighbors_kept",
                     "neighbors_rejected", "fee_paid", "reward"]


@dataclass(frozen=True)
class ModelUpdate:
    weights: np.ndarray
    round: int
    fingerprint: str
    sender: str = ""
    noise_applied: bool = False
    proof: object = None

    @classmethod
    def build(cls, weights, rnd, sender="", noise_applied=False, proof=None):
        w = np.asarray(weights, dtype=np.float64)
        return cls(w, rnd, fingerprint_of(w), sender, noise_applied, proof)

    def check(self, spec: ModelSpec | None = None) -> bool:
        if fingerprint_of(self.weights) != self.fingerprint:
            return False
        return spec is None or self.weights.shape == (spec.weight_count,)


@dataclass(frozen=True)
class NoiseConfig:
    epsilon: float = 1.0
    delta: float = 1e-5
    sigma_dp: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.sigma_dp < 0:
            raise ValueError("sigma_dp must be >= 0")
        if self.enabled and (self.epsilon <= 0 or self.delta <= 0):
            raise ValueError("epsilon and delta must be > 0 when noise is enabled")


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 1
    batch_size: int = 10


@dataclass
class ConfidenceWeights:
    neighbors: dict[str, float]
    own: float = 1.0

    def __post_init__(self):
        if self.own < 0 or any(c < 0 for c in self.neighbors.values()):
            raise ValueError("confidence weights must be >= 0")


def local_train(spec: ModelSpec, weights, data: Dataset, hp: TrainConfig,
                rng: np.random.Generator, rnd: int = 0, sender: str = "") -> ModelUpdate | None:
    """Train from ``weights``; ``None`` means the client skips this round."""
    if len(data) == 0:
        log.info("client %s has no local data; round %d skipped", sender, rnd)
        return None
    w = learning.train_epochs(spec, weights, data, hp.lr, hp.epochs, rng, hp.batch_size)
    return ModelUpdate.build(w, rnd, sender)


def add_dp_noise(update: ModelUpdate, cfg: NoiseConfig, rng: np.random.Generator) -> ModelUpdate:
    if not cfg.enabled:
        return update
    noise = rng.normal(0.0, 1.0, size=update.weights.shape) * cfg.sigma_dp
    w = update.weights + noise
    return replace(update, weights=w, fingerprint=fingerprint_of(w), noise_applied=True)


def local_verify(spec: ModelSpec, own_weights, neighbor_weights, holdout: Dataset,
                 l_gap: float = 0.05) -> bool:
    """Accept when the neighbor model is at most ``l_gap`` worse on the local holdout."""
    if holdout is None or len(holdout) == 0:
        return False
    mine = learning.evaluate_accuracy(spec, own_weights, holdout)
    theirs = learning.evaluate_accuracy(spec, neighbor_weights, holdout)
    return theirs >= mine - l_gap


def filter_by_reputation(updates, read_reputation, theta_reject: float = 0.25,
                         proof_ok=None):
    """Split ``{sender: update}`` into kept and rejected dicts.

    A sender below ``theta_reject`` is kept only with a proof accepted by
    ``proof_ok``; unknown or expelled senders are always rejected.
    """
    kept, rejected = {}, {}
    for sender in sorted(updates):
        upd = updates[sender]
        rep = read_reputation(sender)
        if isinstance(rep, Standing) or rep is None:
            rejected[sender] = upd
        elif rep >= theta_reject:
            kept[sender] = upd
        elif proof_ok is not None and proof_ok(upd.proof, upd):
            kept[sender] = upd
        else:
            rejected[sender] = upd
    return kept, rejected


def confidence_from_reputation(reps: dict[str, float], self_confidence: float = 1.0) -> ConfidenceWeights:
    return ConfidenceWeights({k: float(reps[k]) for k in sorted(reps)}, self_confidence)


def aggregate_models(own, accepted, c_self: float = 1.0, own_id: str = "") -> np.ndarray:
    """Confidence-weighted average of the own model and accepted neighbor models.

    ``accepted`` maps neighbor id to ``(weights, c)``. Terms are summed in
    ascending client-id order (own model under ``own_id``).
    """
    own = np.asarray(own, dtype=np.float64)
    terms = [(own_id, own, float(c_self))]
    for cid, (w, c) in accepted.items():
        w = np.asarray(w, dtype=np.float64)
        if w.shape != own.shape:
            raise ValueError(f"model from {cid} has shape {w.shape}, expected {own.shape}")
        terms.append((cid, w, float(c)))
    terms.sort(key=lambda t: t[0])
    total = math.fsum(c for _, _, c in terms)
    if total <= 0:
        return own.copy()
    acc = np.zeros_like(own)
    for _, w, c in terms:
        if c:
            acc += c * w
    return acc / total


@dataclass
class Client:
    """Per-client state held by the simulator."""
    client_id: str
    address: str
    train_data: Dataset
    holdout: Dataset
    weights: np.ndarray | None
    period: int = 1
    phase: int = 0
    role: str = "honest"
    inbox: dict[str, ModelUpdate] = field(default_factory=dict)
    seen: dict[str, str] = field(default_factory=dict)
    last_update: ModelUpdate | None = None
    joined_round: int = 0
    alive: bool = True

    def fires_at(self, t: int) -> bool:
        return t >= self.joined_round and (t - self.phase) % self.period == 0
