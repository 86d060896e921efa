"""Auditor committee logic: validation data, verification, the mu - 2 sigma
classifier, reputation arithmetic and low-reputation purges."""

from __future__ import annotations

import csv
import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import learning
from .chain import ClientTable, Contract, Standing, VerificationOutcome
from .learning import Dataset, ModelSpec, ShapeMismatchError

log = logging.getLogger(__name__)

WINDOW = 20
GAIN_PER_SIGMA = 0.01

VERIFICATION_LOG_FIELDS = ["round", "fingerprint", "submitter", "accuracy", "mu", "sigma",
                           "verdict", "rep_before", "rep_after"]


class Label(str, enum.Enum):
    HONEST = "honest"
    MALICIOUS = "malicious"
    PENDING = "pending"


@dataclass
class AuditorConfig:
    theta_reject: float = 0.25
    theta_expel: float = 0.05
    min_history: int = 2
    gain_cap: float = 0.05
    q_gap: float = 0.1
    window: int = WINDOW
    keep_models: bool = True


@dataclass(frozen=True)
class HistoryStats:
    mu: float | None
    sigma: float
    n: int

    def __len__(self):
        return self.n


class AccuracyHistory:
    """Rolling window of consensus accuracies with exactly rounded mean and
    sample standard deviation."""

    def __init__(self, window: int = WINDOW, values=()):
        self.window: deque[float] = deque(values, maxlen=window)
        self._recompute()

    def __len__(self):
        return len(self.window)

    def _recompute(self):
        n = len(self.window)
        if n == 0:
            self.mu, self.sigma = None, 0.0
            return
        exact = [Fraction(x) for x in self.window]
        mean = sum(exact) / n
        self.mu = float(mean)
        if n < 2:
            self.sigma = 0.0
        else:
            var = sum((x - mean) ** 2 for x in exact) / (n - 1)
            self.sigma = math.sqrt(float(var))

    def push(self, accuracy: float) -> "AccuracyHistory":
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self.window.append(float(accuracy))
        self._recompute()
        return self

    def stats(self) -> HistoryStats:
        return HistoryStats(self.mu, self.sigma, len(self.window))


def update_accuracy_history(hist: AccuracyHistory, accuracy: float) -> AccuracyHistory:
    return hist.push(accuracy)


def malicious_threshold(mu: float, sigma: float) -> float:
    return mu - 2 * sigma


def classify_update(accuracy: float, hist, min_history: int = 2) -> Label:
    """Malicious iff ``accuracy < mu - 2 sigma``; too little history means honest."""
    if len(hist) < min_history or hist.mu is None:
        return Label.HONEST
    if accuracy < malicious_threshold(hist.mu, hist.sigma):
        return Label.MALICIOUS
    return Label.HONEST


def update_reputation(rep: float, verdict: Label, accuracy: float, hist,
                      gain_cap: float = 0.05, min_history: int = 2) -> tuple[float, float]:
    """Return ``(new_rep, delta)``.

    Malicious halves. An honest update above the mean gains
    ``(A - mu) / sigma * 0.01``, capped at ``gain_cap`` (also the gain when
    sigma is 0) and at 1 overall.
    """
    if not 0.0 <= rep <= 1.0:
        raise ValueError(f"reputation {rep} outside [0, 1]")
    if verdict is Label.MALICIOUS:
        new = rep / 2
        return new, new - rep
    if verdict is not Label.HONEST or len(hist) < min_history or hist.mu is None:
        return rep, 0.0
    if accuracy <= hist.mu:
        return rep, 0.0
    if hist.sigma == 0:
        gain = gain_cap
    else:
        gain = min(gain_cap, (accuracy - hist.mu) / hist.sigma * GAIN_PER_SIGMA)
    gain = min(gain, 1.0 - rep)
    return rep + gain, gain


def purge_low_reputation_clients(table: ClientTable, theta_expel: float = 0.05) -> set[str]:
    return {cid for cid, rep in table.reputations.items()
            if rep < theta_expel and cid not in table.leaving}


@dataclass
class ValidationSet:
    samples: Dataset
    reference_weights: np.ndarray
    spec: ModelSpec
    contributed_parts: list[dict] = field(default_factory=list)
    refresh_round: int = 0
    version: int = 0

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("validation set must be nonempty")

    def baseline_accuracy(self) -> float:
        return learning.evaluate_accuracy(self.spec, self.reference_weights, self.samples)


def curate_validation_data(candidate: Dataset, baseline: ValidationSet, q_gap: float = 0.1,
                           contributor: str | None = None, rnd: int = 0,
                           anonymized: bool = True) -> bool:
    """Admit ``candidate`` when the reference model scores within ``q_gap`` of
    its accuracy on the current set; admitted data is merged in place."""
    if len(candidate) == 0:
        return False
    ref = baseline.baseline_accuracy()
    acc = learning.evaluate_accuracy(baseline.spec, baseline.reference_weights, candidate)
    if acc < ref - q_gap:
        log.info("validation data from %s rejected: %.3f vs %.3f", contributor, acc, ref)
        return False
    baseline.samples = Dataset.concat([baseline.samples, candidate], "validation")
    baseline.contributed_parts.append({"contributor": contributor, "size": len(candidate),
                                       "accuracy": acc, "round": rnd, "anonymized": anonymized})
    baseline.refresh_round = rnd
    baseline.version += 1
    return True


@dataclass
class VerificationRecord:
    fingerprint: str
    submitter: str
    accuracy: float | None
    verdict: Label
    round: int
    mu: float | None = None
    sigma: float = 0.0
    rep_before: float | None = None
    rep_after: float | None = None
    agreeing: list[str] = field(default_factory=list)
    cached: bool = False

    def row(self) -> dict:
        def fmt(x):
            return "" if x is None else repr(float(x))
        return {"round": self.round, "fingerprint": self.fingerprint,
                "submitter": self.submitter, "accuracy": fmt(self.accuracy),
                "mu": fmt(self.mu), "sigma": fmt(self.sigma), "verdict": self.verdict.value,
                "rep_before": fmt(self.rep_before), "rep_after": fmt(self.rep_after)}


@dataclass(frozen=True)
class Proof:
    fingerprint: str
    accuracy: float
    attesters: tuple[str, ...]
    round: int


class Committee:
    """The auditors acting together through the contract.

    Honest auditors evaluate deterministically, so one evaluation per
    fingerprint and validation-set version serves all of them; corrupt
    auditors report a shifted value via ``report_fn``.
    """

    def __init__(self, contract: Contract, validation: ValidationSet,
                 config: AuditorConfig | None = None, corrupt: dict[str, float] | None = None,
                 report_fn=None):
        self.contract = contract
        self.validation = validation
        self.spec = validation.spec
        self.config = config or AuditorConfig()
        self.corrupt = dict(corrupt or {})
        self.report_fn = report_fn or (lambda acc, offset: min(1.0, max(0.0, acc + offset)))
        self.history = AccuracyHistory(self.config.window)
        self.evaluations = 0
        self._acc_cache: dict[tuple[str, int], float] = {}
        self._verdicts: dict[str, VerificationRecord] = {}
        self.records: list[VerificationRecord] = []
        self.proofs: dict[str, Proof] = {}
        self.models: dict[str, np.ndarray] = {}
        self._snapshots: dict[int, HistoryStats] = {}

    def close_round(self, rnd: int) -> None:
        """Freeze the window statistics as they stand at the end of ``rnd``."""
        self._snapshots[rnd] = self.history.stats()

    def stats_for(self, rnd: int) -> HistoryStats:
        """Statistics an update from round ``rnd`` is judged against: those
        frozen at the end of ``rnd - 1``. Until a frozen window holds
        ``min_history`` entries the live window is used, so only the very
        first updates of a run pass unjudged."""
        earlier = [r for r in self._snapshots if r < rnd]
        if earlier:
            snap = self._snapshots[max(earlier)]
            if snap.n >= self.config.min_history:
                return snap
        return self.history.stats()

    def verify_model(self, update) -> float:
        """Accuracy of ``update`` on the validation set, cached by fingerprint."""
        key = (update.fingerprint, self.validation.version)
        if key in self._acc_cache:
            return self._acc_cache[key]
        if np.asarray(update.weights).shape != (self.spec.weight_count,):
            raise ShapeMismatchError(f"update {update.fingerprint[:12]} has the wrong shape")
        self.evaluations += 1
        acc = learning.evaluate_accuracy(self.spec, update.weights, self.validation.samples)
        self._acc_cache[key] = acc
        return acc

    def cached_verdict(self, fingerprint: str) -> VerificationRecord | None:
        return self._verdicts.get(fingerprint)

    def request_verification(self, update, submitter: str, requester: str | None,
                             rnd: int) -> VerificationRecord:
        prior = self._verdicts.get(update.fingerprint)
        if prior is not None:
            return VerificationRecord(prior.fingerprint, prior.submitter, prior.accuracy,
                                      prior.verdict, rnd, prior.mu, prior.sigma,
                                      prior.rep_after, prior.rep_after, prior.agreeing, True)
        stats = self.stats_for(update.round)
        rep_before = self.contract.working_reputation(submitter)
        if isinstance(rep_before, Standing):
            rep_before = None
        try:
            true_acc = self.verify_model(update)
        except ShapeMismatchError:
            log.warning("malformed update %s from %s", update.fingerprint[:12], submitter)
            true_acc = None

        if true_acc is None:
            accuracy, agreeing, label = 0.0, self.contract.active_auditors(), Label.MALICIOUS
        else:
            reports = []
            for aid in self.contract.active_auditors():
                if aid in self.corrupt:
                    reports.append((aid, self.report_fn(true_acc, self.corrupt[aid])))
                else:
                    reports.append((aid, true_acc))
            agg = self.contract.aggregate_verification(update.fingerprint, reports)
            if agg.status == "pending":
                rec = VerificationRecord(update.fingerprint, submitter, None, Label.PENDING, rnd,
                                         stats.mu, stats.sigma, rep_before, rep_before)
                self.records.append(rec)
                return rec
            accuracy, agreeing = agg.consensus, agg.agreeing
            label = classify_update(accuracy, stats, self.config.min_history)

        rep_after = rep_before
        if rep_before is not None:
            rep_after, _ = update_reputation(rep_before, label, accuracy, stats,
                                             self.config.gain_cap, self.config.min_history)
            self.contract.set_reputation(submitter, rep_after)
        if label is Label.HONEST:
            self.history.push(accuracy)
            if (self.config.keep_models and stats.n >= self.config.min_history
                    and accuracy > stats.mu + 2 * stats.sigma):
                for aid in agreeing:
                    self.contract.record_model_digest(update.weights, aid)
                self.models[update.fingerprint] = np.array(update.weights)
        self.contract.record_verification(update.fingerprint, accuracy)
        # a submitter no longer in the client table earns nothing
        mu_prev = stats.mu if rep_before is not None else None
        self.contract.distribute_rewards(rnd, [VerificationOutcome(
            update.fingerprint, submitter, requester, accuracy, mu_prev, agreeing,
            label is Label.MALICIOUS)])
        rec = VerificationRecord(update.fingerprint, submitter, accuracy, label, rnd,
                                 stats.mu, stats.sigma, rep_before, rep_after, agreeing)
        self._verdicts[update.fingerprint] = rec
        self.records.append(rec)
        return rec

    def pre_verify(self, update, client: str, rnd: int) -> Proof | None:
        """Verification a low-reputation client buys before exchanging ``update``."""
        rep = self.contract.working_reputation(client)
        if isinstance(rep, Standing):
            return None
        rec = self.request_verification(update, client, client, rnd)
        if rec.verdict is not Label.HONEST:
            return None
        proof = Proof(update.fingerprint, rec.accuracy, tuple(rec.agreeing), rnd)
        self.proofs[update.fingerprint] = proof
        return proof

    def check_proof(self, proof: Proof | None, update) -> bool:
        if proof is None or proof.fingerprint != update.fingerprint:
            return False
        return self.proofs.get(proof.fingerprint) == proof

    def purge(self) -> set[str]:
        expelled = purge_low_reputation_clients(self.contract.table, self.config.theta_expel)
        self.contract.expel(expelled)
        return expelled

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=VERIFICATION_LOG_FIELDS)
            w.writeheader()
            for rec in self.records:
                w.writerow(rec.row())
