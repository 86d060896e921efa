"""Simulated ledger plus the auditor smart contract.

Consensus is not executed: a block or a verification result is final once a
quorum of ceil(2n/3) active auditors attests it. All token movements are
double-entry transfers in :class:`RewardLedger`; ``@mint`` issues rewards and
deposits, ``@burn`` absorbs slashed collateral.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hashing import digest as model_digest

log = logging.getLogger(__name__)

MINT = "@mint"
BURN = "@burn"
MARKET = "@market"
DEFAULT_REPUTATION = 0.5
EARNINGS = ("reward", "market")


class Standing(enum.Enum):
    UNKNOWN = "unknown"
    EXPELLED = "expelled"


class Verdict(enum.Enum):
    DISMISSED = "dismissed"
    UPHELD = "upheld"
    DEFERRED = "deferred"


class ContractError(RuntimeError):
    pass


class InsufficientCollateral(ContractError):
    pass


class QuorumError(ContractError):
    pass


class RequestRejected(ContractError):
    pass


@dataclass
class ChainConfig:
    eps_dev: float = 0.05
    k_strikes: int = 3
    min_collateral: float = 100.0
    bounty: float = 10.0
    verification_fee: float = 0.01
    reward_scale: float = 1.0
    auditor_share: float = 0.5
    list_price: float = 1.0
    block_period: int = 5
    default_reputation: float = DEFAULT_REPUTATION
    initial_balance: float = 1.0


def quorum_size(active: int) -> int:
    """ceil(2n/3) on exact integers."""
    return -(-2 * active // 3)


@dataclass
class ClientTable:
    reputations: dict[str, float] = field(default_factory=dict)
    joining: set[str] = field(default_factory=set)
    leaving: set[str] = field(default_factory=set)
    expelled: set[str] = field(default_factory=set)

    def merge(self, later: "ClientTable") -> "ClientTable":
        """Apply ``later`` on top of this delta; a leave cancels a join of the same id."""
        reps = {**self.reputations, **later.reputations}
        leaving = self.leaving | later.leaving
        joining = (self.joining | later.joining) - leaving
        expelled = self.expelled | later.expelled
        for cid in leaving:
            reps.pop(cid, None)
        return ClientTable(reps, joining, leaving, expelled)

    def is_empty(self) -> bool:
        return not (self.reputations or self.joining or self.leaving)

    def to_json(self) -> dict:
        return {
            "reputations": {k: self.reputations[k] for k in sorted(self.reputations)},
            "joining": sorted(self.joining),
            "leaving": sorted(self.leaving),
            "expelled": sorted(self.expelled),
        }

    @classmethod
    def from_json(cls, d) -> "ClientTable":
        return cls(dict(d["reputations"]), set(d["joining"]), set(d["leaving"]),
                   set(d.get("expelled", ())))


@dataclass
class Block:
    height: int
    table_delta: ClientTable
    verification_digests: list[tuple[str, float]]
    signer_set: list[str]
    timestamp: int
    active_auditors: int
    ledger_entries: list[tuple] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "timestamp": self.timestamp,
            "active_auditors": self.active_auditors,
            "signer_set": list(self.signer_set),
            "table_delta": self.table_delta.to_json(),
            "verification_digests": [list(d) for d in self.verification_digests],
            "ledger_entries": [list(e) for e in self.ledger_entries],
        }


@dataclass
class AuditorAccount:
    auditor_id: str
    collateral: float
    strike_count: int = 0
    active: bool = True


@dataclass
class ModelDigest:
    digest: str
    holders: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    payee: str
    amount: float
    reason: str


class RewardLedger:
    def __init__(self):
        self.balances: dict[str, float] = {}
        self.history: list[LedgerEntry] = []
        self.earned: dict[str, float] = {}

    def balance(self, who) -> float:
        return self.balances.get(who, 0.0)

    def _post(self, rnd, who, amount, reason):
        self.history.append(LedgerEntry(rnd, who, amount, reason))
        self.balances[who] = self.balances.get(who, 0.0) + amount
        if amount > 0 and reason in EARNINGS:
            self.earned[who] = self.earned.get(who, 0.0) + amount

    def transfer(self, rnd, src, dst, amount, reason):
        if amount < 0:
            raise ValueError("transfer amount must be non-negative")
        if src != MINT and self.balance(src) < amount:
            raise ContractError(f"{src} holds {self.balance(src)}, cannot pay {amount}")
        self._post(rnd, src, -amount, reason)
        self._post(rnd, dst, amount, reason)

    @staticmethod
    def replay(history) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in history:
            out[e.payee] = out.get(e.payee, 0.0) + e.amount
        return out

    def check(self) -> list[str]:
        problems = []
        if self.replay(self.history) != self.balances:
            problems.append("ledger history does not replay to balances")
        for who, bal in self.balances.items():
            if who != MINT and bal < 0:
                problems.append(f"negative balance for {who}: {bal}")
        if math.fsum(e.amount for e in self.history) != 0.0:
            problems.append("ledger entries do not net to zero")
        return problems

    def minted(self) -> float:
        return -self.balance(MINT)

    def burned(self) -> float:
        return self.balance(BURN)

    def rewards_of(self, who) -> float:
        """Cumulative earnings (contract rewards plus marketplace shares)."""
        return self.earned.get(who, 0.0)


@dataclass
class AggregationResult:
    fingerprint: str
    status: str  # "accepted" | "pending"
    consensus: float | None
    deviants: list[str]
    agreeing: list[str]
    quorum: int


@dataclass
class VerificationOutcome:
    """What reward distribution needs to know about one finished verification."""
    fingerprint: str
    submitter: str
    requester: str | None
    accuracy: float
    mu_prev: float | None
    agreeing: list[str]
    malicious: bool = False


def escrow(aid: str) -> str:
    return f"escrow:{aid}"


class Contract:
    """The auditor contract and the block chain it writes."""

    def __init__(self, config: ChainConfig | None = None):
        self.config = config or ChainConfig()
        self.auditors: dict[str, AuditorAccount] = {}
        self.ledger = RewardLedger()
        self.blocks: list[Block] = []
        self.table = ClientTable()          # auditors' working table (latest reputations)
        self.pending = ClientTable()        # delta since the last block
        self.pending_digests: list[tuple[str, float]] = []
        self.expelled: set[str] = set()     # committed expulsions
        self._states: list[dict[str, float]] = []
        self._expelled_at: list[frozenset[str]] = []
        self.digests: dict[str, ModelDigest] = {}
        self.current_digest: str | None = None
        self.waivers: list[tuple[int, str, float]] = []
        self._ledger_mark = 0

    # -- auditors ---------------------------------------------------------

    def active_auditors(self) -> list[str]:
        return sorted(a for a, acc in self.auditors.items() if acc.active)

    def quorum(self) -> int:
        return quorum_size(len(self.active_auditors()))

    def register_auditor(self, aid: str, collateral: float, rnd: int = 0) -> None:
        if aid in self.auditors:
            raise ContractError(f"auditor id {aid!r} already used")
        if collateral < self.config.min_collateral:
            raise InsufficientCollateral(
                f"collateral {collateral} below minimum {self.config.min_collateral}")
        self.ledger.transfer(rnd, MINT, escrow(aid), collateral, "collateral")
        self.auditors[aid] = AuditorAccount(aid, collateral)

    def aggregate_verification(self, fingerprint: str, results) -> AggregationResult:
        """Median-band consensus over ``(auditor_id, accuracy)`` reports.

        Reports farther than ``eps_dev`` from the median are deviant. Strikes
        and slashing are applied only once the result reaches quorum.
        """
        if not results:
            raise ValueError("no verification results")
        results = sorted(results)
        for aid, _ in results:
            if not self.auditors.get(aid) or not self.auditors[aid].active:
                raise ContractError(f"report from inactive auditor {aid!r}")
        q = self.quorum()
        med = statistics.median(a for _, a in results)
        agreeing = [aid for aid, a in results if abs(a - med) <= self.config.eps_dev]
        deviants = [aid for aid, a in results if abs(a - med) > self.config.eps_dev]
        if len(agreeing) < q:
            return AggregationResult(fingerprint, "pending", None, deviants, agreeing, q)
        vals = dict(results)
        consensus = math.fsum(vals[a] for a in agreeing) / len(agreeing)
        for aid in deviants:
            self.auditors[aid].strike_count += 1
            if self.auditors[aid].strike_count > self.config.k_strikes:
                self.slash_auditor(aid)
        return AggregationResult(fingerprint, "accepted", consensus, deviants, agreeing, q)

    def slash_auditor(self, aid: str, rnd: int = 0, beneficiary: str | None = None) -> float:
        """Confiscate all collateral; ``beneficiary`` receives up to one bounty."""
        acc = self.auditors.get(aid)
        if acc is None or not acc.active:
            return 0.0
        seized = self.ledger.balance(escrow(aid))
        paid = 0.0
        if beneficiary is not None:
            paid = min(self.config.bounty, seized)
            self.ledger.transfer(rnd, escrow(aid), beneficiary, paid, "bounty")
        self.ledger.transfer(rnd, escrow(aid), BURN, seized - paid, "slash")
        acc.collateral = 0.0
        acc.active = False
        log.info("auditor %s slashed (%.4f seized)", aid, seized)
        return seized

    # -- clients ----------------------------------------------------------

    def register_client(self, cid: str, rnd: int = 0) -> bool:
        if cid in self.expelled or cid in self.pending.expelled:
            log.warning("registration of expelled client %s refused", cid)
            return False
        if cid in self.table.reputations:
            return True
        rep = self.config.default_reputation
        self.table.reputations[cid] = rep
        self.stage(ClientTable({cid: rep}, {cid}, set()))
        if self.config.initial_balance > 0:
            self.ledger.transfer(rnd, MINT, cid, self.config.initial_balance, "endowment")
        return True

    def deregister_client(self, cid: str) -> None:
        self.table.reputations.pop(cid, None)
        self.stage(ClientTable({}, set(), {cid}))

    def expel(self, cids) -> None:
        cids = set(cids)
        if not cids:
            return
        for cid in cids:
            self.table.reputations.pop(cid, None)
        self.stage(ClientTable({}, set(), set(cids), set(cids)))

    def set_reputation(self, cid: str, rep: float) -> None:
        if not 0.0 <= rep <= 1.0:
            raise ValueError(f"reputation {rep} outside [0, 1]")
        if cid not in self.table.reputations:
            raise ContractError(f"client {cid!r} is not in the client table")
        self.table.reputations[cid] = rep
        self.stage(ClientTable({cid: rep}, set(), set()))

    def working_reputation(self, cid):
        """The auditors' latest view, ahead of the chain by up to one block period."""
        if cid in self.table.reputations:
            return self.table.reputations[cid]
        if cid in self.expelled or cid in self.pending.expelled:
            return Standing.EXPELLED
        return Standing.UNKNOWN

    def stage(self, delta: ClientTable) -> None:
        self.pending = self.pending.merge(delta)

    def record_verification(self, fingerprint: str, accuracy: float) -> None:
        self.pending_digests.append((fingerprint, accuracy))

    # -- blocks -----------------------------------------------------------

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    def commit_block(self, signatures, now: int) -> Block:
        signers = sorted(set(signatures))
        active = self.active_auditors()
        bad = [s for s in signers if s not in active]
        if bad:
            raise QuorumError(f"signatures from inactive auditors {bad}")
        if len(signers) < quorum_size(len(active)):
            raise QuorumError(f"{len(signers)} signatures, quorum is {quorum_size(len(active))}")
        delta = self.pending
        # a committed expulsion is permanent, whatever a merged delta says
        delta.reputations = {k: v for k, v in delta.reputations.items()
                             if k not in self.expelled and k not in delta.leaving}
        entries = self.ledger.history[self._ledger_mark:]
        block = Block(len(self.blocks), delta, list(self.pending_digests), signers, now,
                      len(active), [(e.round, e.payee, e.amount, e.reason) for e in entries])
        state = dict(self._states[-1]) if self._states else {}
        state.update(delta.reputations)
        for cid in delta.leaving:
            state.pop(cid, None)
        self.expelled |= delta.expelled
        self._states.append(state)
        self._expelled_at.append(frozenset(self.expelled))
        self.blocks.append(block)
        self.pending = ClientTable()
        self.pending_digests = []
        self._ledger_mark = len(self.ledger.history)
        return block

    def read_reputation(self, cid: str, at_height: int | None = None):
        if not self.blocks:
            raise ContractError("chain is empty")
        h = self.height if at_height is None else at_height
        if not 0 <= h <= self.height:
            raise ValueError(f"height {h} not on chain")
        if cid in self._expelled_at[h]:
            return Standing.EXPELLED
        return self._states[h].get(cid, Standing.UNKNOWN)

    def onchain_reputations(self) -> dict[str, float]:
        return dict(self._states[-1]) if self._states else {}

    # -- disputes ---------------------------------------------------------

    def resolve_dispute(self, cid: str, claimed_rep, auditor_id: str, claim_height: int,
                        rnd: int = 0) -> Verdict:
        """A client shows the reputation ``auditor_id`` served for ``claim_height``."""
        if not self.blocks or claim_height > self.height:
            return Verdict.DEFERRED
        if claimed_rep == self.read_reputation(cid, claim_height):
            return Verdict.DISMISSED
        acc = self.auditors.get(auditor_id)
        if acc is None or not acc.active:
            return Verdict.DISMISSED
        self.slash_auditor(auditor_id, rnd, beneficiary=cid)
        return Verdict.UPHELD

    # -- incentives -------------------------------------------------------

    def distribute_rewards(self, rnd: int, outcomes) -> list[LedgerEntry]:
        mark = len(self.ledger.history)
        for o in outcomes:
            if o.mu_prev is not None and not o.malicious and o.accuracy > o.mu_prev:
                amount = self.config.reward_scale * (o.accuracy - o.mu_prev)
                self.ledger.transfer(rnd, MINT, o.submitter, amount, "reward")
            payees = [a for a in o.agreeing if self.auditors[a].active]
            if o.requester is None or not payees:
                continue
            total = self.config.verification_fee * len(payees)
            if self.ledger.balance(o.requester) < total:
                self.waivers.append((rnd, o.requester, total))
                log.info("verification fee %.4f waived for %s", total, o.requester)
                continue
            for aid in payees:
                self.ledger.transfer(rnd, o.requester, aid, self.config.verification_fee, "fee")
        return self.ledger.history[mark:]

    def record_model_digest(self, weights, auditor_id: str) -> str:
        acc = self.auditors.get(auditor_id)
        if acc is None or not acc.active:
            raise ContractError(f"auditor {auditor_id!r} is not active")
        d = model_digest(weights)
        entry = self.digests.setdefault(d, ModelDigest(d))
        if auditor_id not in entry.holders:
            entry.holders.append(auditor_id)
            entry.holders.sort()
        self.current_digest = d
        return d

    def deposit(self, who: str, amount: float, rnd: int = 0) -> None:
        self.ledger.transfer(rnd, MINT, who, amount, "deposit")

    def serve_model_request(self, buyer: str, fee: float, rng: np.random.Generator,
                            rnd: int = 0) -> tuple[str, str]:
        """Sell the current global model; returns ``(holder, digest)``."""
        if fee < self.config.list_price:
            raise RequestRejected(f"fee {fee} below list price {self.config.list_price}")
        entry = self.digests.get(self.current_digest) if self.current_digest else None
        holders = [a for a in (entry.holders if entry else []) if self.auditors[a].active]
        if not holders:
            raise RequestRejected("no active auditor holds the model; fee not charged")
        if self.ledger.balance(buyer) < fee:
            raise RequestRejected(f"{buyer} cannot pay {fee}")
        holder = holders[int(rng.integers(len(holders)))]
        self.ledger.transfer(rnd, buyer, MARKET, fee, "market")
        self.ledger.transfer(rnd, MARKET, holder, fee * self.config.auditor_share, "market")
        reps = [(c, r) for c, r in sorted(self.onchain_reputations().items()) if r > 0]
        total = math.fsum(r for _, r in reps)
        rest = self.ledger.balance(MARKET)
        for i, (cid, r) in enumerate(reps):
            # the last payee takes the exact remainder so the pool empties
            amount = self.ledger.balance(MARKET) if i == len(reps) - 1 else rest * r / total
            self.ledger.transfer(rnd, MARKET, cid, amount, "market")
        if self.ledger.balance(MARKET) > 0:
            self.ledger.transfer(rnd, MARKET, holder, self.ledger.balance(MARKET), "market")
        return holder, entry.digest

    def verify_fetched_model(self, holder: str, weights, rnd: int = 0) -> bool:
        """Buyer-side check of a fetched model; a mismatch slashes the holder."""
        if self.current_digest is not None and model_digest(weights) == self.current_digest:
            return True
        self.slash_auditor(holder, rnd)
        return False

    # -- audit ------------------------------------------------------------

    def check_invariants(self) -> list[str]:
        problems = list(self.ledger.check())
        for aid, acc in self.auditors.items():
            if acc.active and acc.collateral <= 0:
                problems.append(f"active auditor {aid} without collateral")
            if not acc.active and self.ledger.balance(escrow(aid)) != 0:
                problems.append(f"slashed auditor {aid} still holds collateral")
        problems.extend(verify_blocks([b.to_json() for b in self.blocks]))
        return problems

    def export(self, path) -> None:
        with open(path, "w") as fh:
            for b in self.blocks:
                fh.write(json.dumps(b.to_json(), sort_keys=True) + "\n")


def verify_blocks(records) -> list[str]:
    """Re-validate quorum, height order, table invariants and ledger replay."""
    problems = []
    prev = -1
    expelled: set[str] = set()
    balances: dict[str, float] = {}
    for r in records:
        h = r["height"]
        if h != prev + 1:
            problems.append(f"block {h}: height does not follow {prev}")
        prev = h
        if len(set(r["signer_set"])) < quorum_size(r["active_auditors"]):
            problems.append(f"block {h}: {len(r['signer_set'])} signers below quorum "
                            f"of {quorum_size(r['active_auditors'])}")
        t = ClientTable.from_json(r["table_delta"])
        if t.joining & t.leaving:
            problems.append(f"block {h}: ids both joining and leaving")
        for cid, rep in t.reputations.items():
            if not 0.0 <= rep <= 1.0:
                problems.append(f"block {h}: reputation of {cid} out of range")
            if cid in expelled:
                problems.append(f"block {h}: expelled client {cid} reappears")
        expelled |= t.expelled
        for rnd, payee, amount, reason in r.get("ledger_entries", []):
            balances[payee] = balances.get(payee, 0.0) + amount
        for who, bal in balances.items():
            if who != MINT and bal < -1e-12:
                problems.append(f"block {h}: negative balance for {who}")
    return problems


def verify_chain_file(path) -> list[str]:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not records:
        return ["chain file is empty"]
    return verify_blocks(records)
