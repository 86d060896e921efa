"""Discrete-event driver.

Time advances in integer ticks; one tick is one reporting round. Within a
tick the order is fixed: churn, client firings (ascending id), message
delivery, heartbeats and repair, block commit, market requests, metrics.
Every random draw comes from a generator keyed by ``(seed, purpose, client,
tick)`` so a run is a pure function of the scenario.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import logging
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import learning
from .adversary import AttackPlan, poison_dataset, step_deviant_auditor, step_malicious_client
from .auditor import Committee, Label, ValidationSet, curate_validation_data
from .chain import Contract, QuorumError, RequestRejected, Standing
from .client import (CLIENT_LOG_FIELDS, Client, ModelUpdate, add_dp_noise, aggregate_models,
                     filter_by_reputation, local_verify)
from .learning import Dataset, ModelSpec
from .overlay import JoinError, Overlay
from .scenario import Scenario

log = logging.getLogger(__name__)

FINAL_WINDOW = 5
MAX_EVENTS_PER_TICK = 1_000_000


@dataclass
class TraceEntry:
    round: int
    recipient: str
    sender: str
    fingerprint: str
    verdict: str
    adversarial: bool


@dataclass
class RunResult:
    scenario: Scenario
    metrics: list[dict]
    columns: list[str]
    events: list[str]
    client_rows: list[dict]
    trace: list[TraceEntry]
    summary: dict
    sim: "Simulation" = field(repr=False, default=None)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        w.writerows({k: _fmt(v) for k, v in r.items()} for r in self.metrics)
        return buf.getvalue()

    def events_text(self) -> str:
        return "".join(line + "\n" for line in self.events)

    def final_accuracy(self, window: int = FINAL_WINDOW) -> float:
        vals = [r["avg_honest_acc"] for r in self.metrics[-window:]]
        return math.fsum(vals) / len(vals)


def _fmt(x):
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return repr(x)
    return x


class Simulation:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.sc = sc = scenario
        self.events: list[str] = []
        self.client_rows: list[dict] = []
        self.trace: list[TraceEntry] = []
        self.metrics: list[dict] = []
        self.now = 0
        self.outbox: dict[int, list] = defaultdict(list)
        self._queue: list = []
        self._seq = 0
        self.counters = defaultdict(int)
        self.adversarial: set[str] = set()
        self.expelled_at: dict[str, int] = {}
        self.departed: set[str] = set()
        self._acc_cache: dict[str, float] = {}
        self._successful: set[str] = set()

        self._prepare_data()
        self.overlay = Overlay(sc.L)
        self.contract = Contract(sc.chain)
        for aid in sc.auditor_ids():
            self.contract.register_auditor(aid, sc.chain.min_collateral)
        self.committee = Committee(self.contract, self.validation, sc.auditor,
                                   sc.corrupt_auditors, step_deviant_auditor)
        self._make_clients()
        self._curate()
        self.contract.commit_block(self.contract.active_auditors(), 0)
        self.committee.close_round(0)
        self.log(0, "genesis", f"clients={len(self.clients)} auditors={len(sc.auditor_ids())}")
        for ev in sc.churn:
            self._push(ev.time, 0, ev)

    # -- setup ------------------------------------------------------------

    def rng(self, tag: str, *nums: int) -> np.random.Generator:
        return np.random.default_rng([self.sc.seed, zlib.crc32(tag.encode()), *nums])

    def _prepare_data(self):
        sc = self.sc
        if sc.dataset == "mnist":
            d = sc.resolved_data_dir()
            full = learning.load_mnist(d / sc.mnist_images, d / sc.mnist_labels,
                                       sc.mnist_subset, sc.seed)
        else:
            full = learning.gen_synthetic_blobs(sc.synthetic_classes, sc.synthetic_per_class,
                                                sc.synthetic_dim, sc.synthetic_spread, sc.seed)
        full = full.subset(self.rng("shuffle").permutation(len(full)))
        n_test, n_seed = sc.test_size, sc.validation_seed_size
        if n_test + n_seed >= len(full):
            raise ValueError("dataset too small for the requested test and validation sizes")
        self.test = full.subset(np.arange(n_test), "test")
        seed_val = full.subset(np.arange(n_test, n_test + n_seed), "validation")
        pool = full.subset(np.arange(n_test + n_seed, len(full)))
        joiners = sorted({ev.client for ev in sc.churn if ev.kind == "join"})
        self.joiner_ids = joiners
        parts = learning.partition_dataset(pool, sc.num_clients + len(joiners), sc.partition,
                                           sc.seed)
        self.parts = dict(zip(sc.client_ids() + joiners, parts))
        self.spec = ModelSpec(full.dim, full.num_classes, tuple(sc.hidden))
        ref = learning.init_weights(self.spec, self.rng("reference-init"))
        ref = learning.train_epochs(self.spec, ref, seed_val, sc.train.lr, sc.reference_epochs,
                                    self.rng("reference"), sc.train.batch_size)
        self.validation = ValidationSet(seed_val, ref, self.spec)
        self.init_weights = learning.init_weights(self.spec, self.rng("init"))

    def _split_local(self, data: Dataset):
        n_hold = int(round(len(data) * self.sc.client.holdout_fraction))
        hold, train = data.split(n_hold)
        return train, hold

    def _make_clients(self):
        sc = self.sc
        ids = sc.client_ids()
        plans = {p.client_id: p for p in sc.attack_plans}
        n_mal = max(int(round(sc.malicious_fraction * sc.num_clients)), len(plans))
        others = [c for c in ids if c not in plans]
        pick = self.rng("malicious").permutation(len(others))[: n_mal - len(plans)]
        for i in sorted(pick):
            plans[others[i]] = AttackPlan(others[i], sc.attack_mode, "always")
        self.plans: dict[str, AttackPlan] = plans
        self.clients: dict[str, Client] = {}
        bootstrap = None
        for cid in ids:
            self._add_client(cid, 0)
            self.overlay.join_network(cid, self._address(cid), bootstrap, 0)
            bootstrap = bootstrap or cid
            self.contract.register_client(cid, 0)
            self.clients[cid].weights = self.init_weights.copy()
        self.log(0, "attackers", " ".join(f"{c}:{'always' if p.always else 'scheduled'}"
                                          for c, p in sorted(plans.items())))

    def _address(self, cid):
        i = int(cid[1:])
        return f"10.{i // 65536}.{(i // 256) % 256}.{i % 256}"

    def _add_client(self, cid, t):
        train, hold = self._split_local(self.parts[cid])
        period = self.sc.periods[int(self.rng("period", int(cid[1:])).integers(len(self.sc.periods)))]
        phase = int(self.rng("phase", int(cid[1:])).integers(period))
        role = "malicious" if cid in self.plans else "honest"
        self.clients[cid] = Client(cid, self._address(cid), train, hold, None, period, phase,
                                   role, joined_round=t)
        self.poisoned = getattr(self, "poisoned", {})
        if cid in self.plans:
            self.poisoned[cid] = poison_dataset(train, self.plans[cid].mode, self.sc.seed)

    def _curate(self):
        sc = self.sc
        for cid in sorted(self.clients):
            if len(self.validation.samples) >= sc.validation_size:
                break
            c = self.clients[cid]
            k = min(sc.contribution_size, len(c.train_data))
            if k == 0:
                continue
            part = (self.poisoned[cid] if cid in self.poisoned else c.train_data).subset(np.arange(k))
            ok = curate_validation_data(part, self.validation, sc.auditor.q_gap, cid, 0)
            self.counters["validation_accepted" if ok else "validation_rejected"] += 1
        self.log(0, "validation", f"size={len(self.validation.samples)} "
                 f"accepted={self.counters['validation_accepted']} "
                 f"rejected={self.counters['validation_rejected']}")

    # -- bookkeeping ------------------------------------------------------

    def log(self, t, kind, detail=""):
        self.events.append(f"{t}\t{kind}\t{detail}")

    def _push(self, t, prio, payload):
        heapq.heappush(self._queue, (t, prio, self._seq, payload))
        self._seq += 1

    def chain_rep(self, cid):
        return self.contract.read_reputation(cid)

    def is_registered(self, cid) -> bool:
        return not isinstance(self.chain_rep(cid), Standing)

    # -- main loop --------------------------------------------------------

    def run(self) -> RunResult:
        for t in range(1, self.sc.max_rounds + 1):
            self.step(t)
        return self.result()

    def step(self, t: int):
        self.now = t
        handled = 0
        while self._queue and self._queue[0][0] <= t:
            _, _, _, ev = heapq.heappop(self._queue)
            self.inject_churn(ev, t)
            handled += 1
        for cid in sorted(self.clients):
            c = self.clients[cid]
            if c.alive and (c.fires_at(t) or self._scheduled_attack(cid, t)):
                self.step_client(cid, t)
                handled += 1
                if handled > MAX_EVENTS_PER_TICK:
                    raise RuntimeError(f"watchdog: tick {t} does not quiesce")
        self.committee.close_round(t)
        self._deliver(t)
        self._maintenance(t)
        if t % self.sc.chain.block_period == 0:
            self._commit(t)
        for i, req in enumerate(self.sc.model_requests):
            if int(req["round"]) == t:
                self._model_request(i, float(req.get("fee", self.sc.chain.list_price)), t)
        self.metrics.append(self.collect_metrics(t))

    def _scheduled_attack(self, cid, t):
        plan = self.plans.get(cid)
        return plan is not None and not plan.always and plan.attacks_at(t) and t >= self.clients[cid].joined_round

    # -- churn ------------------------------------------------------------

    def inject_churn(self, ev, t):
        cid = ev.client
        if ev.kind == "join":
            if cid in self.clients or cid in self.departed or cid not in self.parts:
                self.log(t, "churn-rejected", f"join {cid}")
                return
            boot = ev.bootstrap if ev.bootstrap else next(
                (c for c in sorted(self.clients) if self.overlay.live(c)), None)
            self._add_client(cid, t)
            try:
                self.overlay.join_network(cid, self._address(cid), boot, t)
            except JoinError as exc:
                del self.clients[cid]
                self.log(t, "churn-rejected", f"join {cid}: {exc}")
                return
            if not self.contract.register_client(cid, t):
                self.overlay.leave_network(cid, t)
                del self.clients[cid]
                self.log(t, "churn-rejected", f"join {cid}: expelled id")
                return
            self.log(t, "join", f"{cid} neighbors={','.join(self.overlay.neighbors(cid))}")
        elif cid not in self.clients:
            self.log(t, "churn-rejected", f"{ev.kind} {cid}: unknown client")
        elif ev.kind == "leave":
            self.overlay.leave_network(cid, t)
            self.contract.deregister_client(cid)
            self._drop(cid)
            self.log(t, "leave", cid)
        else:
            self.overlay.fail(cid)
            self.clients[cid].alive = False
            self.log(t, "fail", cid)

    def _drop(self, cid):
        self.clients.pop(cid, None)
        self.departed.add(cid)

    # -- one client firing ------------------------------------------------

    def step_client(self, cid: str, t: int):
        sc, c = self.sc, self.clients[cid]
        if not self.is_registered(cid):
            return
        mark = len(self.contract.ledger.history)
        idx = int(cid[1:])
        node = self.overlay.nodes[cid]
        inbox, c.inbox = c.inbox, {}
        plan = self.plans.get(cid)
        if plan is not None and plan.always and plan.mode == "label-flip":
            # a persistent poisoner ignores its neighbors and keeps fitting the flipped labels
            inbox = {}
        fresh = {}
        for s, u in sorted(inbox.items()):
            entry = node.neighbors.get(s)
            if entry is None:
                continue
            if entry.last_fingerprint == u.fingerprint:
                self.counters["duplicates"] += 1
                continue
            fresh[s] = u

        accepted, verdicts, rejected = {}, {}, {}
        if sc.reputation_enabled:
            kept, rejected = filter_by_reputation(fresh, self.chain_rep, sc.auditor.theta_reject,
                                                  self.committee.check_proof)
            for s in rejected:
                self.log(t, "gate-reject", f"{cid} <- {s}")
            for s, u in kept.items():
                node.neighbors[s].last_fingerprint = u.fingerprint
                if self.committee.check_proof(u.proof, u):
                    verdicts[s] = "proof"
                    accepted[s] = u
                    continue
                if (self.committee.stats_for(u.round).n < sc.auditor.min_history and c.weights is not None
                        and not local_verify(self.spec, c.weights, u.weights, c.holdout,
                                             sc.client.l_gap)):
                    self.log(t, "local-suspect", f"{cid} <- {s}")
                    continue
                rec = self.committee.request_verification(u, s, cid, t)
                self.counters["cache_hits" if rec.cached else "verifications"] += 1
                if rec.verdict is Label.PENDING:
                    node.neighbors[s].last_fingerprint = None
                    c.inbox.setdefault(s, u)
                    self.log(t, "verify-pending", f"{cid} <- {s}")
                    continue
                if not rec.cached:
                    self.log(t, "verify", f"{s} {u.fingerprint[:16]} acc={rec.accuracy!r} "
                             f"{rec.verdict.value} rep={rec.rep_after!r}")
                if rec.verdict is Label.MALICIOUS:
                    continue
                verdicts[s] = rec.verdict.value
                accepted[s] = u
            conf = {}
            for s in accepted:
                rep = self.chain_rep(s)
                conf[s] = 1.0 if c.weights is None or isinstance(rep, Standing) else float(rep)
        else:
            for s, u in fresh.items():
                node.neighbors[s].last_fingerprint = u.fingerprint
                verdicts[s] = "unverified"
            accepted = fresh
            conf = {s: 1.0 for s in accepted}

        for s, u in accepted.items():
            adv = u.fingerprint in self.adversarial
            self.trace.append(TraceEntry(t, cid, s, u.fingerprint, verdicts[s], adv))
            if adv and c.role == "honest":
                self._successful.add(u.fingerprint)

        if c.weights is None:
            if not accepted:
                return
            first, *rest = sorted(accepted)
            agg = aggregate_models(accepted[first].weights,
                                   {s: (accepted[s].weights, 1.0) for s in rest}, 1.0, first)
            self.log(t, "bootstrap-model", f"{cid} from {len(accepted)} neighbors")
        else:
            agg = aggregate_models(c.weights, {s: (u.weights, conf[s]) for s, u in accepted.items()},
                                   sc.client.self_confidence, cid)

        honest_cache = []

        def honest_step():
            if not honest_cache:
                honest_cache.append(self._train(agg, c.train_data, idx, t))
            return honest_cache[0]

        if plan is not None:
            poisoned = self.poisoned[cid]
            sent, adversarial = step_malicious_client(
                plan, t, honest_step,
                lambda: self._train(agg, poisoned, idx, t, sc.attack_epochs),
                self.rng("attack", idx, t), self.spec.weight_count)
            if plan.always and plan.mode == "label-flip":
                c.weights = sent
            else:
                c.weights = honest_step()
        else:
            sent, adversarial = honest_step(), False
            c.weights = sent

        upd = add_dp_noise(ModelUpdate.build(sent, t, cid), sc.noise, self.rng("noise", idx, t))
        if adversarial:
            self.adversarial.add(upd.fingerprint)
            self.counters["adversarial_sent"] += 1
            self.log(t, "attack", f"{cid} {upd.fingerprint[:16]}")

        send = True
        if sc.reputation_enabled:
            own = self.chain_rep(cid)
            if not isinstance(own, Standing) and own < sc.auditor.theta_reject:
                proof = self.committee.pre_verify(upd, cid, t)
                self.counters["pre_verifications"] += 1
                if proof is None:
                    send = False
                    self.log(t, "preverify-fail", f"{cid} {upd.fingerprint[:16]}")
                else:
                    upd = replace(upd, proof=proof)
                    self.log(t, "preverify-ok", f"{cid} {upd.fingerprint[:16]}")
        if send:
            for n in self.overlay.neighbors(cid):
                self.outbox[t + sc.message_delay].append((n, upd))
                self.counters["messages"] += 1
        c.last_update = upd

        fee = -math.fsum(e.amount for e in self.contract.ledger.history[mark:]
                         if e.payee == cid and e.reason == "fee")
        self.client_rows.append({
            "round": t, "client_id": cid, "role": c.role,
            "local_acc": learning.evaluate_accuracy(self.spec, sent, c.holdout) if len(c.holdout) else "",
            "agg_acc": learning.evaluate_accuracy(self.spec, agg, c.holdout) if len(c.holdout) else "",
            "neighbors_kept": len(accepted), "neighbors_rejected": len(rejected),
            "fee_paid": fee, "reward": self.contract.ledger.rewards_of(cid),
        })

    def _train(self, start, data, idx, t, epochs=None):
        hp = self.sc.train
        try:
            return learning.train_epochs(self.spec, start, data, hp.lr, epochs or hp.epochs,
                                         self.rng("train", idx, t), hp.batch_size)
        except learning.TrainingDiverged as exc:
            self.log(t, "diverged", f"c{idx:03d} {exc}")
            return np.array(start, copy=True)

    # -- network ----------------------------------------------------------

    def _deliver(self, t):
        for recipient, upd in self.outbox.pop(t, []):
            c = self.clients.get(recipient)
            if c is None or not c.alive:
                continue
            c.inbox[upd.sender] = upd

    def _maintenance(self, t):
        self.overlay.send_heartbeats(t)
        for ev in self.overlay.maintenance_round(t):
            self.log(t, "repair", f"{ev.detector} detected {ev.failed}")
            if ev.failed in self.clients:
                self.contract.deregister_client(ev.failed)
                self._drop(ev.failed)

    def _commit(self, t):
        if self.sc.reputation_enabled:
            purged = self.committee.purge()
            for cid in sorted(purged):
                self.log(t, "purge", cid)
        try:
            block = self.contract.commit_block(self.contract.active_auditors(), t)
        except QuorumError as exc:
            self.log(t, "block-rejected", str(exc))
            return
        self.log(t, "block", f"height={block.height} joins={len(block.table_delta.joining)} "
                 f"leaves={len(block.table_delta.leaving)} verifications={len(block.verification_digests)}")
        for cid in sorted(block.table_delta.expelled):
            if cid in self.clients:
                if cid in self.overlay:
                    self.overlay.leave_network(cid, t)
                self._drop(cid)
                self.expelled_at[cid] = t
                self.log(t, "expelled", cid)

    def _model_request(self, i, fee, t):
        buyer = f"service{i}"
        self.contract.deposit(buyer, fee, t)
        try:
            holder, digest = self.contract.serve_model_request(buyer, fee, self.rng("market", i), t)
        except RequestRejected as exc:
            self.log(t, "market-rejected", f"{buyer}: {exc}")
            return
        ok = self.contract.verify_fetched_model(holder, self.committee.models[digest], t)
        self.log(t, "market", f"{buyer} fetched {digest[:16]} from {holder} ok={ok}")

    # -- metrics ----------------------------------------------------------

    def _test_accuracy(self, weights) -> float:
        fp = hashlib.sha256(np.ascontiguousarray(weights).tobytes()).hexdigest()
        if fp not in self._acc_cache:
            self._acc_cache[fp] = learning.evaluate_accuracy(self.spec, weights, self.test)
        return self._acc_cache[fp]

    def all_ids(self):
        return self.sc.client_ids() + self.joiner_ids

    def collect_metrics(self, t) -> dict:
        honest = [c for cid, c in sorted(self.clients.items())
                  if c.role == "honest" and c.alive and c.weights is not None]
        accs = [self._test_accuracy(c.weights) for c in honest]
        row = {
            "round": t,
            "avg_honest_acc": math.fsum(accs) / len(accs) if accs else 0.0,
            "honest_clients": len(honest),
            "active_clients": sum(1 for c in self.clients.values() if c.alive),
            "malicious_active": sum(1 for c in self.clients.values() if c.role == "malicious"),
            "adversarial_sent": self.counters["adversarial_sent"],
            "successful_malicious": len(self._successful),
            "expelled_total": len(self.expelled_at),
            "verifications": self.counters["verifications"],
            "cache_hits": self.counters["cache_hits"],
            "pre_verifications": self.counters["pre_verifications"],
            "messages": self.counters["messages"],
            "blocks": len(self.contract.blocks),
            "mu": self.committee.history.mu if self.committee.history.mu is not None else "",
            "sigma": self.committee.history.sigma,
        }
        for cid in self.all_ids():
            rep = self.contract.working_reputation(cid)
            row[f"rep_{cid}"] = 0.0 if rep is Standing.EXPELLED else ("" if isinstance(rep, Standing) else rep)
        for cid in self.all_ids():
            row[f"reward_{cid}"] = self.contract.ledger.rewards_of(cid)
        return row

    def result(self) -> RunResult:
        columns = list(self.metrics[0]) if self.metrics else ["round"]
        problems = self.contract.check_invariants()
        summary = {
            "scenario": self.sc.name,
            "seed": self.sc.seed,
            "rounds": self.sc.max_rounds,
            "final_avg_honest_acc": self.metrics[-1]["avg_honest_acc"] if self.metrics else 0.0,
            "final_window_acc": (math.fsum(r["avg_honest_acc"] for r in self.metrics[-FINAL_WINDOW:])
                                 / len(self.metrics[-FINAL_WINDOW:])) if self.metrics else 0.0,
            "malicious": " ".join(sorted(self.plans)),
            "expelled": " ".join(f"{c}@{r}" for c, r in sorted(self.expelled_at.items())),
            "successful_malicious": len(self._successful),
            "verifications": self.counters["verifications"],
            "slashed_auditors": " ".join(a for a, acc in sorted(self.contract.auditors.items())
                                         if not acc.active),
            "chain_height": self.contract.height,
            "invariant_violations": len(problems),
        }
        result = RunResult(self.sc, list(self.metrics), columns, list(self.events), self.client_rows,
                           self.trace, summary, self)
        summary["event_log_sha256"] = hashlib.sha256(result.events_text().encode()).hexdigest()
        for p in problems:
            log.error("invariant violated: %s", p)
        return result


def run_scenario(scenario: Scenario) -> RunResult:
    return Simulation(scenario).run()


def export(result: RunResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        p = out / "metrics.csv"
        p.write_text(result.metrics_csv())
        written.append(p)
        p = out / "events.log"
        p.write_text(result.events_text())
        written.append(p)
        p = out / "chain.log"
        result.sim.contract.export(p)
        written.append(p)
        p = out / "clients.csv"
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CLIENT_LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows({k: _fmt(v) for k, v in r.items()} for r in result.client_rows)
        written.append(p)
        p = out / "verifications.csv"
        result.sim.committee.write_log(p)
        written.append(p)
        p = out / "topology.txt"
        result.sim.overlay.export_edge_list(p)
        written.append(p)
        p = out / "summary.txt"
        p.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in result.summary.items()))
        written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return written
