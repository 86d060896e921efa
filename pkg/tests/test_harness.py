from pathlib import Path

import pytest

from bdfl import cli
from bdfl.adversary import ScenarioRejected
from bdfl.auditor import Label
from bdfl.scenario import ChurnEvent, load_scenario, scenario_from_dict
from bdfl.sim import export, run_scenario

SMOKE = Path(__file__).resolve().parents[1] / "scenarios" / "smoke_synthetic.toml"


@pytest.fixture(scope="module")
def smoke():
    return run_scenario(load_scenario(SMOKE))


def test_same_seed_is_byte_identical(smoke):
    again = run_scenario(load_scenario(SMOKE))
    assert again.metrics_csv() == smoke.metrics_csv()
    assert again.summary["event_log_sha256"] == smoke.summary["event_log_sha256"]
    other = run_scenario(load_scenario(SMOKE).with_overrides(seed=4))
    assert other.metrics_csv() != smoke.metrics_csv()


def test_run_keeps_chain_and_ledger_invariants(smoke):
    assert smoke.summary["invariant_violations"] == 0
    assert smoke.sim.contract.check_invariants() == []
    assert smoke.summary["chain_height"] == 30 // 5


def test_attackers_expelled_and_never_aggregated(smoke):
    sim = smoke.sim
    attackers = set(smoke.summary["malicious"].split())
    assert attackers and attackers <= set(sim.expelled_at)
    malicious = {r.fingerprint for r in sim.committee.records if r.verdict is Label.MALICIOUS}
    assert not any(e.fingerprint in malicious for e in smoke.trace)
    assert smoke.summary["successful_malicious"] == 0


def test_expelled_rewards_plateau(smoke):
    for cid, rnd in smoke.sim.expelled_at.items():
        after = [r[f"reward_{cid}"] for r in smoke.metrics if r["round"] >= rnd]
        assert len(set(after)) == 1


def test_churn_join_fail_leave(smoke):
    events = [e.split("\t") for e in smoke.events]
    assert any(k == "join" and d.startswith("c020 ") for _, k, d in events)
    row = next(r for r in smoke.metrics if r["round"] == 8)
    assert row["rep_c020"] == 0.5
    repaired = [int(t) for t, k, d in events if k == "repair" and d.endswith("detected c003")]
    assert repaired and 12 < repaired[0] <= 12 + 3
    assert ["15", "leave", "c005"] in events
    assert "c003" not in smoke.sim.clients and "c005" not in smoke.sim.clients


def test_unknown_churn_is_rejected():
    sc = load_scenario(SMOKE).with_overrides(
        max_rounds=4, churn=[ChurnEvent(2, "leave", "c999"), ChurnEvent(3, "join", "c000")])
    res = run_scenario(sc)
    rejected = [e for e in res.events if "churn-rejected" in e]
    assert len(rejected) == 2


def test_accuracy_settles_without_attackers():
    sc = load_scenario(SMOKE).with_overrides(malicious_fraction=0.0, churn=[], model_requests=[])
    res = run_scenario(sc)
    accs = [r["avg_honest_acc"] for r in res.metrics]
    for prev, cur in zip(accs[4:], accs[5:]):
        assert cur >= prev - 0.02
    assert accs[-1] > accs[0]


def test_mechanism_off_accepts_everything():
    sc = load_scenario(SMOKE).with_overrides(reputation_enabled=False, max_rounds=6,
                                             churn=[], model_requests=[])
    res = run_scenario(sc)
    assert res.summary["verifications"] == 0
    assert {e.verdict for e in res.trace} == {"unverified"}
    assert res.summary["successful_malicious"] > 0


def test_export_writes_all_files(smoke, tmp_path):
    written = export(smoke, tmp_path / "out")
    names = {p.name for p in written}
    assert names == {"metrics.csv", "events.log", "chain.log", "clients.csv",
                     "verifications.csv", "topology.txt", "summary.txt"}
    assert (tmp_path / "out" / "metrics.csv").read_text() == smoke.metrics_csv()


def test_export_to_unwritable_path_names_it(smoke, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError) as ei:
        export(smoke, blocker / "out")
    assert str(blocker / "out") in str(ei.value)


def test_cli_run_and_checks(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--scenario", str(SMOKE), "--rounds", "10", "--out", str(out)]) == 0
    assert cli.main(["topology-check", "--snapshot", str(out / "topology.txt")]) == 0
    assert cli.main(["chain-verify", "--chain", str(out / "chain.log")]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[0].startswith("round,avg_honest_acc")


def test_cli_sweep(tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--scenario", str(SMOKE), "--param", "max_rounds=2:3:1",
                     "--out", str(out)]) == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("max_rounds,") and len(rows) == 3
    assert cli.main(["sweep", "--scenario", str(SMOKE), "--param", "nope=1,2"]) == 2


def test_cli_errors(tmp_path):
    assert cli.main(["run", "--scenario", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "x"\n')
    assert cli.main(["run", "--scenario", str(bad)]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["run", "--scenario", str(SMOKE), "--rounds", "1",
                     "--out", str(blocker / "out")]) == 4


@pytest.mark.parametrize("raw", [
    {"name": "x"},
    {"schema_version": 2},
    {"schema_version": 1, "bogus": 1},
    {"schema_version": 1, "chain": {"bogus": 1}},
    {"schema_version": 1, "num_auditors": 9,
     "corrupt_auditors": [{"auditor": f"a0{i}", "offset": -0.5} for i in range(3)]},
    {"schema_version": 1, "attack_mode": "teleport"},
    {"schema_version": 1, "churn": [{"time": 0, "kind": "join", "client": "c1"}]},
])
def test_bad_scenarios_rejected(raw):
    with pytest.raises(ScenarioRejected):
        scenario_from_dict(raw)


def test_bundled_scenarios_load():
    for path in sorted(SMOKE.parent.glob("*.toml")):
        sc = load_scenario(path)
        assert sc.schema_version == 1
