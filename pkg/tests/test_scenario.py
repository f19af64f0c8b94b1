import json

import pytest

from posteid_sim.scenario import (
    EXPECTED_FAILURE,
    EXPECTED_OUTCOME,
    ConfigError,
    ScenarioConfig,
    ScenarioIOError,
    ScenarioName,
    VICTIM_USR,
    run_scenario,
    simulate,
    verify_transcript,
)
from posteid_sim.server import PolicyMode, RegState
from posteid_sim.trojan import Outcome

GRID = [(n, m) for n in ScenarioName for m in PolicyMode]


def lines_of(sim):
    return sim.transcript.decode().splitlines()


def seq_of(line):
    env = json.loads(line).get("envelope")
    return json.loads(env)["seq"] if env else None


class TestRun:
    def test_legit_enroll(self, tmp_path):
        cfg = ScenarioConfig(ScenarioName.LEGIT_ENROLL, PolicyMode.BASELINE, 7, tmp_path / "t.jsonl", tmp_path / "r.json")
        report = run_scenario(cfg)
        assert report.outcome is Outcome.SUCCESS and report.matches
        seqs = [seq_of(l) for l in (tmp_path / "t.jsonl").read_text().splitlines() if seq_of(l)]
        assert seqs == [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 13, 14, 15]

    def test_report_file(self, tmp_path):
        cfg = ScenarioConfig("ATTACK", "fix", 7, tmp_path / "t.jsonl", tmp_path / "r.json")
        report = run_scenario(cfg)
        data = json.loads((tmp_path / "r.json").read_text())
        assert set(data) == {"scenario", "policy", "seed", "outcome", "expected_outcome", "phases", "transcript_digest"}
        assert data["outcome"] == "FAILED" and data["expected_outcome"] == "FAILED"
        assert data["phases"]["phase_results"][-1]["phase"] == "FAKE_ENROLLMENT"
        assert data["transcript_digest"] == report.transcript_digest
        assert len(data["transcript_digest"]) == 64

    def test_attack_baseline_state(self):
        sim = simulate(ScenarioName.ATTACK, PolicyMode.BASELINE, 7)
        assert sim.outcome is Outcome.SUCCESS
        devices = sim.server.accounts[VICTIM_USR].devices
        assert sorted(d.state.value for d in devices) == ["DISABLED", "ENROLLED"]

    def test_reinstall_fix_uses_approval(self):
        sim = simulate(ScenarioName.LEGIT_REINSTALL, PolicyMode.FIX, 7)
        assert sim.outcome is Outcome.SUCCESS
        events = [json.loads(l)["event"] for l in lines_of(sim)]
        assert "approval_pending" in events and "approval_granted" in events
        assert sum(json.loads(l)["channel"] == "sms" for l in lines_of(sim)) == 1

    @pytest.mark.parametrize("name,mode", GRID, ids=lambda x: getattr(x, "value", x))
    def test_grid(self, name, mode):
        sim = simulate(name, mode, 7)
        assert sim.outcome is EXPECTED_OUTCOME[name, mode]
        if (name, mode) in EXPECTED_FAILURE:
            f = sim.attack.failed
            assert (f.phase.value, f.failing_seq_or_endpoint, f.status, f.cause) == EXPECTED_FAILURE[name, mode]

    def test_unwritable_path(self, tmp_path):
        cfg = ScenarioConfig("LEGIT_ENROLL", "baseline", 1, tmp_path / "missing" / "t.jsonl", tmp_path / "r.json")
        with pytest.raises(ScenarioIOError):
            run_scenario(cfg)

    @pytest.mark.parametrize("kw", [{"name": "NOPE"}, {"policy": "strict"}, {"seed": -1}, {"seed": 2**64}, {"seed": True}])
    def test_bad_config(self, kw):
        args = {"name": "ATTACK", "policy": "baseline", "seed": 0, **kw}
        with pytest.raises(ConfigError):
            ScenarioConfig(**args)


class TestVerify:
    def _write(self, tmp_path, lines):
        p = tmp_path / "t.jsonl"
        p.write_text("\n".join(lines) + "\n")
        return p

    @pytest.mark.parametrize("name,mode", GRID, ids=lambda x: getattr(x, "value", x))
    def test_every_run_verifies(self, tmp_path, name, mode):
        p = self._write(tmp_path, lines_of(simulate(name, mode, 5)))
        verdict = verify_transcript(p, ScenarioConfig(name, mode))
        assert verdict, verdict.violations

    def test_seq12_before_seq9(self, tmp_path):
        lines = lines_of(simulate(ScenarioName.LEGIT_ENROLL, PolicyMode.BASELINE, 7))
        i9 = next(i for i, l in enumerate(lines) if seq_of(l) == 9)
        i12 = next(i for i, l in enumerate(lines) if seq_of(l) == 12)
        moved = lines[i12:i12 + 2]
        edited = lines[:i9] + moved + lines[i9:i12] + lines[i12 + 2:]
        verdict = verify_transcript(self._write(tmp_path, edited))
        assert not verdict and "seq-order" in verdict.kinds()

    def test_plain_enc_on_seq3(self, tmp_path):
        lines = lines_of(simulate(ScenarioName.LEGIT_ENROLL, PolicyMode.BASELINE, 7))
        i3 = next(i for i, l in enumerate(lines) if seq_of(l) == 3)
        rec = json.loads(lines[i3])
        env = json.loads(rec["envelope"])
        env["enc"] = "plain"
        rec["envelope"] = json.dumps(env, sort_keys=True, separators=(",", ":"))
        lines[i3] = json.dumps(rec, sort_keys=True)
        verdict = verify_transcript(self._write(tmp_path, lines))
        assert not verdict and "enc-binding" in verdict.kinds()

    def test_bad_sms_body(self, tmp_path):
        lines = lines_of(simulate(ScenarioName.LEGIT_ENROLL, PolicyMode.BASELINE, 7))
        i = next(i for i, l in enumerate(lines) if json.loads(l)["channel"] == "sms")
        rec = json.loads(lines[i])
        rec["sms_body"] = "your code is 123456"
        lines[i] = json.dumps(rec, sort_keys=True)
        assert "sms-template" in verify_transcript(self._write(tmp_path, lines)).kinds()

    def test_garbage_line(self, tmp_path):
        lines = lines_of(simulate(ScenarioName.LEGIT_ENROLL, PolicyMode.BASELINE, 7)) + ["{not json"]
        assert "parse" in verify_transcript(self._write(tmp_path, lines)).kinds()

    def test_wrong_scenario_shape(self, tmp_path):
        p = self._write(tmp_path, lines_of(simulate(ScenarioName.LEGIT_ENROLL, PolicyMode.BASELINE, 7)))
        verdict = verify_transcript(p, ScenarioConfig(ScenarioName.ATTACK, PolicyMode.BASELINE))
        assert "scenario-shape" in verdict.kinds()


def test_determinism():
    a = simulate(ScenarioName.ATTACK, PolicyMode.RESTRICT, 99).transcript
    b = simulate(ScenarioName.ATTACK, PolicyMode.RESTRICT, 99).transcript
    c = simulate(ScenarioName.ATTACK, PolicyMode.RESTRICT, 100).transcript
    assert a == b and a != c


def test_final_states_legit_reinstall():
    sim = simulate(ScenarioName.LEGIT_REINSTALL, PolicyMode.RESTRICT, 1)
    assert {d.state for d in sim.server.accounts[VICTIM_USR].devices} == {RegState.ENROLLED}
