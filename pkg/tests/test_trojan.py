import json

from posteid_sim.client import GENUINE_PACKAGE, Fingerprint, level2_login
from posteid_sim.envelope import CipherSuite, open_sealed
from posteid_sim.scenario import VICTIM_PHONE, VICTIM_PWD, VICTIM_USR, _enroll_genuine
from posteid_sim.server import IdentityServer, PolicyConfig, PolicyMode, RegState
from posteid_sim.envelope import derive_keypair
from posteid_sim.trojan import (
    Outcome,
    Phase,
    TrojanConfig,
    extract_codk,
    report_json,
    run_attack,
    synthesize_fingerprint,
)
from posteid_sim.world import AppKind, Permission, World


class Victim:
    """A victim phone with an enrolled genuine app and room for a trojan."""

    def __init__(self, mode=PolicyMode.BASELINE, seed=3):
        self.world = World(seed)
        self.server = IdentityServer(
            self.world, derive_keypair(self.world.rng.randbytes(32)), GENUINE_PACKAGE.codk.key, PolicyConfig(mode)
        )
        self.server.add_account(VICTIM_USR, VICTIM_PWD, VICTIM_PHONE)
        self.phone = self.world.add_device("victim-phone", os_version="14", model="PX-1", phone_number=VICTIM_PHONE)
        app = self.world.install_app(self.phone.id, "posteid", AppKind.GENUINE_POSTEID, [Permission.NETWORK, Permission.READ_SMS])
        self.client = _enroll_genuine(self.world, self.server, app, self.phone, "posteid-user")

    def attack(self, device=None, perms=(Permission.NETWORK, Permission.READ_SMS), pwd=VICTIM_PWD):
        device = device or self.phone
        self.trojan = self.world.install_app(device.id, "maps", AppKind.TROJAN, perms)
        cfg = TrojanConfig(VICTIM_USR, pwd, extract_codk(GENUINE_PACKAGE), device.id)
        return run_attack(cfg, self.world, self.trojan, self.client)


def test_extracted_key_matches_server():
    v = Victim()
    assert extract_codk(GENUINE_PACKAGE).key == v.server.codk
    assert extract_codk(GENUINE_PACKAGE) == extract_codk(GENUINE_PACKAGE)


def test_extracted_key_opens_message_2():
    v = Victim()
    rec = next(r for r in v.world.transcript if r["envelope"] and json.loads(r["envelope"])["seq"] == 2)
    from posteid_sim.envelope import decode_envelope

    env = decode_envelope(rec["envelope"].encode())
    assert open_sealed(CipherSuite.TOY_V1, extract_codk(GENUINE_PACKAGE).key, env.payload)


def test_fingerprint_same_as_genuine():
    genuine = Fingerprint("14", False, "PX-1")
    assert synthesize_fingerprint("14", False, "PX-1").canonical == genuine.canonical


def test_baseline_full_compromise():
    v = Victim()
    report = v.attack()
    assert report.overall is Outcome.SUCCESS
    assert [r.phase for r in report.phase_results] == list(Phase)
    assert all(r.outcome is Outcome.SUCCESS for r in report.phase_results)

    acct = v.server.accounts[VICTIM_USR]
    states = {d.ref: d.state for d in acct.devices}
    assert states == {report.trojan_ref: RegState.ENROLLED, v.client.session.ref: RegState.DISABLED}
    assert list(acct.pids.values()) == ["posteid-evil"]
    assert level2_login(v.client) == 401
    money = [r for r in v.world.transcript if r["event"] == "level2_action/MONEY_TRANSFER"]
    assert [m["from"] for m in money] == [f"reg:{report.trojan_ref}"]


def test_fake_fingerprint_registered():
    v = Victim()
    report = v.attack()
    reg = v.server.registration(report.trojan_ref)
    assert reg.fingerprint.canonical == "os=13;rooted=0;model=FAKE"


def test_restrict_stops_at_deregistration():
    report = Victim(PolicyMode.RESTRICT).attack()
    assert [r.outcome for r in report.phase_results] == [Outcome.SUCCESS] * 2 + [Outcome.FAILED]
    f = report.failed
    assert (f.phase, f.failing_seq_or_endpoint, f.status, f.cause) == (
        Phase.DE_REGISTRATION, "/disableapp", 403, "GRACE_PERIOD",
    )


def test_fix_stops_at_enrollment_without_sms():
    v = Victim(PolicyMode.FIX)
    sms_before = len(v.phone.sms_inbox)
    report = v.attack()
    assert report.failed.phase is Phase.FAKE_ENROLLMENT
    assert report.failed.failing_seq_or_endpoint == 12
    assert len(v.phone.sms_inbox) == sms_before
    assert v.server.registration(report.trojan_ref).token is None
    assert level2_login(v.client) == 200


# one test per capability


def test_needs_victim_device():
    v = Victim()
    other = v.world.add_device("attacker-phone", os_version="14", model="ZZ", phone_number="+390000000777")
    report = v.attack(device=other)
    assert report.overall is Outcome.FAILED
    assert (report.failed.phase, report.failed.cause) == (Phase.FAKE_ENROLLMENT, "OTP_NOT_FOUND")


def test_needs_credentials():
    report = Victim().attack(pwd="guess-1234")
    assert report.overall is Outcome.FAILED
    f = report.failed
    assert (f.phase, f.failing_seq_or_endpoint, f.status) == (Phase.FAKE_ENROLLMENT, 7, 401)


def test_needs_read_sms():
    report = Victim().attack(perms=(Permission.NETWORK,))
    assert report.overall is Outcome.FAILED
    assert (report.failed.phase, report.failed.cause) == (Phase.FAKE_ENROLLMENT, "PERMISSION_DENIED")


def test_trojan_emits_only_http_requests():
    v = Victim()
    v.attack()
    mine = [r for r in v.world.transcript if r["from"] == v.trojan.address]
    assert mine
    assert {(r["channel"], r["event"]) for r in mine} == {("http", "request")}


def test_report_json_shape():
    report = Victim(PolicyMode.RESTRICT).attack()
    data = json.loads(report_json(report))
    assert data["overall"] == "FAILED"
    assert [p["phase"] for p in data["phase_results"]] == ["FAKE_REGISTRATION", "FAKE_ENROLLMENT", "DE_REGISTRATION"]
