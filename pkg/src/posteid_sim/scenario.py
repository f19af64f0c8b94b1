"""Scenario orchestration, reports, and transcript re-verification.

RNG consumption order for a run (one ``random.Random(seed)`` for all):
server key seed; then, per installation in the order the flows run, the
uuid, the app key seed, and every nonce / ephemeral value / OTP / token in
message order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .client import (
    GENUINE_PACKAGE,
    DEFAULT_PID,
    OTP_PATTERN,
    EnrollmentFailed,
    PosteIdClient,
    RegistrationFailed,
    generate_fingerprint,
    inbox_otp_source,
    new_session,
    run_enrollment,
    run_registration,
)
from .envelope import EnvelopeError, MESSAGE_TABLE, decode_envelope, derive_keypair
from .server import IdentityServer, PolicyConfig, PolicyMode, RegState
from .trojan import AttackReport, Outcome, TrojanConfig, extract_codk, run_attack
from .world import AppKind, Permission, World

VICTIM_PHONE = "+391234500001"
VICTIM_USR = "mario.rossi"
VICTIM_PWD = "Tr0ub4dor&3"
REINSTALL_PID = "posteid-tab"

U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    pass


class ScenarioIOError(OSError):
    pass


class ScenarioName(Enum):
    LEGIT_ENROLL = "LEGIT_ENROLL"
    LEGIT_REINSTALL = "LEGIT_REINSTALL"
    ATTACK = "ATTACK"
    ATTACK_NO_SMS_PERM = "ATTACK_NO_SMS_PERM"
    ATTACK_BAD_CREDS = "ATTACK_BAD_CREDS"

    @property
    def is_attack(self) -> bool:
        return self.name.startswith("ATTACK")


def parse_scenario(name) -> ScenarioName:
    try:
        return name if isinstance(name, ScenarioName) else ScenarioName(str(name).upper())
    except ValueError:
        raise ConfigError(f"unknown scenario {name!r}") from None


def parse_policy(mode) -> PolicyMode:
    try:
        return mode if isinstance(mode, PolicyMode) else PolicyMode(str(mode).lower())
    except ValueError:
        raise ConfigError(f"unknown policy {mode!r}") from None


@dataclass(frozen=True)
class ScenarioConfig:
    name: ScenarioName
    policy: PolicyMode = PolicyMode.BASELINE
    seed: int = 0
    transcript_path: Optional[Path] = None
    report_path: Optional[Path] = None

    def __post_init__(self):
        object.__setattr__(self, "name", parse_scenario(self.name))
        object.__setattr__(self, "policy", parse_policy(self.policy))
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed <= U64_MAX:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")


# Whether the scenario's goal is reached: enrollment for the legit ones,
# full compromise for the attacks.
EXPECTED_OUTCOME = {
    (name, mode): Outcome.SUCCESS
    if name in (ScenarioName.LEGIT_ENROLL, ScenarioName.LEGIT_REINSTALL)
    or (name is ScenarioName.ATTACK and mode is PolicyMode.BASELINE)
    else Outcome.FAILED
    for name in ScenarioName
    for mode in PolicyMode
}

# (phase, seq or endpoint, status, cause) of the first failed attack phase.
_DENIED = ("FAKE_ENROLLMENT", 12, 409, "DISABLED")
EXPECTED_FAILURE = {
    (ScenarioName.ATTACK, PolicyMode.RESTRICT): ("DE_REGISTRATION", "/disableapp", 403, "GRACE_PERIOD"),
    (ScenarioName.ATTACK, PolicyMode.FIX): _DENIED,
    (ScenarioName.ATTACK_NO_SMS_PERM, PolicyMode.BASELINE): ("FAKE_ENROLLMENT", 11, None, "PERMISSION_DENIED"),
    (ScenarioName.ATTACK_NO_SMS_PERM, PolicyMode.RESTRICT): ("FAKE_ENROLLMENT", 11, None, "PERMISSION_DENIED"),
    (ScenarioName.ATTACK_NO_SMS_PERM, PolicyMode.FIX): _DENIED,
    **{
        (ScenarioName.ATTACK_BAD_CREDS, mode): ("FAKE_ENROLLMENT", 7, 401, "BAD_CREDENTIALS")
        for mode in PolicyMode
    },
}


@dataclass(frozen=True)
class TranscriptShape:
    """Event counts a transcript must show for a (scenario, policy) pair."""

    enrollments: int
    sms: int
    disables: int
    money_transfers: int


def expected_shape(name: ScenarioName, mode: PolicyMode) -> TranscriptShape:
    fix = mode is PolicyMode.FIX
    if name is ScenarioName.LEGIT_ENROLL:
        return TranscriptShape(1, 1, 0, 0)
    if name is ScenarioName.LEGIT_REINSTALL:
        return TranscriptShape(2, 1 if fix else 2, 0, 0)
    if name is ScenarioName.ATTACK and mode is PolicyMode.BASELINE:
        return TranscriptShape(2, 2, 1, 1)
    if name is ScenarioName.ATTACK and mode is PolicyMode.RESTRICT:
        return TranscriptShape(2, 2, 0, 0)
    if name is ScenarioName.ATTACK_NO_SMS_PERM and not fix:
        return TranscriptShape(1, 2, 0, 0)
    return TranscriptShape(1, 1, 0, 0)


@dataclass
class ScenarioReport:
    scenario: ScenarioName
    policy: PolicyMode
    seed: int
    outcome: Outcome
    expected_outcome: Outcome
    transcript_digest: str
    phases: Optional[AttackReport] = None

    @property
    def matches(self) -> bool:
        return self.outcome is self.expected_outcome

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "policy": self.policy.value,
            "seed": self.seed,
            "outcome": self.outcome.value,
            "expected_outcome": self.expected_outcome.value,
            "phases": self.phases.to_json() if self.phases else None,
            "transcript_digest": self.transcript_digest,
        }


@dataclass
class Simulation:
    world: World
    server: IdentityServer
    outcome: Outcome
    clients: dict = field(default_factory=dict)
    attack: Optional[AttackReport] = None

    @property
    def transcript(self) -> bytes:
        return self.world.transcript_bytes()


class Owner:
    """The human holding the victim phone.

    Approves a pending enrollment only while they are setting up a device
    themselves.
    """

    def __init__(self, server: IdentityServer):
        self.server = server
        self.setting_up_device = False

    def attach(self, world: World, client: PosteIdClient) -> None:
        def on_push(event: str, data: dict) -> None:
            if event == "approval_pending":
                self.server.approve_enrollment(client.session.pid, data["pending"], self.setting_up_device)

        world.subscribe(f"reg:{client.session.ref}", on_push)


def _enroll_genuine(world, server, app, device, pid, otp_app=None) -> PosteIdClient:
    client = PosteIdClient(new_session(world.rng), GENUINE_PACKAGE, world.channel(app), generate_fingerprint(device))
    run_registration(client)
    source = inbox_otp_source(world, otp_app or app, world.now, server.policy.otp_ttl_ticks)
    run_enrollment(client, VICTIM_USR, VICTIM_PWD, source, pid)
    return client


def simulate(name, policy=PolicyMode.BASELINE, seed: int = 0) -> Simulation:
    cfg = ScenarioConfig(name, policy, seed)
    world = World(cfg.seed)
    server = IdentityServer(world, derive_keypair(world.rng.randbytes(32)), GENUINE_PACKAGE.codk.key, PolicyConfig(cfg.policy))
    server.add_account(VICTIM_USR, VICTIM_PWD, VICTIM_PHONE)
    phone = world.add_device("victim-phone", os_version="14", rooted=False, model="PX-1", phone_number=VICTIM_PHONE)
    genuine = world.install_app(phone.id, "posteid", AppKind.GENUINE_POSTEID, [Permission.NETWORK, Permission.READ_SMS])
    owner = Owner(server)

    sim = Simulation(world, server, Outcome.FAILED)
    try:
        victim = _enroll_genuine(world, server, genuine, phone, DEFAULT_PID)
    except (RegistrationFailed, EnrollmentFailed):
        return sim
    owner.attach(world, victim)
    sim.clients["victim"] = victim

    if cfg.name is ScenarioName.LEGIT_ENROLL:
        sim.outcome = Outcome.SUCCESS
    elif cfg.name is ScenarioName.LEGIT_REINSTALL:
        tablet = world.add_device("victim-tablet", os_version="14", rooted=False, model="TB-2")
        app2 = world.install_app(tablet.id, "posteid-tablet", AppKind.GENUINE_POSTEID, [Permission.NETWORK])
        owner.setting_up_device = True
        try:
            # no SIM in the tablet: the owner reads the code on the phone
            sim.clients["second"] = _enroll_genuine(world, server, app2, tablet, REINSTALL_PID, otp_app=genuine)
        except (RegistrationFailed, EnrollmentFailed):
            pass
        finally:
            owner.setting_up_device = False
        states = {r.state for r in server.accounts[VICTIM_USR].devices}
        if states == {RegState.ENROLLED} and len(server.accounts[VICTIM_USR].devices) == 2:
            sim.outcome = Outcome.SUCCESS
    else:
        perms = [Permission.NETWORK]
        if cfg.name is not ScenarioName.ATTACK_NO_SMS_PERM:
            perms.append(Permission.READ_SMS)
        trojan = world.install_app(phone.id, "post-office-maps", AppKind.TROJAN, perms)
        tcfg = TrojanConfig(
            stolen_usr=VICTIM_USR,
            stolen_pwd="guess-1234" if cfg.name is ScenarioName.ATTACK_BAD_CREDS else VICTIM_PWD,
            extracted_codk=extract_codk(GENUINE_PACKAGE),
            host_device=phone.id,
        )
        sim.attack = run_attack(tcfg, world, trojan, victim)
        sim.outcome = sim.attack.overall
    return sim


def run_scenario(cfg: ScenarioConfig) -> ScenarioReport:
    sim = simulate(cfg.name, cfg.policy, cfg.seed)
    data = sim.transcript
    report = ScenarioReport(
        scenario=cfg.name,
        policy=cfg.policy,
        seed=cfg.seed,
        outcome=sim.outcome,
        expected_outcome=EXPECTED_OUTCOME[cfg.name, cfg.policy],
        transcript_digest=hashlib.sha256(data).hexdigest(),
        phases=sim.attack,
    )
    try:
        if cfg.transcript_path is not None:
            Path(cfg.transcript_path).write_bytes(data)
        if cfg.report_path is not None:
            Path(cfg.report_path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ScenarioIOError(str(exc)) from exc
    return report


# ---------------------------------------------------------------------------
# Transcript verification
# ---------------------------------------------------------------------------

_EVENT_FIELDS = {"t", "channel", "from", "to", "event", "envelope", "sms_body"}
_REQUIRED = {"t", "channel", "from", "to", "event"}


@dataclass
class Verdict:
    ok: bool
    violations: list

    def __bool__(self) -> bool:
        return self.ok

    def kinds(self) -> set:
        return {v["violation"] for v in self.violations}


def _rank(seq: int) -> int:
    return 16 if seq >= 16 else seq


def verify_transcript(path, expectations: Optional[ScenarioConfig] = None) -> Verdict:
    """Re-check a JSONL transcript. Content problems are reported, not raised."""
    violations = []

    def bad(line: int, kind: str, detail: str) -> None:
        violations.append({"line": line, "violation": kind, "detail": detail})

    lines = Path(path).read_bytes().splitlines()

    events = []
    for n, raw in enumerate(lines, 1):
        try:
            rec = json.loads(raw)
        except ValueError as exc:
            bad(n, "parse", str(exc))
            continue
        if not isinstance(rec, dict) or not _REQUIRED <= set(rec) or set(rec) - _EVENT_FIELDS:
            bad(n, "event-fields", "event fields do not match the transcript schema")
            continue
        env = None
        if "envelope" in rec:
            try:
                env = decode_envelope(rec["envelope"].encode("utf-8"))
            except EnvelopeError as exc:
                kind = getattr(exc, "violation", exc.code.lower())
                bad(n, kind if kind == "enc-binding" else f"envelope-{kind}", str(exc))
                continue
        events.append((n, rec, env))

    last_t = 0
    last_req: dict[str, int] = {}
    open_req = None  # (app, seq) awaiting its response
    for n, rec, env in events:
        if not isinstance(rec["t"], int) or rec["t"] < last_t:
            bad(n, "clock", "logical time went backwards")
        else:
            last_t = rec["t"]
        if rec["channel"] == "sms" and not OTP_PATTERN.match(rec.get("sms_body", "")):
            bad(n, "sms-template", f"SMS body {rec.get('sms_body')!r} does not match the OTP template")
        if env is None:
            continue
        if env.is_request:
            if open_req is not None:
                bad(n, "response-missing", f"request seq {env.seq} sent before seq {open_req[1]} was answered")
            app = rec["from"]
            prev = last_req.get(app)
            if env.seq == 1:
                prev = None
            if prev is not None and _rank(env.seq) < _rank(prev):
                bad(n, "seq-order", f"{app} sent seq {env.seq} after seq {prev}")
            if prev is None and env.seq != 1:
                bad(n, "seq-order", f"{app} started a flow at seq {env.seq}")
            last_req[app] = env.seq
            open_req = (app, env.seq)
        else:
            if open_req is None or open_req[0] != rec["to"] or env.seq != open_req[1] + 1:
                bad(n, "response-before-request", f"response seq {env.seq} has no matching request")
            open_req = None

    if expectations is not None:
        _check_shape(events, expectations, bad)
    return Verdict(not violations, violations)


def _check_shape(events, cfg: ScenarioConfig, bad) -> None:
    want = expected_shape(cfg.name, cfg.policy)
    enroll_at, disable_at, money, sms = [], [], 0, []
    for n, rec, env in events:
        if env is not None and env.ok and env.seq == 15:
            enroll_at.append(n)
        if env is not None and env.ok and env.seq == 17:
            disable_at.append(n)
        if rec["event"] == "level2_action/MONEY_TRANSFER":
            money += 1
        if rec["channel"] == "sms":
            sms.append(n)
    got = TranscriptShape(len(enroll_at), len(sms), len(disable_at), money)
    if got != want:
        bad(0, "scenario-shape", f"expected {want}, transcript shows {got}")
    if want.disables and enroll_at and disable_at and disable_at[0] < enroll_at[-1]:
        bad(disable_at[0], "scenario-shape", "device disabled before the second enrollment")

    if cfg.name is ScenarioName.LEGIT_ENROLL:
        seqs = [env.seq for _, _, env in events if env is not None]
        if seqs != [s for s in MESSAGE_TABLE if s <= 15]:
            bad(0, "flow-fidelity", f"http seqs {seqs} are not exactly 1..15 without 11")
        pos10 = next((n for n, _, e in events if e is not None and e.seq == 10), None)
        pos12 = next((n for n, _, e in events if e is not None and e.seq == 12), None)
        between = [n for n in sms if pos10 is not None and pos12 is not None and pos10 < n < pos12]
        if len(between) != 1:
            bad(0, "flow-fidelity", "expected exactly one SMS between seq 10 and seq 12")
