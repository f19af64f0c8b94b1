"""Attacker-in-the-Device: a malicious app on the victim's phone.

It holds the victim's level-0 credentials, can read the phone's SMS and
can use the network. With nothing more it enrolls itself as a second
PosteID installation, disables the real one and acts at level 2.

The trojan only ever touches the world through ``send_http`` and
``read_sms`` on its own app instance, plus the offline key extraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .client import (
    AppPackage,
    ClientSession,
    EnrollmentFailed,
    Fingerprint,
    PosteIdClient,
    RegistrationFailed,
    inbox_otp_source,
    level2_login,
    new_session,
    run_enrollment,
    run_registration,
)
from .envelope import SymmetricKey
from .server import OTP_TTL_TICKS
from .world import AppInstance, PermissionDenied, World

DEFAULT_ATTACK_PID = "posteid-evil"


class Phase(Enum):
    FAKE_REGISTRATION = "FAKE_REGISTRATION"
    FAKE_ENROLLMENT = "FAKE_ENROLLMENT"
    DE_REGISTRATION = "DE_REGISTRATION"
    FINALIZATION = "FINALIZATION"


class Outcome(Enum):
    SUCCESS = "SUCCESS"
    FAILED = "FAILED"


@dataclass(frozen=True)
class TrojanConfig:
    stolen_usr: str
    stolen_pwd: str
    extracted_codk: SymmetricKey
    host_device: str
    attack_pid: str = DEFAULT_ATTACK_PID
    # profile of the device the trojan pretends to be
    fake_os_version: str = "13"
    fake_rooted: bool = False
    fake_model: str = "FAKE"


@dataclass
class PhaseResult:
    phase: Phase
    outcome: Outcome
    failing_seq_or_endpoint: Union[int, str, None] = None
    status: Optional[int] = None
    cause: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "phase": self.phase.value,
            "outcome": self.outcome.value,
            "failing_seq_or_endpoint": self.failing_seq_or_endpoint,
            "status": self.status,
            "cause": self.cause,
        }


@dataclass
class AttackReport:
    phase_results: list = field(default_factory=list)
    trojan_ref: Optional[str] = None

    @property
    def overall(self) -> Outcome:
        done = [r.phase for r in self.phase_results if r.outcome is Outcome.SUCCESS]
        return Outcome.SUCCESS if done == list(Phase) else Outcome.FAILED

    @property
    def failed(self) -> Optional[PhaseResult]:
        for r in self.phase_results:
            if r.outcome is Outcome.FAILED:
                return r
        return None

    def to_json(self) -> dict:
        return {
            "phase_results": [r.to_json() for r in self.phase_results],
            "overall": self.overall.value,
        }


def extract_codk(package: AppPackage) -> SymmetricKey:
    # Stands in for unpacking the public APK and pulling the constant out.
    return package.codk


def synthesize_fingerprint(os_version: str, rooted: bool, model: str) -> Fingerprint:
    return Fingerprint(os_version, rooted, model)


def run_attack(
    cfg: TrojanConfig,
    world: World,
    trojan_app: AppInstance,
    victim: Optional[PosteIdClient] = None,
) -> AttackReport:
    """Run the four phases in order, stopping at the first failure.

    ``victim`` is the genuine app's client; it is used only to observe,
    after the fact, that the real owner has been locked out.
    """
    report = AttackReport()
    net = world.channel(trojan_app)
    package = AppPackage(cfg.extracted_codk, "trojan")
    session: ClientSession = new_session(world.rng)
    report.trojan_ref = session.ref
    fing = synthesize_fingerprint(cfg.fake_os_version, cfg.fake_rooted, cfg.fake_model)
    client = PosteIdClient(session, package, net, fing)

    def fail(phase, where, status, cause) -> AttackReport:
        report.phase_results.append(PhaseResult(phase, Outcome.FAILED, where, status, cause))
        return report

    def ok(phase) -> None:
        report.phase_results.append(PhaseResult(phase, Outcome.SUCCESS))

    # 1. claim to be a fresh install on a new device
    try:
        run_registration(client)
    except RegistrationFailed as exc:
        return fail(Phase.FAKE_REGISTRATION, exc.seq, exc.status, exc.reason)
    except PermissionDenied as exc:
        return fail(Phase.FAKE_REGISTRATION, 1, None, exc.code)
    ok(Phase.FAKE_REGISTRATION)

    # 2. enroll with the stolen credentials, lifting the OTP off the SMS inbox
    otp_source = inbox_otp_source(world, trojan_app, world.now, OTP_TTL_TICKS)
    try:
        run_enrollment(client, cfg.stolen_usr, cfg.stolen_pwd, otp_source, cfg.attack_pid)
    except EnrollmentFailed as exc:
        return fail(Phase.FAKE_ENROLLMENT, exc.seq, exc.status, exc.reason)
    ok(Phase.FAKE_ENROLLMENT)

    # 3. cut the owner out: disable every other device on the account
    rsp = client.level2_action("READ_PRIVATE_DATA")
    if not rsp.ok:
        return fail(Phase.DE_REGISTRATION, "/level2action", rsp.status, rsp.payload.decode())
    devices = client.read_level2(rsp)["devices"]
    for dev in devices:
        if dev["reg"] == session.ref or dev["state"] == "DISABLED":
            continue
        rsp = client.disable_app(dev["reg"])
        if not rsp.ok:
            return fail(Phase.DE_REGISTRATION, "/disableapp", rsp.status, rsp.payload.decode())
    ok(Phase.DE_REGISTRATION)

    # 4. act as the user
    rsp = client.level2_action("MONEY_TRANSFER")
    if not rsp.ok:
        return fail(Phase.FINALIZATION, "/level2action", rsp.status, rsp.payload.decode())
    if victim is not None:
        status = level2_login(victim)
        if status == 200:
            return fail(Phase.FINALIZATION, "/level2action", status, "VICTIM_STILL_ACTIVE")
    ok(Phase.FINALIZATION)
    return report


def report_json(report: AttackReport) -> str:
    return json.dumps(report.to_json(), indent=2)
