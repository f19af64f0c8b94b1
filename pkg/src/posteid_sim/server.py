"""The identity provider: accounts, per-device registrations, and the endpoints.

A registration moves strictly along::

    REGISTER_INIT -> REGISTERED -> ACTIVATED -> LVL0_AUTH -> OTP_PENDING
                  -> LVL2_GRANTED -> ENROLLED

and any state may drop to DISABLED. Under the FIX policy an approval from an
already-enrolled device takes LVL0_AUTH straight to LVL2_GRANTED instead of
going through an SMS code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .client import Fingerprint
from .envelope import (
    CertRole,
    CipherSuite,
    Direction,
    Enc,
    Envelope,
    EnvelopeError,
    KeyPair,
    MESSAGE_TABLE,
    canonical_json,
    hybrid_open,
    hybrid_seal,
    issue_certificate,
    open_sealed,
    seal,
    uuid_digest,
)
from .world import SMS_TEMPLATE, World

SERVER_ID = "posteid-server"

OTP_TTL_TICKS = 120
OTP_ATTEMPTS = 3
LVL0_ATTEMPTS = 3
GRACE_TICKS = 1440
PID_MIN_LEN, PID_MAX_LEN = 6, 12


class PolicyMode(Enum):
    BASELINE = "baseline"
    RESTRICT = "restrict"
    FIX = "fix"


@dataclass(frozen=True)
class PolicyConfig:
    mode: PolicyMode = PolicyMode.BASELINE
    grace_ticks: int = GRACE_TICKS
    otp_ttl_ticks: int = OTP_TTL_TICKS

    def __post_init__(self):
        if self.grace_ticks <= 0 or self.otp_ttl_ticks <= 0:
            raise ValueError("grace_ticks and otp_ttl_ticks must be positive")


class RegState(Enum):
    REGISTER_INIT = "REGISTER_INIT"
    REGISTERED = "REGISTERED"
    ACTIVATED = "ACTIVATED"
    LVL0_AUTH = "LVL0_AUTH"
    OTP_PENDING = "OTP_PENDING"
    LVL2_GRANTED = "LVL2_GRANTED"
    ENROLLED = "ENROLLED"
    DISABLED = "DISABLED"


class AuthLevel(Enum):
    LVL0 = "lvl0"
    LVL2 = "lvl2"


class Level2Action(Enum):
    READ_PRIVATE_DATA = "READ_PRIVATE_DATA"
    MONEY_TRANSFER = "MONEY_TRANSFER"


@dataclass
class Otp:
    code: str
    issued_at: int
    attempts_left: int = OTP_ATTEMPTS
    used: bool = False


@dataclass
class AuthToken:
    value: bytes
    bound_registration: bytes
    issued_at: int


@dataclass(eq=False)
class DeviceRegistration:
    uuid_hash: bytes
    app_public: Optional[bytes] = None
    fingerprint: Optional[Fingerprint] = None
    state: RegState = RegState.REGISTER_INIT
    enrolled_at: Optional[int] = None
    otp: Optional[Otp] = None
    token: Optional[AuthToken] = None
    usr: Optional[str] = None
    lvl0_failures: int = 0
    # FIX policy only: None, "pending", "granted" or "delivered"
    approval: Optional[str] = None

    @property
    def ref(self) -> str:
        return self.uuid_hash.hex()


@dataclass
class AccountRecord:
    usr: str
    pwd: str
    phone_number: str
    devices: list = field(default_factory=list)
    pids: dict = field(default_factory=dict)  # uuid_hash hex -> pid


class Reject(Exception):
    def __init__(self, status: int, reason: str):
        super().__init__(f"{status} {reason}")
        self.status = status
        self.reason = reason


class IdentityServer:
    def __init__(
        self,
        world: World,
        keys: KeyPair,
        codk: bytes,
        policy: PolicyConfig = PolicyConfig(),
        server_id: str = SERVER_ID,
    ):
        self.world = world
        self.keys = keys
        self.codk = codk
        self.policy = policy
        self.server_id = server_id
        self.accounts: dict[str, AccountRecord] = {}
        self.registrations: dict[bytes, DeviceRegistration] = {}
        self.certificate = issue_certificate(keys, server_id, server_id, keys.public, CertRole.SERVER)
        world.connect(self)

    # -- accounts ----------------------------------------------------------

    def add_account(self, usr: str, pwd: str, phone_number: str) -> AccountRecord:
        if usr in self.accounts:
            raise ValueError(f"account {usr!r} already exists")
        acct = AccountRecord(usr, pwd, phone_number)
        self.accounts[usr] = acct
        return acct

    def registration(self, ref) -> DeviceRegistration:
        key = bytes.fromhex(ref) if isinstance(ref, str) else ref
        return self.registrations[key]

    def find_pid(self, pid: str) -> Optional[DeviceRegistration]:
        for acct in self.accounts.values():
            for ref, stored in acct.pids.items():
                if stored == pid:
                    return self.registrations[bytes.fromhex(ref)]
        return None

    def _enrolled(self, acct: AccountRecord, exclude: Optional[DeviceRegistration] = None):
        return [r for r in acct.devices if r.state is RegState.ENROLLED and r is not exclude]

    # -- dispatch ----------------------------------------------------------

    def handle(self, request: Envelope) -> Envelope:
        handlers = {
            1: self.handle_register_init,
            3: self.handle_register,
            5: self.handle_activation,
            7: self.handle_xmobileauth_lvl0,
            9: self.handle_xmobileauth_lvl2_request,
            12: self.handle_xmobileauth_otp,
            14: self.handle_register_app,
            16: self.handle_disable_app_request,
            18: self.handle_level2_action_request,
        }
        handler = handlers.get(request.seq)
        if handler is None or request.direction is not Direction.REQUEST:
            return self._error(request, 400, "BAD_REQUEST")
        try:
            return handler(request)
        except Reject as rej:
            return self._error(request, rej.status, rej.reason)

    def _error(self, request: Envelope, status: int, reason: str) -> Envelope:
        seq = request.seq + 1 if request.seq + 1 in MESSAGE_TABLE else 2
        return Envelope(
            seq=seq,
            endpoint=MESSAGE_TABLE[seq][0],
            direction=Direction.RESPONSE,
            enc=Enc.PLAIN,
            payload=reason.encode("ascii"),
            status=status,
        )

    def _ok(self, request: Envelope, body: bytes = b"", app_public: Optional[bytes] = None) -> Envelope:
        seq = request.seq + 1
        endpoint, _, enc = MESSAGE_TABLE[seq]
        rng = self.world.rng
        if enc is Enc.CODK:
            body = seal(CipherSuite.TOY_V1, self.codk, rng.randbytes(12), body)
        elif enc is Enc.APPK:
            body = hybrid_seal(app_public, rng.randbytes(32), rng.randbytes(12), body)
        return Envelope(seq, endpoint, Direction.RESPONSE, enc, body, status=200)

    def _open_srvk(self, request: Envelope) -> dict:
        try:
            raw = hybrid_open(self.keys, request.payload)
        except EnvelopeError as exc:
            raise Reject(400, exc.code) from None
        try:
            obj = json.loads(raw)
        except ValueError:
            raise Reject(400, "MALFORMED") from None
        if not isinstance(obj, dict):
            raise Reject(400, "MALFORMED")
        return obj

    def _session(self, body: dict) -> DeviceRegistration:
        # "reg" is the session handle: the hex uuid_hash from registration.
        try:
            key = bytes.fromhex(body["reg"])
        except (KeyError, TypeError, ValueError):
            raise Reject(400, "MALFORMED") from None
        reg = self.registrations.get(key)
        if reg is None:
            raise Reject(409, "UNKNOWN_REGISTRATION")
        return reg

    @staticmethod
    def _require(reg: DeviceRegistration, state: RegState) -> None:
        if reg.state is not state:
            raise Reject(409, "DISABLED" if reg.state is RegState.DISABLED else "WRONG_STATE")

    def _disable(self, reg: DeviceRegistration) -> None:
        reg.state = RegState.DISABLED
        reg.otp = None
        reg.token = None
        reg.approval = None
        if reg.usr is not None:
            self.accounts[reg.usr].pids.pop(reg.ref, None)

    def _issue_token(self, reg: DeviceRegistration) -> AuthToken:
        reg.token = AuthToken(self.world.rng.randbytes(32), reg.uuid_hash, self.world.now)
        return reg.token

    # -- registration phase ------------------------------------------------

    def handle_register_init(self, env: Envelope) -> Envelope:
        try:
            uuid_hash = open_sealed(CipherSuite.TOY_V1, self.codk, env.payload)
        except EnvelopeError as exc:
            raise Reject(400, exc.code) from None
        if len(uuid_hash) != 32:
            raise Reject(400, "MALFORMED")
        if uuid_hash in self.registrations:
            raise Reject(409, "ALREADY_REGISTERED")
        self.registrations[uuid_hash] = DeviceRegistration(uuid_hash)
        return self._ok(env, self.certificate.to_bytes())

    def handle_register(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        try:
            uuid_hash = bytes.fromhex(body["uuid_hash"])
            app_public = bytes.fromhex(body["appk"])
            fing = body["fing"]
        except (KeyError, TypeError, ValueError):
            raise Reject(400, "MALFORMED") from None
        reg = self.registrations.get(uuid_hash)
        if reg is None:
            raise Reject(409, "UNKNOWN_REGISTRATION")
        self._require(reg, RegState.REGISTER_INIT)
        if len(app_public) != 32:
            raise Reject(400, "MALFORMED")
        try:
            # Parsed, never checked for truthfulness: any well-formed
            # string built from public values is as good as a real one.
            fingerprint = Fingerprint.parse(fing)
        except (TypeError, ValueError):
            raise Reject(400, "BAD_FINGERPRINT") from None
        reg.app_public = app_public
        reg.fingerprint = fingerprint
        reg.state = RegState.REGISTERED
        cert = issue_certificate(self.keys, self.server_id, reg.ref, app_public, CertRole.APP)
        return self._ok(env, cert.to_bytes(), app_public)

    def handle_activation(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        reg = self._session(body)
        self._require(reg, RegState.REGISTERED)
        if body.get("echo") != reg.ref:
            raise Reject(400, "ECHO_MISMATCH")
        reg.state = RegState.ACTIVATED
        return self._ok(env)

    # -- enrollment phase --------------------------------------------------

    def handle_xmobileauth_lvl0(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        reg = self._session(body)
        self._require(reg, RegState.ACTIVATED)
        if body.get("level") != AuthLevel.LVL0.value:
            raise Reject(400, "MALFORMED")
        acct = self.accounts.get(body.get("usr"))
        if acct is None or acct.pwd != body.get("pwd"):
            reg.lvl0_failures += 1
            if reg.lvl0_failures >= LVL0_ATTEMPTS:
                self._disable(reg)
                raise Reject(423, "LOCKED")
            raise Reject(401, "BAD_CREDENTIALS")
        reg.lvl0_failures = 0
        reg.usr = acct.usr
        if reg not in acct.devices:
            acct.devices.append(reg)
        reg.state = RegState.LVL0_AUTH
        return self._ok(env)

    def handle_xmobileauth_lvl2_request(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        reg = self._session(body)
        self._require(reg, RegState.LVL0_AUTH)
        if body.get("level") != AuthLevel.LVL2.value:
            raise Reject(400, "MALFORMED")
        uuid = body.get("uuid")
        if not isinstance(uuid, str) or uuid_digest(uuid) != reg.uuid_hash or body.get("usr") != reg.usr:
            raise Reject(401, "IDENTITY_MISMATCH")
        if reg.approval == "pending":
            raise Reject(409, "APPROVAL_PENDING")
        acct = self.accounts[reg.usr]

        approvers = self._enrolled(acct, exclude=reg)
        if self.policy.mode is PolicyMode.FIX and approvers:
            reg.approval = "pending"
            for other in approvers:
                self.world.push(
                    f"reg:{other.ref}",
                    "approval_pending",
                    {"pending": reg.ref, "model": reg.fingerprint.model},
                )
            return self._ok(env, canonical_json({"approval": "required"}))

        code = f"{self.world.rng.randrange(10**6):06d}"
        reg.otp = Otp(code=code, issued_at=self.world.now)
        reg.state = RegState.OTP_PENDING
        body = SMS_TEMPLATE.format(code=code)
        self.world.defer(lambda: self.world.deliver_sms(acct.phone_number, body))
        return self._ok(env)

    def handle_xmobileauth_otp(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        reg = self._session(body)
        uuid = body.get("uuid")
        if body.get("level") != AuthLevel.LVL2.value:
            raise Reject(400, "MALFORMED")

        if body.get("approval") == "approved":
            if reg.state is RegState.LVL0_AUTH and reg.approval == "pending":
                raise Reject(403, "APPROVAL_PENDING")
            if reg.state is not RegState.LVL2_GRANTED or reg.approval != "granted":
                raise Reject(409, "DISABLED" if reg.state is RegState.DISABLED else "WRONG_STATE")
            if not isinstance(uuid, str) or uuid_digest(uuid) != reg.uuid_hash:
                raise Reject(401, "IDENTITY_MISMATCH")
            reg.approval = "delivered"
            return self._ok(env, canonical_json({"token": reg.token.value.hex()}), reg.app_public)

        self._require(reg, RegState.OTP_PENDING)
        if not isinstance(uuid, str) or uuid_digest(uuid) != reg.uuid_hash:
            raise Reject(401, "IDENTITY_MISMATCH")
        otp = reg.otp
        if otp.used:
            raise Reject(409, "OTP_USED")
        if otp.attempts_left <= 0:
            self._disable(reg)
            raise Reject(423, "LOCKED")
        if self.world.now - otp.issued_at > self.policy.otp_ttl_ticks:
            raise Reject(401, "OTP_EXPIRED")
        if body.get("otp") != otp.code:
            otp.attempts_left -= 1
            if otp.attempts_left == 0:
                self._disable(reg)
                raise Reject(423, "LOCKED")
            raise Reject(401, "WRONG_OTP")
        otp.used = True
        reg.otp = None
        reg.state = RegState.LVL2_GRANTED
        token = self._issue_token(reg)
        return self._ok(env, canonical_json({"token": token.value.hex()}), reg.app_public)

    def handle_register_app(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        reg = self._session(body)
        self._require(reg, RegState.LVL2_GRANTED)
        try:
            presented = bytes.fromhex(body["token"])
        except (KeyError, TypeError, ValueError):
            raise Reject(401, "UNKNOWN_TOKEN") from None
        if reg.token is None or reg.token.value != presented:
            raise Reject(401, "UNKNOWN_TOKEN")
        pid = body.get("pid")
        if not isinstance(pid, str) or not PID_MIN_LEN <= len(pid) <= PID_MAX_LEN:
            raise Reject(400, "BAD_PID")
        if self.find_pid(pid) is not None:
            raise Reject(409, "PID_IN_USE")
        acct = self.accounts[reg.usr]
        acct.pids[reg.ref] = pid
        reg.token = None
        reg.approval = None
        reg.state = RegState.ENROLLED
        reg.enrolled_at = self.world.now
        cert = issue_certificate(self.keys, self.server_id, reg.ref, reg.app_public, CertRole.REG)
        return self._ok(env, cert.to_bytes(), reg.app_public)

    # -- device management and level-2 use --------------------------------

    def disable_app(self, caller_pid: str, target_ref: str) -> tuple[int, str]:
        caller = self.find_pid(caller_pid) if isinstance(caller_pid, str) else None
        if caller is None or caller.state is not RegState.ENROLLED:
            return 401, "UNKNOWN_PID"
        acct = self.accounts[caller.usr]
        try:
            target = self.registrations.get(bytes.fromhex(target_ref))
        except (TypeError, ValueError):
            target = None
        if target is None or target.usr != acct.usr:
            return 403, "CROSS_ACCOUNT"

        if self.policy.mode is PolicyMode.RESTRICT:
            for other in self._enrolled(acct, exclude=caller):
                self.world.push(f"reg:{other.ref}", "device_mgmt_notice", {"target": target.ref})
            if self.world.now - caller.enrolled_at < self.policy.grace_ticks:
                return 403, "GRACE_PERIOD"
        if target.state is RegState.DISABLED:
            return 409, "ALREADY_DISABLED"
        self._disable(target)
        return 200, "DISABLED"

    def level2_action(self, caller_pid: str, action: Level2Action) -> tuple[int, dict]:
        caller = self.find_pid(caller_pid) if isinstance(caller_pid, str) else None
        if caller is None or caller.state is not RegState.ENROLLED:
            return 401, {}
        action = Level2Action(action)
        self.world.log("http", f"reg:{caller.ref}", "server", f"level2_action/{action.value}")
        acct = self.accounts[caller.usr]
        if action is Level2Action.READ_PRIVATE_DATA:
            data = {
                "usr": acct.usr,
                "phone_number": acct.phone_number,
                "devices": [
                    {"reg": r.ref, "state": r.state.value, "model": r.fingerprint.model if r.fingerprint else None}
                    for r in acct.devices
                ],
            }
        else:
            data = {"action": action.value, "authorized_by": caller.ref}
        return 200, data

    def handle_disable_app_request(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        status, reason = self.disable_app(body.get("pid"), body.get("target"))
        if status != 200:
            raise Reject(status, reason)
        return self._ok(env, reason.encode("ascii"))

    def handle_level2_action_request(self, env: Envelope) -> Envelope:
        body = self._open_srvk(env)
        try:
            action = Level2Action(body.get("action"))
        except ValueError:
            raise Reject(400, "BAD_ACTION") from None
        status, data = self.level2_action(body.get("pid"), action)
        if status != 200:
            raise Reject(status, "UNKNOWN_PID")
        caller = self.find_pid(body["pid"])
        return self._ok(env, canonical_json(data), caller.app_public)

    def approve_enrollment(self, approver_pid: str, pending_ref: str, decision: bool) -> int:
        try:
            pending = self.registrations.get(bytes.fromhex(pending_ref))
        except (TypeError, ValueError):
            pending = None
        if self.policy.mode is not PolicyMode.FIX or pending is None or pending.approval != "pending":
            return 404
        approver = self.find_pid(approver_pid)
        if approver is None or approver.state is not RegState.ENROLLED or approver.usr != pending.usr:
            return 403
        self.world.log(
            "http", f"reg:{approver.ref}", "server", "approval_granted" if decision else "approval_denied"
        )
        if decision:
            pending.approval = "granted"
            pending.state = RegState.LVL2_GRANTED
            self._issue_token(pending)
        else:
            self._disable(pending)
        return 200

    # -- snapshots ---------------------------------------------------------

    def snapshot(self) -> dict:
        def reg_json(r: DeviceRegistration) -> dict:
            return {
                "uuid_hash": r.ref,
                "app_public": r.app_public.hex() if r.app_public else None,
                "fingerprint": r.fingerprint.canonical if r.fingerprint else None,
                "state": r.state.value,
                "enrolled_at": r.enrolled_at,
                "otp": None
                if r.otp is None
                else {
                    "code": r.otp.code,
                    "issued_at": r.otp.issued_at,
                    "attempts_left": r.otp.attempts_left,
                    "used": r.otp.used,
                },
                "token": None
                if r.token is None
                else {
                    "value": r.token.value.hex(),
                    "bound_registration": r.token.bound_registration.hex(),
                    "issued_at": r.token.issued_at,
                },
            }

        return {
            "accounts": [
                {
                    "usr": a.usr,
                    "pwd": a.pwd,
                    "phone_number": a.phone_number,
                    "devices": [reg_json(r) for r in a.devices],
                    "pids": dict(sorted(a.pids.items())),
                }
                for a in self.accounts.values()
            ]
        }

    def save_snapshot(self, path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), sort_keys=True, indent=2) + "\n")

    def load_snapshot(self, source) -> None:
        """Replace the account store with a snapshot (dict or JSON file path)."""
        snap = source if isinstance(source, dict) else json.loads(Path(source).read_text())
        self.accounts.clear()
        self.registrations.clear()
        for a in snap["accounts"]:
            acct = AccountRecord(a["usr"], a["pwd"], a["phone_number"], pids=dict(a["pids"]))
            for d in a["devices"]:
                reg = DeviceRegistration(
                    uuid_hash=bytes.fromhex(d["uuid_hash"]),
                    app_public=bytes.fromhex(d["app_public"]) if d["app_public"] else None,
                    fingerprint=Fingerprint.parse(d["fingerprint"]) if d["fingerprint"] else None,
                    state=RegState(d["state"]),
                    enrolled_at=d["enrolled_at"],
                    usr=acct.usr,
                )
                if d["otp"]:
                    reg.otp = Otp(**d["otp"])
                if d["token"]:
                    t = d["token"]
                    reg.token = AuthToken(
                        bytes.fromhex(t["value"]), bytes.fromhex(t["bound_registration"]), t["issued_at"]
                    )
                acct.devices.append(reg)
                self.registrations[reg.uuid_hash] = reg
            self.accounts[acct.usr] = acct
