"""The genuine PosteID app: fingerprinting and the two activation phases."""

from __future__ import annotations

import json
import re
import uuid as uuidlib
from dataclasses import dataclass
from typing import Callable, Optional

from .envelope import (
    Certificate,
    CertRole,
    CipherSuite,
    ClientIdentity,
    Direction,
    Enc,
    Envelope,
    EnvelopeError,
    KeyPair,
    SymmetricKey,
    canonical_json,
    derive_keypair,
    hybrid_open,
    hybrid_seal,
    open_sealed,
    seal,
    sha256,
)
from .world import Channel, PermissionDenied, World

DEFAULT_PID = "posteid-user"
OTP_PATTERN = re.compile(r"^PosteID code: (\d{6})$")

_FINGERPRINT = re.compile(r"^os=([^;]+);rooted=([01]);model=([^;]+)$")


@dataclass(frozen=True)
class Fingerprint:
    os_version: str
    rooted: bool
    model: str

    @property
    def canonical(self) -> str:
        return f"os={self.os_version};rooted={int(self.rooted)};model={self.model}"

    @classmethod
    def parse(cls, canonical: str) -> "Fingerprint":
        m = _FINGERPRINT.match(canonical)
        if m is None:
            raise ValueError(f"malformed fingerprint {canonical!r}")
        return cls(m.group(1), m.group(2) == "1", m.group(3))


def generate_fingerprint(device) -> Fingerprint:
    return Fingerprint(device.os_version, device.rooted, device.model)


@dataclass(frozen=True)
class AppPackage:
    codk: SymmetricKey
    app_version: str


# Every installation ships the same key.
GENUINE_PACKAGE = AppPackage(SymmetricKey(sha256(b"posteid.apk/codk")), "3.9.0")


@dataclass
class ClientSession:
    identity: ClientIdentity
    keys: KeyPair
    server_cert: Optional[Certificate] = None
    app_cert: Optional[Certificate] = None
    reg_cert: Optional[Certificate] = None
    pid: Optional[str] = None

    @property
    def ref(self) -> str:
        return self.identity.uuid_hash.hex()


def new_session(rng) -> ClientSession:
    """Fresh install: draw the uuid, then the app key seed, from ``rng``."""
    uuid = str(uuidlib.UUID(bytes=rng.randbytes(16), version=4))
    keys = derive_keypair(rng.randbytes(32))
    return ClientSession(ClientIdentity.from_uuid(uuid), keys)


class FlowFailed(Exception):
    """A protocol step came back with something other than 200.

    ``status`` is None when the failure happened on the device, e.g. the
    OTP could not be read.
    """

    phase = "flow"

    def __init__(self, seq: int, status: Optional[int], reason: str = ""):
        super().__init__(f"{self.phase} failed at seq {seq}: {status} {reason}".rstrip())
        self.seq = seq
        self.status = status
        self.reason = reason


class RegistrationFailed(FlowFailed):
    phase = "registration"


class EnrollmentFailed(FlowFailed):
    phase = "enrollment"


class OtpUnavailable(Exception):
    code = "OTP_NOT_FOUND"


def _reason(rsp: Envelope) -> str:
    return rsp.payload.decode("ascii", "replace") if rsp.enc is Enc.PLAIN else ""


class PosteIdClient:
    """One app installation talking to the server, one message at a time.

    Each method sends a single request and returns the response envelope,
    updating the session on success. Flow-level error handling lives in
    :func:`run_registration` and :func:`run_enrollment`.
    """

    def __init__(self, session: ClientSession, package: AppPackage, net: Channel, fingerprint: Fingerprint):
        self.session = session
        self.package = package
        self.net = net
        self.fingerprint = fingerprint
        self.approval_required = False
        self.token: Optional[bytes] = None

    def _request(self, seq: int, endpoint: str, enc: Enc, payload: bytes) -> Envelope:
        return self.net.send(Envelope(seq, endpoint, Direction.REQUEST, enc, payload))

    def _to_server(self, seq: int, endpoint: str, body: dict) -> Envelope:
        rng = self.net.rng
        server_public = self.session.server_cert.subject_public
        sealed = hybrid_seal(server_public, rng.randbytes(32), rng.randbytes(12), canonical_json(body))
        return self._request(seq, endpoint, Enc.SRVK, sealed)

    def _from_server(self, rsp: Envelope) -> bytes:
        return hybrid_open(self.session.keys, rsp.payload)

    # reg phase

    def register_init(self) -> Envelope:
        nonce = self.net.rng.randbytes(12)
        sealed = seal(CipherSuite.TOY_V1, self.package.codk.key, nonce, self.session.identity.uuid_hash)
        rsp = self._request(1, "/registerinit", Enc.CODK, sealed)
        if rsp.ok:
            cert = Certificate.from_bytes(open_sealed(CipherSuite.TOY_V1, self.package.codk.key, rsp.payload))
            if cert.role is not CertRole.SERVER:
                raise EnvelopeError("message 2 must carry the server certificate")
            self.session.server_cert = cert  # pinned
        return rsp

    def register(self) -> Envelope:
        body = {
            "uuid_hash": self.session.ref,
            "appk": self.session.keys.public.hex(),
            "fing": self.fingerprint.canonical,
        }
        rsp = self._to_server(3, "/register", body)
        if rsp.ok:
            cert = Certificate.from_bytes(self._from_server(rsp))
            if cert.role is not CertRole.APP or cert.subject_public != self.session.keys.public:
                raise EnvelopeError("message 4 must certify this app's key")
            self.session.app_cert = cert
        return rsp

    def activate(self) -> Envelope:
        return self._to_server(5, "/activation", {"reg": self.session.ref, "echo": self.session.ref})

    # enr phase

    def login_lvl0(self, usr: str, pwd: str) -> Envelope:
        return self._to_server(7, "/xmobileauth", {"level": "lvl0", "usr": usr, "pwd": pwd, "reg": self.session.ref})

    def request_lvl2(self, usr: str) -> Envelope:
        body = {"level": "lvl2", "usr": usr, "uuid": self.session.identity.uuid, "reg": self.session.ref}
        rsp = self._to_server(9, "/xmobileauth", body)
        self.approval_required = False
        if rsp.ok and rsp.payload:
            self.approval_required = json.loads(rsp.payload).get("approval") == "required"
        return rsp

    def submit_otp(self, otp: str) -> Envelope:
        body = {"level": "lvl2", "otp": otp, "uuid": self.session.identity.uuid, "reg": self.session.ref}
        return self._with_token(self._to_server(12, "/xmobileauth", body))

    def submit_approved(self) -> Envelope:
        body = {"level": "lvl2", "approval": "approved", "uuid": self.session.identity.uuid, "reg": self.session.ref}
        return self._with_token(self._to_server(12, "/xmobileauth", body))

    def _with_token(self, rsp: Envelope) -> Envelope:
        self.token = bytes.fromhex(json.loads(self._from_server(rsp))["token"]) if rsp.ok else None
        return rsp

    def register_app(self, pid: str, token: Optional[bytes] = None) -> Envelope:
        token = self.token if token is None else token
        body = {"token": token.hex(), "pid": pid, "reg": self.session.ref}
        rsp = self._to_server(14, "/registerapp", body)
        if rsp.ok:
            cert = Certificate.from_bytes(self._from_server(rsp))
            if cert.role is not CertRole.REG or cert.subject_public != self.session.keys.public:
                raise EnvelopeError("message 15 must certify this app's key")
            self.session.reg_cert = cert
            self.session.pid = pid
        return rsp

    # level-2 use

    def level2_action(self, action: str, pid: Optional[str] = None) -> Envelope:
        return self._to_server(18, "/level2action", {"pid": pid or self.session.pid, "action": action})

    def read_level2(self, rsp: Envelope) -> dict:
        return json.loads(self._from_server(rsp))

    def disable_app(self, target_ref: str) -> Envelope:
        return self._to_server(16, "/disableapp", {"pid": self.session.pid, "target": target_ref})


def run_registration(client: PosteIdClient) -> ClientSession:
    """Messages 1-6. Raises :class:`RegistrationFailed` on the first non-200."""
    if client.session.server_cert is not None:
        raise ValueError("registration needs a fresh session")
    for step in (client.register_init, client.register, client.activate):
        rsp = step()
        if not rsp.ok:
            raise RegistrationFailed(rsp.seq - 1, rsp.status, _reason(rsp))
    return client.session


OtpSource = Callable[[], str]


def run_enrollment(
    client: PosteIdClient, usr: str, pwd: str, otp_source: OtpSource, pid: str = DEFAULT_PID
) -> ClientSession:
    """Messages 7-15.

    ``otp_source`` is called after message 10 and may be called again after
    a wrong code. If it raises :class:`OtpUnavailable` or
    :class:`PermissionDenied` the flow fails at seq 11, where the code
    should have arrived.
    """
    if client.session.app_cert is None:
        raise ValueError("enrollment needs a completed registration")

    def check(rsp: Envelope) -> None:
        if not rsp.ok:
            raise EnrollmentFailed(rsp.seq - 1, rsp.status, _reason(rsp))

    check(client.login_lvl0(usr, pwd))
    check(client.request_lvl2(usr))
    if client.approval_required:
        check(client.submit_approved())
    else:
        while True:
            try:
                code = otp_source()
            except (OtpUnavailable, PermissionDenied) as exc:
                raise EnrollmentFailed(11, None, exc.code) from exc
            rsp = client.submit_otp(code)
            if rsp.ok:
                break
            if rsp.status != 401 or _reason(rsp) != "WRONG_OTP":
                check(rsp)
    check(client.register_app(pid))
    return client.session


def level2_login(client: PosteIdClient) -> int:
    if client.session.pid is None:
        raise ValueError("level2_login needs an enrolled session")
    return client.level2_action("READ_PRIVATE_DATA").status


def inbox_otp_source(world: World, app, since: int, ttl: int) -> OtpSource:
    """Poll the host device's inbox once per tick for up to ``ttl`` ticks.

    Codes already handed out are skipped, so a retry after a wrong answer
    waits for a new SMS instead of resubmitting the same one.
    """
    seen: set[str] = set()

    def source() -> str:
        deadline = world.now + ttl
        while True:
            for sms in reversed(world.read_sms(app, since)):
                m = OTP_PATTERN.match(sms.body)
                if m and m.group(1) not in seen:
                    seen.add(m.group(1))
                    return m.group(1)
            if world.now >= deadline:
                raise OtpUnavailable("no OTP SMS arrived")
            world.advance_clock(1)

    return source
