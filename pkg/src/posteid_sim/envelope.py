"""Key material, toy authenticated encryption and the canonical wire format.

Every message of the device-activation exchange travels as an
:class:`Envelope`. Payloads are sealed with TOY_V1, a SHA-256 keystream
cipher with a truncated hash tag. It exists so that transcripts are
reproducible byte-for-byte; it is not meant to be secure.

Wire layout of a sealed blob::

    nonce (12B) || ciphertext (len(plaintext)) || tag (16B)

and of a hybrid blob addressed to a public key::

    eph (32B) || nonce (12B) || ciphertext || tag (16B)
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Optional

KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
SEAL_OVERHEAD = NONCE_SIZE + TAG_SIZE
HYBRID_OVERHEAD = KEY_SIZE + SEAL_OVERHEAD

PROTOCOL_VERSION = 1
RESPONSE_STATUSES = frozenset({200, 400, 401, 403, 409, 423})


class EnvelopeError(Exception):
    code = "ENVELOPE_ERROR"


class TagMismatch(EnvelopeError):
    code = "TAG_MISMATCH"


class Truncated(EnvelopeError):
    code = "TRUNCATED"


class InvalidEnvelope(EnvelopeError):
    code = "INVALID_ENVELOPE"


class ParseError(EnvelopeError):
    code = "PARSE_ERROR"


class SchemaError(EnvelopeError):
    """Well-formed JSON that is not a valid envelope.

    ``violation`` names the broken rule (``"enc-binding"``, ``"endpoint"``,
    ``"fields"`` ...) so transcript checkers can report it.
    """

    code = "SCHEMA_ERROR"

    def __init__(self, message: str, violation: str = "schema"):
        super().__init__(message)
        self.violation = violation


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


# ---------------------------------------------------------------------------
# Keys and identities
# ---------------------------------------------------------------------------


class CipherSuite(Enum):
    TOY_V1 = "TOY_V1"


@dataclass(frozen=True)
class SymmetricKey:
    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_SIZE:
            raise ValueError(f"symmetric key must be {KEY_SIZE} bytes")


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


def derive_keypair(seed: bytes) -> KeyPair:
    """Derive a key pair: secret = H("sk" || seed), public = H("pk" || secret)."""
    if len(seed) != KEY_SIZE:
        raise ValueError(f"seed must be {KEY_SIZE} bytes")
    secret = sha256(b"sk", seed)
    return KeyPair(secret=secret, public=sha256(b"pk", secret))


@dataclass(frozen=True)
class ClientIdentity:
    uuid: str
    uuid_hash: bytes

    @classmethod
    def from_uuid(cls, uuid: str) -> "ClientIdentity":
        return cls(uuid=uuid, uuid_hash=uuid_digest(uuid))


def uuid_digest(uuid: str) -> bytes:
    return sha256(uuid.encode("utf-8"))


# ---------------------------------------------------------------------------
# TOY_V1 sealing
# ---------------------------------------------------------------------------


def _keystream(key: bytes, nonce: bytes, length: int) -> bytes:
    blocks = []
    for i in range((length + 31) // 32):
        blocks.append(sha256(key, nonce, i.to_bytes(4, "big")))
    return b"".join(blocks)[:length]


def _check_lengths(key: bytes, nonce: Optional[bytes] = None) -> None:
    if len(key) != KEY_SIZE:
        raise ValueError(f"key must be {KEY_SIZE} bytes, got {len(key)}")
    if nonce is not None and len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes, got {len(nonce)}")


def seal(suite: CipherSuite, key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    if suite is not CipherSuite.TOY_V1:
        raise ValueError(f"unsupported suite {suite!r}")
    _check_lengths(key, nonce)
    ct = bytes(a ^ b for a, b in zip(plaintext, _keystream(key, nonce, len(plaintext))))
    tag = sha256(key, nonce, ct)[:TAG_SIZE]
    return nonce + ct + tag


def open_sealed(suite: CipherSuite, key: bytes, sealed: bytes) -> bytes:
    """Inverse of :func:`seal`. Raises :class:`TagMismatch` or :class:`Truncated`."""
    if suite is not CipherSuite.TOY_V1:
        raise ValueError(f"unsupported suite {suite!r}")
    _check_lengths(key)
    if len(sealed) < SEAL_OVERHEAD:
        raise Truncated(f"sealed blob of {len(sealed)} bytes is shorter than {SEAL_OVERHEAD}")
    nonce, ct, tag = sealed[:NONCE_SIZE], sealed[NONCE_SIZE:-TAG_SIZE], sealed[-TAG_SIZE:]
    if sha256(key, nonce, ct)[:TAG_SIZE] != tag:
        raise TagMismatch("authentication tag does not match")
    return bytes(a ^ b for a, b in zip(ct, _keystream(key, nonce, len(ct))))


def hybrid_seal(recipient_public: bytes, eph: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    # kek = H(recipient_public || eph): anyone holding the public value can
    # open this. It models who a message is addressed to, nothing more.
    _check_lengths(recipient_public, nonce)
    if len(eph) != KEY_SIZE:
        raise ValueError(f"eph must be {KEY_SIZE} bytes")
    kek = sha256(recipient_public, eph)
    return eph + seal(CipherSuite.TOY_V1, kek, nonce, plaintext)


def hybrid_open(recipient: KeyPair, sealed: bytes) -> bytes:
    if len(sealed) < HYBRID_OVERHEAD:
        raise Truncated(f"hybrid blob of {len(sealed)} bytes is shorter than {HYBRID_OVERHEAD}")
    eph, rest = sealed[:KEY_SIZE], sealed[KEY_SIZE:]
    return open_sealed(CipherSuite.TOY_V1, sha256(recipient.public, eph), rest)


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------


class CertRole(IntEnum):
    SERVER = 0x01
    APP = 0x02
    REG = 0x03


@dataclass(frozen=True)
class Certificate:
    subject_id: str
    subject_public: bytes
    issuer_id: str
    signature: bytes
    role: CertRole

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "issuer": self.issuer_id,
                "public": self.subject_public.hex(),
                "role": self.role.name,
                "sig": self.signature.hex(),
                "subject": self.subject_id,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Certificate":
        try:
            obj = json.loads(raw)
            return cls(
                subject_id=obj["subject"],
                subject_public=bytes.fromhex(obj["public"]),
                issuer_id=obj["issuer"],
                signature=bytes.fromhex(obj["sig"]),
                role=CertRole[obj["role"]],
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed certificate: {exc}") from exc


def _cert_signature(issuer_secret: bytes, subject_id: str, subject_public: bytes, role: CertRole) -> bytes:
    return sha256(issuer_secret, subject_id.encode("utf-8"), subject_public, bytes([role]))


def issue_certificate(
    issuer: KeyPair, issuer_id: str, subject_id: str, subject_public: bytes, role: CertRole
) -> Certificate:
    role = CertRole(role)
    return Certificate(
        subject_id=subject_id,
        subject_public=subject_public,
        issuer_id=issuer_id,
        signature=_cert_signature(issuer.secret, subject_id, subject_public, role),
        role=role,
    )


def verify_certificate(issuer: KeyPair, cert: Certificate) -> bool:
    # MAC-style: only the issuer can verify. Clients pin instead.
    expected = _cert_signature(issuer.secret, cert.subject_id, cert.subject_public, cert.role)
    return expected == cert.signature


# ---------------------------------------------------------------------------
# Envelopes
# ---------------------------------------------------------------------------


class Direction(Enum):
    REQUEST = "req"
    RESPONSE = "rsp"


class Enc(Enum):
    CODK = "codk"
    SRVK = "srvk"
    APPK = "appk"
    PLAIN = "plain"


ENDPOINTS = (
    "/registerinit",
    "/register",
    "/activation",
    "/xmobileauth",
    "/registerapp",
    "/disableapp",
    "/level2action",
)

# seq -> (endpoint, direction, enc of a request or a 200 response).
# 11 is the SMS leg and never travels as an envelope. 16..19 carry the
# device-management and level-2 endpoints.
MESSAGE_TABLE: dict[int, tuple[str, Direction, Enc]] = {
    1: ("/registerinit", Direction.REQUEST, Enc.CODK),
    2: ("/registerinit", Direction.RESPONSE, Enc.CODK),
    3: ("/register", Direction.REQUEST, Enc.SRVK),
    4: ("/register", Direction.RESPONSE, Enc.APPK),
    5: ("/activation", Direction.REQUEST, Enc.SRVK),
    6: ("/activation", Direction.RESPONSE, Enc.PLAIN),
    7: ("/xmobileauth", Direction.REQUEST, Enc.SRVK),
    8: ("/xmobileauth", Direction.RESPONSE, Enc.PLAIN),
    9: ("/xmobileauth", Direction.REQUEST, Enc.SRVK),
    10: ("/xmobileauth", Direction.RESPONSE, Enc.PLAIN),
    12: ("/xmobileauth", Direction.REQUEST, Enc.SRVK),
    13: ("/xmobileauth", Direction.RESPONSE, Enc.APPK),
    14: ("/registerapp", Direction.REQUEST, Enc.SRVK),
    15: ("/registerapp", Direction.RESPONSE, Enc.APPK),
    16: ("/disableapp", Direction.REQUEST, Enc.SRVK),
    17: ("/disableapp", Direction.RESPONSE, Enc.PLAIN),
    18: ("/level2action", Direction.REQUEST, Enc.SRVK),
    19: ("/level2action", Direction.RESPONSE, Enc.APPK),
}


def expected_enc(seq: int, status: Optional[int]) -> Enc:
    """Encryption binding for a message. Error responses are always plain."""
    if status is not None and status != 200:
        return Enc.PLAIN
    return MESSAGE_TABLE[seq][2]


@dataclass(frozen=True)
class Envelope:
    seq: int
    endpoint: str
    direction: Direction
    enc: Enc
    payload: bytes = b""
    status: Optional[int] = None
    version: int = PROTOCOL_VERSION

    @property
    def is_request(self) -> bool:
        return self.direction is Direction.REQUEST

    @property
    def ok(self) -> bool:
        return self.status == 200


def envelope_violations(e: Envelope) -> list[tuple[str, str]]:
    """Return ``(violation, message)`` pairs for every broken envelope rule."""
    out = []
    if e.version != PROTOCOL_VERSION:
        out.append(("version", f"version must be {PROTOCOL_VERSION}"))
    if e.seq not in MESSAGE_TABLE:
        out.append(("seq", f"seq {e.seq} is not a wire message"))
        return out
    endpoint, direction, _ = MESSAGE_TABLE[e.seq]
    if e.endpoint != endpoint:
        out.append(("endpoint", f"seq {e.seq} belongs to {endpoint}, not {e.endpoint}"))
    if e.direction is not direction:
        out.append(("direction", f"seq {e.seq} is a {direction.name.lower()}"))
    if e.direction is Direction.REQUEST and e.status is not None:
        out.append(("status", "requests carry no status"))
    if e.direction is Direction.RESPONSE and e.status not in RESPONSE_STATUSES:
        out.append(("status", f"invalid response status {e.status!r}"))
    if e.status is None or e.status in RESPONSE_STATUSES:
        want = expected_enc(e.seq, e.status)
        if e.enc is not want:
            out.append(("enc-binding", f"seq {e.seq} must be {want.value}, got {e.enc.value}"))
    return out


_WIRE_FIELDS = {"v", "seq", "endpoint", "dir", "status", "enc", "payload"}


def encode_envelope(e: Envelope) -> bytes:
    problems = envelope_violations(e)
    if problems:
        raise InvalidEnvelope("; ".join(msg for _, msg in problems))
    obj = {
        "v": e.version,
        "seq": e.seq,
        "endpoint": e.endpoint,
        "dir": e.direction.value,
        "enc": e.enc.value,
        "payload": base64.b64encode(e.payload).decode("ascii"),
    }
    if e.status is not None:
        obj["status"] = e.status
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _reject_duplicates(pairs):
    obj = {}
    for k, v in pairs:
        if k in obj:
            raise ParseError(f"duplicate key {k!r}")
        obj[k] = v
    return obj


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def decode_envelope(b: bytes) -> Envelope:
    try:
        obj = json.loads(b.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError("envelope must be a JSON object", "fields")

    unknown = set(obj) - _WIRE_FIELDS
    if unknown:
        raise SchemaError(f"unknown fields {sorted(unknown)}", "fields")
    missing = (_WIRE_FIELDS - {"status"}) - set(obj)
    if missing:
        raise SchemaError(f"missing fields {sorted(missing)}", "fields")

    for name in ("v", "seq"):
        if not _is_int(obj[name]):
            raise SchemaError(f"{name} must be an integer", "types")
    if "status" in obj and not _is_int(obj["status"]):
        raise SchemaError("status must be an integer", "types")
    for name in ("endpoint", "dir", "enc", "payload"):
        if not isinstance(obj[name], str):
            raise SchemaError(f"{name} must be a string", "types")
    try:
        direction = Direction(obj["dir"])
    except ValueError:
        raise SchemaError(f"unknown dir {obj['dir']!r}", "direction") from None
    try:
        enc = Enc(obj["enc"])
    except ValueError:
        raise SchemaError(f"unknown enc {obj['enc']!r}", "enc-binding") from None
    if obj["endpoint"] not in ENDPOINTS:
        raise SchemaError(f"unknown endpoint {obj['endpoint']!r}", "endpoint")
    try:
        payload = base64.b64decode(obj["payload"].encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise ParseError(f"bad base64 payload: {exc}") from exc

    env = Envelope(
        seq=obj["seq"],
        endpoint=obj["endpoint"],
        direction=direction,
        enc=enc,
        payload=payload,
        status=obj.get("status"),
        version=obj["v"],
    )
    problems = envelope_violations(env)
    if problems:
        violation, msg = problems[0]
        raise SchemaError(msg, violation)
    return env


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
