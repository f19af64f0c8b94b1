"""A deterministic little universe of phones, apps, SIM cards and one server.

Everything runs on a single thread against a logical integer clock. HTTP is
a synchronous function call into the server; SMS is an append to the inbox
of whichever device holds the SIM. Every observable exchange lands in the
transcript, which serializes to JSONL.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol

from .envelope import Envelope, encode_envelope

SMS_TEMPLATE = "PosteID code: {code}"


class PermissionDenied(Exception):
    code = "PERMISSION_DENIED"


class Permission(Enum):
    READ_SMS = "READ_SMS"
    NETWORK = "NETWORK"


class AppKind(Enum):
    GENUINE_POSTEID = "GENUINE_POSTEID"
    TROJAN = "TROJAN"


@dataclass(frozen=True)
class SmsMessage:
    to_phone: str
    body: str
    delivered_at: int


@dataclass(eq=False)
class AppInstance:
    app_id: str
    host_device: str
    permissions: frozenset
    kind: AppKind

    @property
    def address(self) -> str:
        return f"app:{self.app_id}"


@dataclass(eq=False)
class Device:
    id: str
    os_version: str
    rooted: bool
    model: str
    phone_number: Optional[str] = None
    installed_apps: list = field(default_factory=list)
    sms_inbox: list = field(default_factory=list)


class LogicalClock:
    def __init__(self, now: int = 0):
        self.now = now

    def advance(self, ticks: int) -> int:
        if not isinstance(ticks, int) or ticks < 1:
            raise ValueError(f"clock can only advance by a positive tick count, got {ticks!r}")
        self.now += ticks
        return self.now


class Dispatcher(Protocol):
    def handle(self, request: Envelope) -> Envelope: ...


class Channel:
    """What a client flow needs from the world: a request pipe and the RNG."""

    def __init__(self, world: "World", app: AppInstance):
        self.world = world
        self.app = app

    @property
    def rng(self) -> random.Random:
        return self.world.rng

    def send(self, request: Envelope) -> Envelope:
        return self.world.send_http(self.app, request)


class World:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = LogicalClock()
        self.devices: dict[str, Device] = {}
        self.apps: dict[str, AppInstance] = {}
        self.server: Optional[Dispatcher] = None
        self.transcript: list[dict] = []
        self._subscribers: dict[str, Callable[[str, dict], None]] = {}
        self._deferred: deque = deque()

    @property
    def now(self) -> int:
        return self.clock.now

    # -- construction ------------------------------------------------------

    def add_device(
        self,
        device_id: str,
        *,
        os_version: str,
        rooted: bool = False,
        model: str,
        phone_number: Optional[str] = None,
    ) -> Device:
        if not device_id:
            raise ValueError("device id must be non-empty")
        if device_id in self.devices:
            raise ValueError(f"duplicate device id {device_id!r}")
        if phone_number is not None and self.device_for_phone(phone_number) is not None:
            raise ValueError(f"phone number {phone_number} already in another device")
        dev = Device(device_id, os_version, rooted, model, phone_number)
        self.devices[device_id] = dev
        return dev

    def install_app(self, device_id: str, app_id: str, kind: AppKind, permissions=()) -> AppInstance:
        if app_id in self.apps:
            raise ValueError(f"duplicate app id {app_id!r}")
        device = self.devices[device_id]
        app = AppInstance(app_id, device_id, frozenset(Permission(p) for p in permissions), kind)
        device.installed_apps.append(app)
        self.apps[app_id] = app
        return app

    def connect(self, server: Dispatcher) -> None:
        self.server = server

    def channel(self, app: AppInstance) -> Channel:
        return Channel(self, app)

    def device_for_phone(self, phone: str) -> Optional[Device]:
        for dev in self.devices.values():
            if dev.phone_number == phone:
                return dev
        return None

    # -- transcript --------------------------------------------------------

    def log(
        self,
        channel: str,
        src: str,
        dst: str,
        event: str,
        *,
        envelope: Optional[Envelope] = None,
        sms_body: Optional[str] = None,
    ) -> dict:
        rec = {"t": self.clock.now, "channel": channel, "from": src, "to": dst, "event": event}
        if envelope is not None:
            rec["envelope"] = encode_envelope(envelope).decode("utf-8")
        if sms_body is not None:
            rec["sms_body"] = sms_body
        self.transcript.append(rec)
        return rec

    def transcript_bytes(self) -> bytes:
        return b"".join(
            json.dumps(rec, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"
            for rec in self.transcript
        )

    def write_transcript(self, path) -> str:
        data = self.transcript_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    # -- channels ----------------------------------------------------------

    def send_http(self, app: AppInstance, request: Envelope) -> Envelope:
        if Permission.NETWORK not in app.permissions:
            raise PermissionDenied(f"{app.app_id} lacks NETWORK")
        if self.server is None:
            raise RuntimeError("no server connected")
        self.log("http", app.address, "server", "request", envelope=request)
        response = self.server.handle(request)
        self.log("http", "server", app.address, "response", envelope=response)
        self._drain()
        return response

    def deliver_sms(self, to_phone: str, body: str) -> None:
        if not body:
            raise ValueError("SMS body must be non-empty")
        device = self.device_for_phone(to_phone)
        if device is None:
            self.log("sms", "server", to_phone, "sms_undeliverable", sms_body=body)
            return
        device.sms_inbox.append(SmsMessage(to_phone, body, self.clock.now))
        self.log("sms", "server", to_phone, "sms_delivered", sms_body=body)

    def read_sms(self, app: AppInstance, since: int = 0) -> list[SmsMessage]:
        if Permission.READ_SMS not in app.permissions:
            raise PermissionDenied(f"{app.app_id} lacks READ_SMS")
        inbox = self.devices[app.host_device].sms_inbox
        return [m for m in inbox if m.delivered_at >= since]

    def advance_clock(self, ticks: int) -> int:
        return self.clock.advance(ticks)

    # -- deferred server side effects --------------------------------------

    def defer(self, action: Callable[[], None]) -> None:
        """Run ``action`` once the in-flight response has been logged."""
        self._deferred.append(action)

    def subscribe(self, address: str, handler: Callable[[str, dict], None]) -> None:
        """Route pushes addressed to ``address`` (``reg:<hex>``) to ``handler``."""
        self._subscribers[address] = handler

    def push(self, address: str, event: str, data: Optional[dict] = None) -> None:
        data = dict(data or {})

        def deliver():
            self.log("http", "server", address, event)
            handler = self._subscribers.get(address)
            if handler is not None:
                handler(event, data)

        self.defer(deliver)

    def _drain(self) -> None:
        while self._deferred:
            self._deferred.popleft()()
