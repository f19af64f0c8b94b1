import pytest

from posteid_sim.client import (
    GENUINE_PACKAGE,
    PosteIdClient,
    generate_fingerprint,
    inbox_otp_source,
    new_session,
    run_enrollment,
    run_registration,
)
from posteid_sim.envelope import derive_keypair
from posteid_sim.server import IdentityServer, PolicyConfig, PolicyMode
from posteid_sim.world import AppKind, Permission, World

USR, PWD, PHONE = "anna.bianchi", "s3cret-pw", "+391234500099"


class Lab:
    """A world with one account, one phone, and helpers to add installs."""

    def __init__(self, mode=PolicyMode.BASELINE, seed=11, **policy):
        self.world = World(seed)
        self.server = IdentityServer(
            self.world, derive_keypair(self.world.rng.randbytes(32)), GENUINE_PACKAGE.codk.key,
            PolicyConfig(mode, **policy),
        )
        self.server.add_account(USR, PWD, PHONE)
        self.phone = self.world.add_device("phone", os_version="14", rooted=False, model="PX-1", phone_number=PHONE)
        self._n = 0

    def install(self, device=None, perms=(Permission.NETWORK, Permission.READ_SMS), kind=AppKind.GENUINE_POSTEID):
        device = device or self.phone
        self._n += 1
        app = self.world.install_app(device.id, f"app{self._n}", kind, perms)
        client = PosteIdClient(
            new_session(self.world.rng), GENUINE_PACKAGE, self.world.channel(app), generate_fingerprint(device)
        )
        client.app = app
        return client

    def otp_source(self, client):
        return inbox_otp_source(self.world, client.app, self.world.now, self.server.policy.otp_ttl_ticks)

    def registered(self, **kw):
        client = self.install(**kw)
        run_registration(client)
        return client

    def enrolled(self, pid="posteid-one", **kw):
        client = self.registered(**kw)
        run_enrollment(client, USR, PWD, self.otp_source(client), pid)
        return client

    def reg(self, client):
        return self.server.registration(client.session.ref)

    def last_otp(self):
        return self.phone.sms_inbox[-1].body.split(": ")[1]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported by name")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)


@pytest.fixture
def lab():
    return Lab()
