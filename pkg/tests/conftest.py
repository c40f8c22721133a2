import random

import pytest

from overnym.identity import IdentitySecret, derive_appid, derive_bcadd, ServiceProps
from overnym.ledger import Ledger, RegistrationTx


def make_secret(index: int = 0, attributes=None) -> IdentitySecret:
    rng = random.Random(0xA5A5 + index)
    seed = bytes(rng.getrandbits(8) for _ in range(32))
    return IdentitySecret(seed, attributes or {})


@pytest.fixture
def secret():
    return make_secret()


@pytest.fixture
def bcadd(secret):
    return derive_bcadd(secret, 0)


@pytest.fixture
def service():
    return ServiceProps("storefront")


@pytest.fixture
def appid(secret, bcadd, service):
    return derive_appid(secret, bcadd, service)


def register_identity(ledger: Ledger, bcadd, *, kind="user", at_time=0,
                      submitter="t", nonce=None, **extra):
    """Register a chain address and commit immediately."""
    tx = RegistrationTx(kind=kind, subject=bcadd.address,
                        public_key=bcadd.public_key, epoch=bcadd.epoch, **extra)
    ledger.submit(tx, submitter=submitter, at_time=at_time,
                  nonce=nonce or bcadd.address[:16])
    ledger.commit_round()
    return tx
