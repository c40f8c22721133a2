"""Three-tier pseudonymous identity.

A participant holds a 32-byte secret, the private embodiment of their
real-world identity (attributes like age live only with the holder and
the regulator). Everything public derives one-way from it:

  secret --(epoch)--> chain address BCADD --(service)--> APPID

Each epoch has its own Ed25519 signing key, so rotating the epoch changes
every public field at once. Linkage proofs let a verifier confirm an
APPID belongs to a claimed BCADD, fresh for a given session nonce,
without learning the secret. Attribute attestations are regulator-signed
predicates ("age is at least 18") carrying the threshold but never the
value.

All values here are immutable after construction; operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .hashing import (
    TAG_APPID,
    TAG_ATTEST,
    TAG_BCADD,
    TAG_LINKAGE,
    TAG_REGULATOR,
    TAG_SIGKEY,
    owf,
    u64,
)
from .wire import Reader, WireError, pack_bytes, pack_str, pack_u8

SEED_SIZE = 32
ADDRESS_SIZE = 32
NONCE_SIZE = 16

COMPARISONS = (">=", "<=", "==")

# Named slot for a verifiable-random-function derivation path. Only the
# hash path is implemented; registering anything else raises.
VRF_EXTENSION_POINT = "vrf-derivation"


class MismatchedSecret(Exception):
    """A BCADD or APPID was paired with a secret it does not derive from."""


class UnknownSubject(KeyError):
    """The regulator has no registration for this subject."""


class Refused(Exception):
    """The regulator declines to attest: the predicate does not hold."""


def _signing_key(seed: bytes, epoch: int) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(owf(TAG_SIGKEY, seed, u64(epoch)))


@dataclass(frozen=True)
class IdentitySecret:
    """Private material. Never serialized; repr is redacted."""

    seed: bytes
    registered_attributes: Mapping[str, int | str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.seed) != SEED_SIZE:
            raise ValueError(f"seed must be {SEED_SIZE} bytes")
        object.__setattr__(
            self, "registered_attributes",
            MappingProxyType(dict(self.registered_attributes)),
        )

    @property
    def signing_key(self) -> Ed25519PrivateKey:
        """Root signing key, a pure function of the seed (epoch 0)."""
        return _signing_key(self.seed, 0)

    def __repr__(self) -> str:  # keep the seed out of logs and tracebacks
        return f"IdentitySecret(seed=<{SEED_SIZE} bytes>, attributes={len(self.registered_attributes)})"


@dataclass(frozen=True)
class BCADD:
    """Second-tier chain address: one-way from (seed, epoch)."""

    address: bytes
    epoch: int
    public_key: bytes  # raw Ed25519 verification key for this epoch

    def to_bytes(self) -> bytes:
        # address(32) | epoch u64 | public_key length-prefixed
        return self.address + u64(self.epoch) + pack_bytes(self.public_key)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BCADD":
        r = Reader(data)
        addr = r.take(ADDRESS_SIZE)
        epoch = r.u64()
        pub = r.bytes_()
        r.expect_end()
        return cls(addr, epoch, pub)


@dataclass(frozen=True)
class ServiceProps:
    """What distinguishes one service's APPID from another under a BCADD."""

    service_id: str
    context: bytes = b""

    def __post_init__(self):
        if not self.service_id:
            raise ValueError("service_id must be non-empty")

    def to_bytes(self) -> bytes:
        return pack_str(self.service_id) + pack_bytes(self.context)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ServiceProps":
        r = Reader(data)
        sid = r.str_()
        ctx = r.bytes_()
        r.expect_end()
        return cls(sid, ctx)


@dataclass(frozen=True)
class APPID:
    """Third-tier service identity: one-way from (BCADD, service, epoch)."""

    id: bytes
    service: ServiceProps
    epoch: int

    def to_bytes(self) -> bytes:
        return self.id + self.service.to_bytes() + u64(self.epoch)

    @classmethod
    def from_bytes(cls, data: bytes) -> "APPID":
        r = Reader(data)
        ident = r.take(ADDRESS_SIZE)
        sid = r.str_()
        ctx = r.bytes_()
        epoch = r.u64()
        r.expect_end()
        return cls(ident, ServiceProps(sid, ctx), epoch)


@dataclass(frozen=True)
class LinkageProof:
    """Evidence that an APPID's holder controls a claimed BCADD.

    commitment is the canonical encoding of the claimed BCADD, so the
    proof is self-contained: a verifier who only knows the APPID can
    recover the claimed address, check the one-way derivation, and check
    the signature, all without any secret material.
    """

    commitment: bytes
    signature: bytes
    session_nonce: bytes

    def __post_init__(self):
        if len(self.session_nonce) != NONCE_SIZE:
            raise ValueError(f"session_nonce must be {NONCE_SIZE} bytes")

    def to_bytes(self) -> bytes:
        return pack_bytes(self.commitment) + pack_bytes(self.signature) + self.session_nonce

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinkageProof":
        r = Reader(data)
        commitment = r.bytes_()
        signature = r.bytes_()
        nonce = r.take(NONCE_SIZE)
        r.expect_end()
        return cls(commitment, signature, nonce)

    def claimed_bcadd(self) -> BCADD:
        return BCADD.from_bytes(self.commitment)


@dataclass(frozen=True)
class Predicate:
    """Comparison over a named attribute, e.g. ('age', '>=', 18)."""

    attribute: str
    comparison: str
    threshold: int | str

    def __post_init__(self):
        if self.comparison not in COMPARISONS:
            raise ValueError(f"comparison must be one of {COMPARISONS}")
        if isinstance(self.threshold, str) and self.comparison != "==":
            raise ValueError("string thresholds support equality only")

    def holds(self, value: int | str) -> bool:
        if isinstance(self.threshold, str) or isinstance(value, str):
            return self.comparison == "==" and value == self.threshold
        if self.comparison == ">=":
            return value >= self.threshold
        if self.comparison == "<=":
            return value <= self.threshold
        return value == self.threshold

    def to_bytes(self) -> bytes:
        if isinstance(self.threshold, int):
            threshold = pack_u8(0) + self.threshold.to_bytes(8, "big", signed=True)
        else:
            threshold = pack_u8(1) + pack_str(self.threshold)
        return pack_str(self.attribute) + pack_str(self.comparison) + threshold

    @classmethod
    def from_bytes(cls, data: bytes) -> "Predicate":
        r = Reader(data)
        pred = cls._read(r)
        r.expect_end()
        return pred

    @classmethod
    def _read(cls, r: Reader) -> "Predicate":
        attribute = r.str_()
        comparison = r.str_()
        kind = r.u8()
        if kind == 0:
            threshold: int | str = int.from_bytes(r.take(8), "big", signed=True)
        elif kind == 1:
            threshold = r.str_()
        else:
            raise WireError(f"unknown threshold kind {kind}")
        return cls(attribute, comparison, threshold)


@dataclass(frozen=True)
class AttributeAttestation:
    """Regulator-signed predicate over a subject address.

    Carries the threshold, the subject, and the epoch; the attribute
    value itself never leaves the regulator.
    """

    predicate: Predicate
    subject: bytes  # BCADD.address
    epoch: int
    regulator_signature: bytes

    def to_bytes(self) -> bytes:
        return (
            pack_bytes(self.predicate.to_bytes())
            + self.subject
            + u64(self.epoch)
            + pack_bytes(self.regulator_signature)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttributeAttestation":
        r = Reader(data)
        predicate = Predicate.from_bytes(r.bytes_())
        subject = r.take(ADDRESS_SIZE)
        epoch = r.u64()
        signature = r.bytes_()
        r.expect_end()
        return cls(predicate, subject, epoch, signature)


# ---------------------------------------------------------------------------
# Derivations
# ---------------------------------------------------------------------------

def derive_bcadd(secret: IdentitySecret, epoch: int) -> BCADD:
    """Chain address for an epoch. Pure: same inputs, same address."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    address = owf(TAG_BCADD, secret.seed, u64(epoch))
    public = _signing_key(secret.seed, epoch).public_key().public_bytes_raw()
    return BCADD(address=address, epoch=epoch, public_key=public)


def _require_own_bcadd(secret: IdentitySecret, bcadd: BCADD) -> None:
    if derive_bcadd(secret, bcadd.epoch) != bcadd:
        raise MismatchedSecret("BCADD does not derive from this secret")


def appid_digest(address: bytes, service: ServiceProps, epoch: int) -> bytes:
    return owf(TAG_APPID, address, service.to_bytes(), u64(epoch))


def derive_appid(secret: IdentitySecret, bcadd: BCADD, service: ServiceProps) -> APPID:
    """Service identity under the given BCADD; epoch carried over."""
    _require_own_bcadd(secret, bcadd)
    return APPID(
        id=appid_digest(bcadd.address, service, bcadd.epoch),
        service=service,
        epoch=bcadd.epoch,
    )


def _linkage_message(address: bytes, appid_id: bytes, epoch: int, nonce: bytes) -> bytes:
    return TAG_LINKAGE + address + appid_id + u64(epoch) + nonce


def make_linkage_proof(
    secret: IdentitySecret,
    bcadd: BCADD,
    appid: APPID,
    session_nonce: bytes,
) -> LinkageProof:
    """Sign (address, appid, epoch, nonce) with the epoch key."""
    _require_own_bcadd(secret, bcadd)
    if appid.epoch != bcadd.epoch or appid.id != appid_digest(bcadd.address, appid.service, bcadd.epoch):
        raise MismatchedSecret("APPID does not derive from this BCADD")
    if len(session_nonce) != NONCE_SIZE:
        raise ValueError(f"session_nonce must be {NONCE_SIZE} bytes")
    signature = _signing_key(secret.seed, bcadd.epoch).sign(
        _linkage_message(bcadd.address, appid.id, bcadd.epoch, session_nonce)
    )
    return LinkageProof(
        commitment=bcadd.to_bytes(),
        signature=signature,
        session_nonce=bytes(session_nonce),
    )


def verify_linkage(
    bcadd: BCADD,
    appid: APPID,
    proof: LinkageProof,
    session_nonce: bytes,
) -> bool:
    """True iff the proof binds this exact (bcadd, appid, nonce) triple.

    Checks, in order: the commitment names this BCADD; the APPID
    structurally re-derives from the BCADD (service, epoch, digest); the
    signature verifies under the BCADD's epoch key over the given nonce.
    Malformed inputs yield False, never an exception.
    """
    try:
        if proof.commitment != bcadd.to_bytes():
            return False
        if appid.epoch != bcadd.epoch:
            return False
        if appid.id != appid_digest(bcadd.address, appid.service, appid.epoch):
            return False
        verifier = Ed25519PublicKey.from_public_bytes(bcadd.public_key)
        verifier.verify(
            proof.signature,
            _linkage_message(bcadd.address, appid.id, bcadd.epoch, bytes(session_nonce)),
        )
        return True
    except (InvalidSignature, ValueError, TypeError, WireError):
        return False


def rotate(
    secret: IdentitySecret,
    current: BCADD,
    services: Sequence[ServiceProps],
) -> tuple[BCADD, list[APPID]]:
    """Advance to the next epoch: fresh address, fresh APPID per service."""
    _require_own_bcadd(secret, current)
    nxt = derive_bcadd(secret, current.epoch + 1)
    return nxt, [derive_appid(secret, nxt, service) for service in services]


# ---------------------------------------------------------------------------
# Regulator
# ---------------------------------------------------------------------------

class Regulator:
    """Holds subjects' registered attributes and signs predicate
    attestations about them. The registry never leaves this object."""

    def __init__(self, seed: bytes):
        self._key = Ed25519PrivateKey.from_private_bytes(owf(TAG_REGULATOR, seed))
        self._registry: dict[bytes, dict[str, int | str]] = {}

    @property
    def public_key(self) -> bytes:
        return self._key.public_key().public_bytes_raw()

    def register(self, subject_address: bytes, attributes: Mapping[str, int | str]) -> None:
        if len(subject_address) != ADDRESS_SIZE:
            raise ValueError("subject must be a 32-byte address")
        self._registry[bytes(subject_address)] = dict(attributes)

    def knows(self, subject_address: bytes) -> bool:
        return bytes(subject_address) in self._registry

    def issue_attestation(self, subject: BCADD, predicate: Predicate) -> AttributeAttestation:
        """Attest iff the registered value satisfies the predicate.

        Raises UnknownSubject for unregistered addresses and Refused when
        the predicate does not hold (or the attribute was never
        registered). The attestation carries no attribute value.
        """
        attributes = self._registry.get(subject.address)
        if attributes is None:
            raise UnknownSubject(subject.address.hex())
        if predicate.attribute not in attributes:
            raise Refused(f"no registered attribute {predicate.attribute!r}")
        if not predicate.holds(attributes[predicate.attribute]):
            raise Refused(f"predicate {predicate} does not hold")
        signature = self._key.sign(
            _attestation_message(predicate, subject.address, subject.epoch)
        )
        return AttributeAttestation(
            predicate=predicate,
            subject=subject.address,
            epoch=subject.epoch,
            regulator_signature=signature,
        )


def _attestation_message(predicate: Predicate, subject: bytes, epoch: int) -> bytes:
    return TAG_ATTEST + pack_bytes(predicate.to_bytes()) + subject + u64(epoch)


def verify_attestation(attestation: AttributeAttestation, regulator_public_key: bytes) -> bool:
    """True iff the regulator's signature covers this exact predicate,
    subject, and epoch. Needs only the regulator public key."""
    try:
        verifier = Ed25519PublicKey.from_public_bytes(regulator_public_key)
        verifier.verify(
            attestation.regulator_signature,
            _attestation_message(attestation.predicate, attestation.subject, attestation.epoch),
        )
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False
