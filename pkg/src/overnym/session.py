"""Mutually authenticated service sessions between APPIDs.

Four-phase handshake: hello (client nonce + key share), challenge
(server nonce + key share), response (server's linkage proof), confirm
(client's linkage proof). Both proofs bind the combined session nonce,
and each side checks the peer's proof against the peer's ledger-
registered chain address, so authentication is mutual and anchored in
the ledger rather than any certificate authority.

The session key is derived from an ephemeral X25519 exchange and the
running transcript hash; no message field carries key material. APPID
rotation rides inside the established session: the notice is
authenticated with the old key, the key is re-derived, and the old
key stops verifying anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from random import Random

from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)

from .hashing import (
    TAG_HS_NONCE,
    TAG_KEYCHECK,
    TAG_MSG_AUTH,
    TAG_REKEY,
    TAG_ROT_AUTH,
    TAG_ROT_NONCE,
    TAG_SESSION_ID,
    TAG_SESSION_KEY,
    TAG_TRANSCRIPT,
    owf,
    u32,
    u64,
)
from .identity import (
    APPID,
    BCADD,
    NONCE_SIZE,
    IdentitySecret,
    LinkageProof,
    make_linkage_proof,
    verify_linkage,
)
from .ledger import Ledger
from .overlay import RoutePath
from .wire import Reader, WireError, pack_bytes, pack_str, pack_u8

PHASES = ("hello", "challenge", "response", "confirm")
STATES = ("handshaking", "established", "rotating", "closed")

DEFAULT_HEARTBEAT_TIMEOUT = 5

ADMIT_OK = "admitted"
ADMIT_BAD_PROOF = "bad-proof"
ADMIT_UNREGISTERED = "unregistered"
ADMIT_STALE_NONCE = "stale-nonce"


class AuthFailed(Exception):
    """Handshake aborted; carries the phase and the reason."""

    def __init__(self, phase: str, reason: str):
        super().__init__(f"{phase}: {reason}")
        self.phase = phase
        self.reason = reason


class ContinuityRejected(Exception):
    """Rotation notice refused (bad proof or not delivered in-session)."""


@dataclass(frozen=True)
class HandshakeMessage:
    phase: str
    sender_appid: APPID
    nonce: bytes
    ephemeral_public: bytes  # X25519 share on hello/challenge, empty after
    transcript_hash: bytes   # digest of all prior phases
    linkage: LinkageProof | None = None  # response/confirm only

    def to_bytes(self) -> bytes:
        body = (
            pack_str(self.phase)
            + pack_bytes(self.sender_appid.to_bytes())
            + self.nonce
            + pack_bytes(self.ephemeral_public)
            + self.transcript_hash
        )
        if self.linkage is None:
            return body + pack_u8(0)
        return body + pack_u8(1) + pack_bytes(self.linkage.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "HandshakeMessage":
        r = Reader(data)
        phase = r.str_()
        appid = APPID.from_bytes(r.bytes_())
        nonce = r.take(NONCE_SIZE)
        ephemeral = r.bytes_()
        transcript = r.take(32)
        linkage = LinkageProof.from_bytes(r.bytes_()) if r.u8() else None
        r.expect_end()
        return cls(phase, appid, nonce, ephemeral, transcript, linkage)


@dataclass
class ServiceStatus:
    """Peer liveness and delivery quality, in sim-time units."""

    alive: bool = True
    last_heartbeat: int = 0
    quality: float = 0.0
    deliveries: int = 0

    def beat(self, now: int) -> None:
        self.last_heartbeat = now
        self.alive = True

    def record_delivery(self, latency: float) -> None:
        self.deliveries += 1
        self.quality += (latency - self.quality) / self.deliveries

    def check(self, now: int, timeout: int) -> bool:
        self.alive = (now - self.last_heartbeat) <= timeout
        return self.alive


@dataclass
class Session:
    """One endpoint's view of an established tunnel.

    Both endpoints hold equal keys after a successful handshake; the key
    exists exactly while the state is established or rotating.
    """

    session_id: bytes
    client_appid: APPID
    server_appid: APPID
    route: RoutePath
    key: bytes | None
    state: str
    status: ServiceStatus = field(default_factory=ServiceStatus)
    client_bcadd: BCADD | None = None
    server_bcadd: BCADD | None = None
    heartbeat_timeout: int = DEFAULT_HEARTBEAT_TIMEOUT
    rotation_count: int = 0

    def key_check(self) -> bytes:
        """Safe-to-compare digest of the key; never put the key itself
        on the wire or in a trace."""
        if self.key is None:
            raise ValueError("no key in state " + self.state)
        return owf(TAG_KEYCHECK, self.key)[:16]

    def close(self) -> None:
        self.state = "closed"
        self.key = None


@dataclass(frozen=True)
class AccessDecision:
    allowed: bool
    reason: str  # nft-owned | open-access | no-token | unregistered | bad-proof

    def __post_init__(self):
        if self.allowed and self.reason not in ("nft-owned", "open-access"):
            raise ValueError("allowed decisions must cite nft-owned or open-access")


# ---------------------------------------------------------------------------
# Admission at the first router
# ---------------------------------------------------------------------------

def router_admit(
    appid: APPID,
    bcadd: BCADD,
    proof: LinkageProof,
    nonce: bytes,
    ledger: Ledger,
    require_registration: bool = True,
) -> bool:
    """First-router check: the APPID's holder controls a valid chain
    address, bound to this nonce, and (in strict scenarios) that address
    is registered on the ledger. Sees only public artifacts."""
    if not verify_linkage(bcadd, appid, proof, nonce):
        return False
    if require_registration and ledger.query_registration(bcadd.address) is None:
        return False
    return True


# ---------------------------------------------------------------------------
# Handshake state machines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeerCredentials:
    """What one endpoint brings to a handshake."""

    secret: IdentitySecret
    bcadd: BCADD
    appid: APPID


def _session_nonce(client_nonce: bytes, server_nonce: bytes) -> bytes:
    return owf(TAG_HS_NONCE, client_nonce, server_nonce)[:NONCE_SIZE]


def _session_id(client_nonce: bytes, server_nonce: bytes) -> bytes:
    return owf(TAG_SESSION_ID, client_nonce, server_nonce)[:16]


def _initial_transcript() -> bytes:
    return owf(TAG_TRANSCRIPT)


def _absorb(transcript: bytes, message: HandshakeMessage) -> bytes:
    return owf(TAG_TRANSCRIPT, transcript, message.to_bytes())


def _verify_peer(
    message: HandshakeMessage,
    session_nonce: bytes,
    ledger: Ledger,
) -> BCADD:
    """Check a proof-bearing message: recover the claimed BCADD from the
    commitment, verify the linkage, and anchor it to the ledger-registered
    key for that address. Raises AuthFailed tagged with the phase."""
    proof = message.linkage
    if proof is None:
        raise AuthFailed(message.phase, "missing-proof")
    try:
        claimed = proof.claimed_bcadd()
    except (WireError, ValueError):
        raise AuthFailed(message.phase, "bad-proof") from None
    if not verify_linkage(claimed, message.sender_appid, proof, session_nonce):
        raise AuthFailed(message.phase, "bad-proof")
    registration = ledger.query_registration(claimed.address)
    if registration is None:
        raise AuthFailed(message.phase, "unregistered")
    if registration.public_key != claimed.public_key:
        raise AuthFailed(message.phase, "bad-proof")
    return claimed


def _rng_bytes(rng: Random, n: int) -> bytes:
    return rng.getrandbits(8 * n).to_bytes(n, "big")


class ClientHandshake:
    """Client side: emits hello and confirm, consumes challenge and
    response. session() is available once confirm has been sent."""

    def __init__(self, creds: PeerCredentials, route: RoutePath, ledger: Ledger,
                 rng: Random, heartbeat_timeout: int = DEFAULT_HEARTBEAT_TIMEOUT):
        self._creds = creds
        self._route = route
        self._ledger = ledger
        self._timeout = heartbeat_timeout
        self._nonce = _rng_bytes(rng, NONCE_SIZE)
        self._ephemeral = X25519PrivateKey.from_private_bytes(_rng_bytes(rng, 32))
        self._transcript = _initial_transcript()
        self._server_nonce: bytes | None = None
        self._server_share: bytes | None = None
        self._server_appid: APPID | None = None
        self._server_bcadd: BCADD | None = None
        self._session: Session | None = None

    def hello(self) -> HandshakeMessage:
        message = HandshakeMessage(
            phase="hello",
            sender_appid=self._creds.appid,
            nonce=self._nonce,
            ephemeral_public=self._ephemeral.public_key().public_bytes_raw(),
            transcript_hash=self._transcript,
        )
        self._transcript = _absorb(self._transcript, message)
        return message

    def on_challenge(self, message: HandshakeMessage) -> None:
        if message.phase != "challenge":
            raise AuthFailed("challenge", f"unexpected phase {message.phase}")
        if message.transcript_hash != self._transcript:
            raise AuthFailed("challenge", "transcript-mismatch")
        self._server_nonce = message.nonce
        self._server_share = message.ephemeral_public
        self._server_appid = message.sender_appid
        self._transcript = _absorb(self._transcript, message)

    def on_response(self, message: HandshakeMessage) -> None:
        if message.phase != "response" or self._server_nonce is None:
            raise AuthFailed("response", "out-of-order message")
        if message.transcript_hash != self._transcript:
            raise AuthFailed("response", "transcript-mismatch")
        if message.sender_appid != self._server_appid:
            raise AuthFailed("response", "bad-proof")
        session_nonce = _session_nonce(self._nonce, self._server_nonce)
        self._server_bcadd = _verify_peer(message, session_nonce, self._ledger)
        self._transcript = _absorb(self._transcript, message)

    def confirm(self) -> HandshakeMessage:
        if self._server_bcadd is None or self._server_nonce is None:
            raise AuthFailed("confirm", "server not yet authenticated")
        session_nonce = _session_nonce(self._nonce, self._server_nonce)
        proof = make_linkage_proof(
            self._creds.secret, self._creds.bcadd, self._creds.appid, session_nonce
        )
        message = HandshakeMessage(
            phase="confirm",
            sender_appid=self._creds.appid,
            nonce=self._nonce,
            ephemeral_public=b"",
            transcript_hash=self._transcript,
            linkage=proof,
        )
        self._transcript = _absorb(self._transcript, message)
        try:
            shared = self._ephemeral.exchange(
                X25519PublicKey.from_public_bytes(self._server_share)
            )
        except ValueError:
            raise AuthFailed("confirm", "bad-key-share") from None
        key = owf(TAG_SESSION_KEY, shared, self._transcript)
        self._session = Session(
            session_id=_session_id(self._nonce, self._server_nonce),
            client_appid=self._creds.appid,
            server_appid=self._server_appid,
            route=self._route,
            key=key,
            state="established",
            client_bcadd=self._creds.bcadd,
            server_bcadd=self._server_bcadd,
            heartbeat_timeout=self._timeout,
        )
        return message

    def session(self) -> Session:
        if self._session is None:
            raise AuthFailed("confirm", "handshake not complete")
        return self._session


class ServerHandshake:
    """Server side: consumes hello and confirm, emits challenge and
    response (its own proof). The route parameter is the server's view
    of the tunnel, i.e. the reply path."""

    def __init__(self, creds: PeerCredentials, route: RoutePath, ledger: Ledger,
                 rng: Random, heartbeat_timeout: int = DEFAULT_HEARTBEAT_TIMEOUT):
        self._creds = creds
        self._route = route
        self._ledger = ledger
        self._timeout = heartbeat_timeout
        self._nonce = _rng_bytes(rng, NONCE_SIZE)
        self._ephemeral = X25519PrivateKey.from_private_bytes(_rng_bytes(rng, 32))
        self._transcript = _initial_transcript()
        self._client_nonce: bytes | None = None
        self._client_share: bytes | None = None
        self._client_appid: APPID | None = None
        self._session: Session | None = None

    def on_hello(self, message: HandshakeMessage) -> tuple[HandshakeMessage, HandshakeMessage]:
        """Consume hello, emit (challenge, response)."""
        if message.phase != "hello":
            raise AuthFailed("hello", f"unexpected phase {message.phase}")
        if message.transcript_hash != _initial_transcript():
            raise AuthFailed("hello", "transcript-mismatch")
        self._client_nonce = message.nonce
        self._client_share = message.ephemeral_public
        self._client_appid = message.sender_appid
        self._transcript = _absorb(self._transcript, message)

        challenge = HandshakeMessage(
            phase="challenge",
            sender_appid=self._creds.appid,
            nonce=self._nonce,
            ephemeral_public=self._ephemeral.public_key().public_bytes_raw(),
            transcript_hash=self._transcript,
        )
        self._transcript = _absorb(self._transcript, challenge)

        session_nonce = _session_nonce(self._client_nonce, self._nonce)
        proof = make_linkage_proof(
            self._creds.secret, self._creds.bcadd, self._creds.appid, session_nonce
        )
        response = HandshakeMessage(
            phase="response",
            sender_appid=self._creds.appid,
            nonce=self._nonce,
            ephemeral_public=b"",
            transcript_hash=self._transcript,
            linkage=proof,
        )
        self._transcript = _absorb(self._transcript, response)
        return challenge, response

    def on_confirm(self, message: HandshakeMessage) -> Session:
        if message.phase != "confirm" or self._client_nonce is None:
            raise AuthFailed("confirm", "out-of-order message")
        if message.transcript_hash != self._transcript:
            raise AuthFailed("confirm", "transcript-mismatch")
        if message.sender_appid != self._client_appid:
            raise AuthFailed("confirm", "bad-proof")
        session_nonce = _session_nonce(self._client_nonce, self._nonce)
        client_bcadd = _verify_peer(message, session_nonce, self._ledger)
        self._transcript = _absorb(self._transcript, message)
        try:
            shared = self._ephemeral.exchange(
                X25519PublicKey.from_public_bytes(self._client_share)
            )
        except ValueError:
            raise AuthFailed("confirm", "bad-key-share") from None
        key = owf(TAG_SESSION_KEY, shared, self._transcript)
        self._session = Session(
            session_id=_session_id(self._client_nonce, self._nonce),
            client_appid=self._client_appid,
            server_appid=self._creds.appid,
            route=self._route.reversed(),
            key=key,
            state="established",
            client_bcadd=client_bcadd,
            server_bcadd=self._creds.bcadd,
            heartbeat_timeout=self._timeout,
        )
        return self._session

    def session(self) -> Session:
        if self._session is None:
            raise AuthFailed("confirm", "handshake not complete")
        return self._session


@dataclass(frozen=True)
class HandshakeResult:
    client: Session
    server: Session
    transcript: tuple[HandshakeMessage, ...]


def handshake(
    client: PeerCredentials,
    server: PeerCredentials,
    route: RoutePath,
    ledger: Ledger,
    rng: Random,
    heartbeat_timeout: int = DEFAULT_HEARTBEAT_TIMEOUT,
) -> HandshakeResult:
    """Run the 4-phase exchange in memory and return both endpoints'
    sessions plus the wire transcript. Raises AuthFailed (and retains no
    session state) if either side rejects the other."""
    client_side = ClientHandshake(client, route, ledger, rng, heartbeat_timeout)
    server_side = ServerHandshake(server, route, ledger, rng, heartbeat_timeout)
    hello = client_side.hello()
    challenge, response = server_side.on_hello(hello)
    client_side.on_challenge(challenge)
    client_side.on_response(response)
    confirm = client_side.confirm()
    server_session = server_side.on_confirm(confirm)
    return HandshakeResult(
        client=client_side.session(),
        server=server_session,
        transcript=(hello, challenge, response, confirm),
    )


# ---------------------------------------------------------------------------
# Access control
# ---------------------------------------------------------------------------

def authorize(session: Session, ledger: Ledger) -> AccessDecision:
    """Evaluate the server's access-control list against current ledger
    state. Always re-reads the ledger: a token transfer between calls
    changes the answer."""
    if session.state not in ("established", "rotating") or session.client_bcadd is None:
        return AccessDecision(False, "bad-proof")
    registration = ledger.query_registration(session.server_appid.id)
    if registration is None:
        return AccessDecision(False, "unregistered")
    if registration.open_access:
        return AccessDecision(True, "open-access")
    for item in registration.access_control:
        if isinstance(item, bytes) and ledger.query_owner(item) == session.client_bcadd.address:
            return AccessDecision(True, "nft-owned")
    return AccessDecision(False, "no-token")


# ---------------------------------------------------------------------------
# In-session APPID rotation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RotationNotice:
    """Client's announcement of its next APPID, delivered in-session.

    auth_tag binds the notice to the old session key; without it the
    notice is indistinguishable from an out-of-session forgery and is
    rejected.
    """

    new_appid: APPID
    proof: LinkageProof
    auth_tag: bytes

    def body_bytes(self) -> bytes:
        return pack_bytes(self.new_appid.to_bytes()) + pack_bytes(self.proof.to_bytes())

    def to_bytes(self) -> bytes:
        return self.body_bytes() + pack_bytes(self.auth_tag)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RotationNotice":
        r = Reader(data)
        appid = APPID.from_bytes(r.bytes_())
        proof = LinkageProof.from_bytes(r.bytes_())
        tag = r.bytes_()
        r.expect_end()
        return cls(appid, proof, tag)


def rotation_nonce(session_id: bytes, rotation_index: int) -> bytes:
    return owf(TAG_ROT_NONCE, session_id, u32(rotation_index))[:NONCE_SIZE]


def make_rotation_notice(
    session: Session,
    secret: IdentitySecret,
    new_bcadd: BCADD,
    new_appid: APPID,
) -> RotationNotice:
    """Client side: prove the new APPID against the new BCADD, bound to
    this session's next rotation nonce, and tag with the old key."""
    if session.state != "established" or session.key is None:
        raise ContinuityRejected(f"session is {session.state}")
    nonce = rotation_nonce(session.session_id, session.rotation_count + 1)
    proof = make_linkage_proof(secret, new_bcadd, new_appid, nonce)
    notice = RotationNotice(new_appid, proof, b"")
    tag = owf(TAG_ROT_AUTH, session.key, notice.body_bytes())
    return RotationNotice(new_appid, proof, tag)


def rotate_session(session: Session, notice: RotationNotice) -> Session:
    """Apply a rotation notice to either endpoint's session.

    The notice must carry a tag under the current key (in-session
    delivery) and a valid linkage proof for the new APPID under the new
    chain address. On success the session keeps its id and status but
    speaks only the new APPID and a re-derived key.
    """
    if session.state not in ("established", "rotating") or session.key is None:
        raise ContinuityRejected(f"session is {session.state}")
    expected_tag = owf(TAG_ROT_AUTH, session.key, notice.body_bytes())
    if notice.auth_tag != expected_tag:
        raise ContinuityRejected("notice was not delivered inside this session")
    nonce = rotation_nonce(session.session_id, session.rotation_count + 1)
    try:
        claimed = notice.proof.claimed_bcadd()
    except (WireError, ValueError):
        raise ContinuityRejected("malformed continuity proof") from None
    if not verify_linkage(claimed, notice.new_appid, notice.proof, nonce):
        raise ContinuityRejected("continuity proof does not verify")
    if notice.new_appid == session.client_appid:
        raise ContinuityRejected("new APPID equals the current one")
    session.state = "rotating"
    session.client_appid = notice.new_appid
    session.client_bcadd = claimed
    session.key = owf(TAG_REKEY, session.key, owf(TAG_TRANSCRIPT, session.session_id, notice.body_bytes()))
    session.rotation_count += 1
    session.state = "established"
    return session


# ---------------------------------------------------------------------------
# Application messages, heartbeats, liveness
# ---------------------------------------------------------------------------

def message_tag(key: bytes, seq: int, payload: bytes) -> bytes:
    """Authentication tag for an in-session application message."""
    return owf(TAG_MSG_AUTH, key, u64(seq), payload)[:16]


def verify_message(session: Session, seq: int, payload: bytes, tag: bytes) -> bool:
    """True iff the tag was computed under the session's current key; a
    tag made with a superseded (pre-rotation) key fails."""
    if session.key is None:
        return False
    return message_tag(session.key, seq, payload) == tag


def heartbeat(session: Session, now: int) -> ServiceStatus:
    if session.state not in ("established", "rotating"):
        raise ValueError(f"heartbeat on {session.state} session")
    session.status.beat(now)
    return session.status


def check_alive(session: Session, now: int) -> ServiceStatus:
    """alive iff the heartbeat gap is within the timeout (boundary
    inclusive: a gap of exactly the timeout is still alive)."""
    session.status.check(now, session.heartbeat_timeout)
    return session.status


def record_delivery(session: Session, latency: float) -> ServiceStatus:
    session.status.record_delivery(latency)
    return session.status
