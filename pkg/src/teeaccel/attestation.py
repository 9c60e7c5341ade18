"""Trust establishment between the host enclave and the accelerator.

Three parties: the device (holds a burned-in endorsement key), the host
program running in the enclave, and the manufacturer CA.  The exchange is

    device -> host : Msg1 = (AK_pub, Sign(EK_pri, AK_pub))
    host   -> CA   : Msg1 + device_id          CA -> host : Certificate
    device -> host : Msg2 = (p, g, g^A, Sign(AK_pri, p || g || g^A))
    host   -> device: Msg3 = Encrypt(AK_pub, g^B)

after which both sides hold K = kdf(g^AB, transcript hash).  Any failure moves
a session to the terminal ``ABORTED`` state.

Wire format: each message is a sequence of fields, each a 4-byte big-endian
length followed by the raw bytes; integers are big-endian, minimal length.
"""

from __future__ import annotations

import base64
import enum
import threading
from dataclasses import dataclass, field

from teeaccel import crypto_core as cc


class ProtocolError(Exception):
    """Base for typed handshake failures."""


class UnknownDevice(ProtocolError):
    pass


class BadEndorsement(ProtocolError):
    pass


class BadCertificate(ProtocolError):
    pass


class BadSignature(ProtocolError):
    pass


class InvalidShare(ProtocolError):
    pass


class DecryptError(ProtocolError):
    pass


class StateError(ProtocolError):
    """Operation invoked in the wrong session state."""


class MalformedMessage(ProtocolError):
    pass


# -- encoding --------------------------------------------------------------

def int_bytes(n: int) -> bytes:
    return n.to_bytes(max(1, (n.bit_length() + 7) // 8), "big")


def encode_fields(*fields: bytes) -> bytes:
    return b"".join(len(f).to_bytes(4, "big") + bytes(f) for f in fields)


def decode_fields(data: bytes, count: int) -> list[bytes]:
    out, pos = [], 0
    for _ in range(count):
        if pos + 4 > len(data):
            raise MalformedMessage("truncated length prefix")
        n = int.from_bytes(data[pos:pos + 4], "big")
        pos += 4
        if pos + n > len(data):
            raise MalformedMessage("truncated field")
        out.append(bytes(data[pos:pos + n]))
        pos += n
    if pos != len(data):
        raise MalformedMessage("trailing bytes")
    return out


def dh_params_encoding(p: int, g: int, g_a: int) -> bytes:
    return encode_fields(int_bytes(p), int_bytes(g), int_bytes(g_a))


def _b64(b: bytes) -> str:
    return base64.b64encode(b).decode()


@dataclass(frozen=True)
class Msg1:
    ak_pub: bytes
    s1: bytes

    def encode(self) -> bytes:
        return encode_fields(self.ak_pub, self.s1)

    @classmethod
    def decode(cls, data: bytes) -> "Msg1":
        return cls(*decode_fields(data, 2))

    def to_json(self) -> dict:
        return {"type": "Msg1", "ak_pub": _b64(self.ak_pub), "s1": _b64(self.s1)}


@dataclass(frozen=True)
class Certificate:
    ak_pub: bytes
    ca_sig: bytes

    def encode(self) -> bytes:
        return encode_fields(self.ak_pub, self.ca_sig)

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        return cls(*decode_fields(data, 2))

    def to_json(self) -> dict:
        return {"type": "Certificate", "ak_pub": _b64(self.ak_pub), "ca_sig": _b64(self.ca_sig)}


@dataclass(frozen=True)
class Msg2:
    p: int
    g: int
    g_a: int
    s2: bytes

    def signed_bytes(self) -> bytes:
        return dh_params_encoding(self.p, self.g, self.g_a)

    def encode(self) -> bytes:
        return encode_fields(int_bytes(self.p), int_bytes(self.g), int_bytes(self.g_a), self.s2)

    @classmethod
    def decode(cls, data: bytes) -> "Msg2":
        p, g, g_a, s2 = decode_fields(data, 4)
        return cls(int.from_bytes(p, "big"), int.from_bytes(g, "big"), int.from_bytes(g_a, "big"), s2)

    def to_json(self) -> dict:
        return {"type": "Msg2", "p": hex(self.p), "g": hex(self.g), "g_a": hex(self.g_a), "s2": _b64(self.s2)}


@dataclass(frozen=True)
class Msg3:
    enc_g_b: bytes

    def encode(self) -> bytes:
        return encode_fields(self.enc_g_b)

    @classmethod
    def decode(cls, data: bytes) -> "Msg3":
        return cls(*decode_fields(data, 1))

    def to_json(self) -> dict:
        return {"type": "Msg3", "enc_g_b": _b64(self.enc_g_b)}


def msg_from_json(d: dict):
    kind = d["type"]
    if kind == "Msg1":
        return Msg1(base64.b64decode(d["ak_pub"]), base64.b64decode(d["s1"]))
    if kind == "Certificate":
        return Certificate(base64.b64decode(d["ak_pub"]), base64.b64decode(d["ca_sig"]))
    if kind == "Msg2":
        return Msg2(int(d["p"], 16), int(d["g"], 16), int(d["g_a"], 16), base64.b64decode(d["s2"]))
    if kind == "Msg3":
        return Msg3(base64.b64decode(d["enc_g_b"]))
    raise MalformedMessage(f"unknown message type {kind!r}")


def session_context(ak_pub: bytes, p: int, g: int, g_a: int, g_b: int) -> bytes:
    return b"teeaccel session v1" + cc.digest(ak_pub, int_bytes(p), int_bytes(g), int_bytes(g_a), int_bytes(g_b))


# -- parties ---------------------------------------------------------------

@dataclass
class DeviceIdentity:
    device_id: bytes
    ek: cc.KeyPair = field(repr=False)

    @classmethod
    def manufacture(cls, device_id: bytes, rng=None) -> "DeviceIdentity":
        return cls(device_id, cc.KeyPair.generate(rng))

    @property
    def ek_pub(self) -> bytes:
        return self.ek.public


class CaRegistry:
    """Manufacturer CA: device_id -> EK public key, plus its own signing pair."""

    def __init__(self, rng=None):
        self._keys = cc.KeyPair.generate(rng)
        self._known: dict[bytes, bytes] = {}
        self._lock = threading.Lock()

    @property
    def public_key(self) -> bytes:
        return self._keys.public

    def register(self, identity: DeviceIdentity) -> None:
        with self._lock:
            self._known[identity.device_id] = identity.ek_pub

    def ek_for(self, device_id: bytes) -> bytes | None:
        with self._lock:
            return self._known.get(device_id)

    def _issue(self, ak_pub: bytes) -> Certificate:
        return Certificate(ak_pub, cc.sign(self._keys.private, b"teeaccel cert v1" + ak_pub))


def certificate_valid(cert: Certificate, ca_pub: bytes) -> bool:
    return cc.verify(ca_pub, b"teeaccel cert v1" + cert.ak_pub, cert.ca_sig)


def ca_certify(registry: CaRegistry, device_id: bytes, msg1: Msg1) -> Certificate:
    ek_pub = registry.ek_for(device_id)
    if ek_pub is None:
        raise UnknownDevice(f"device {device_id!r} not registered")
    if not cc.verify(ek_pub, msg1.ak_pub, msg1.s1):
        raise BadEndorsement("s1 does not verify under the registered EK")
    return registry._issue(msg1.ak_pub)


class State(enum.Enum):
    INIT = "init"
    AWAIT_CERT = "await_cert"
    AUTHENTICATED = "authenticated"
    OFFERED = "offered"
    ESTABLISHED = "established"
    ABORTED = "aborted"


class _Session:
    state: State

    def _require(self, *states: State) -> None:
        if self.state not in states:
            raise StateError(f"session is {self.state.value}, expected {'/'.join(s.value for s in states)}")

    def _abort(self, exc: ProtocolError):
        self.state = State.ABORTED
        self.key = None
        raise exc


class DeviceSession(_Session):
    """Accelerator side.  AK and the DH exponent never leave this object."""

    def __init__(self, identity: DeviceIdentity, rng=None, group: cc.DhGroup = cc.MODP_2048,
                 allow_small_group: bool = False):
        group.check_size(allow_small_group)
        self._identity = identity
        self._rng = rng or cc.system_rng()
        self.group = group
        self._ak = cc.KeyPair.generate(self._rng)
        self._a: int | None = None
        self.g_a: int | None = None
        self.key: cc.SymmetricKey | None = None
        self.state = State.INIT

    @property
    def ak_pub(self) -> bytes:
        return self._ak.public

    def offer(self) -> Msg2:
        self._require(State.AUTHENTICATED)
        self._a = cc.dh_secret(self.group, self._rng)
        self.g_a = cc.dh_public(self.group, self._a)
        s2 = cc.sign(self._ak.private, dh_params_encoding(self.group.p, self.group.g, self.g_a))
        self.state = State.OFFERED
        return Msg2(self.group.p, self.group.g, self.g_a, s2)

    def complete(self, msg3: Msg3) -> cc.SymmetricKey:
        self._require(State.OFFERED)
        try:
            raw = cc.pk_decrypt(self._ak.private, msg3.enc_g_b)
        except cc.DecryptError as exc:
            self._abort(DecryptError(str(exc)))
        g_b = int.from_bytes(raw, "big")
        try:
            shared = cc.dh_shared(self.group, self._a, g_b)
        except cc.InvalidShare as exc:
            self._abort(InvalidShare(str(exc)))
        self.key = cc.kdf(shared, session_context(self.ak_pub, self.group.p, self.group.g, self.g_a, g_b))
        self._a = None
        self.state = State.ESTABLISHED
        return self.key


def device_begin(identity: DeviceIdentity, rng=None, group: cc.DhGroup = cc.MODP_2048,
                 allow_small_group: bool = False) -> tuple[DeviceSession, Msg1]:
    session = DeviceSession(identity, rng, group, allow_small_group)
    msg1 = Msg1(session.ak_pub, cc.sign(identity.ek.private, session.ak_pub))
    # the CA round-trip happens host-side; the device proceeds once the host asks for DH
    session.state = State.AUTHENTICATED
    return session, msg1


def device_dh_offer(session: DeviceSession) -> Msg2:
    return session.offer()


def device_complete(session: DeviceSession, msg3: Msg3) -> cc.SymmetricKey:
    return session.complete(msg3)


class HostSession(_Session):
    def __init__(self, ca_pub: bytes, rng=None, allow_small_group: bool = False):
        self.ca_pub = ca_pub
        self._rng = rng or cc.system_rng()
        self.allow_small_group = allow_small_group
        self.msg1: Msg1 | None = None
        self.ak_pub: bytes | None = None
        self.key: cc.SymmetricKey | None = None
        self.state = State.INIT

    def receive_msg1(self, msg1: Msg1) -> None:
        self._require(State.INIT)
        self.msg1 = msg1
        self.state = State.AWAIT_CERT

    def accept_certificate(self, cert: Certificate) -> None:
        self._require(State.AWAIT_CERT)
        if not certificate_valid(cert, self.ca_pub):
            self._abort(BadCertificate("certificate not signed by the CA"))
        if cert.ak_pub != self.msg1.ak_pub:
            self._abort(BadCertificate("certificate is for a different attestation key"))
        self.ak_pub = cert.ak_pub
        self.state = State.AUTHENTICATED

    def respond(self, msg2: Msg2) -> tuple[Msg3, cc.SymmetricKey]:
        self._require(State.AUTHENTICATED)
        if not cc.verify(self.ak_pub, msg2.signed_bytes(), msg2.s2):
            self._abort(BadSignature("s2 does not verify under the certified AK"))
        try:
            group = cc.DhGroup(msg2.p, msg2.g)
            group.check_size(self.allow_small_group)
        except (ValueError, cc.WeakGroup) as exc:
            self._abort(InvalidShare(f"unacceptable group: {exc}"))
        try:
            cc.check_share(group, msg2.g_a)
        except cc.InvalidShare as exc:
            self._abort(InvalidShare(str(exc)))
        b = cc.dh_secret(group, self._rng)
        g_b = cc.dh_public(group, b)
        shared = cc.dh_shared(group, b, msg2.g_a)
        self.key = cc.kdf(shared, session_context(self.ak_pub, group.p, group.g, msg2.g_a, g_b))
        msg3 = Msg3(cc.pk_encrypt(self.ak_pub, int_bytes(g_b).rjust(group.byte_len, b"\0"), self._rng))
        self.state = State.ESTABLISHED
        return msg3, self.key


def host_accept_certificate(session: HostSession, cert: Certificate, ca_pub: bytes | None = None) -> None:
    if ca_pub is not None and ca_pub != session.ca_pub:
        session.ca_pub = ca_pub
    session.accept_certificate(cert)


def host_dh_respond(session: HostSession, msg2: Msg2) -> tuple[Msg3, cc.SymmetricKey]:
    return session.respond(msg2)


# -- driver ------------------------------------------------------------------

@dataclass
class Transcript:
    """Every message that crossed an untrusted channel, in order."""

    entries: list[tuple[str, object]] = field(default_factory=list)

    def add(self, label: str, msg) -> None:
        self.entries.append((label, msg))

    def wire_bytes(self) -> list[bytes]:
        return [m.encode() for _, m in self.entries]

    def to_json(self) -> list[dict]:
        return [{"hop": label, **m.to_json()} for label, m in self.entries]


@dataclass
class HandshakeResult:
    host_key: cc.SymmetricKey
    device_key: cc.SymmetricKey
    transcript: Transcript
    device_session: DeviceSession
    host_session: HostSession


def _pass(tap, label: str, msg):
    return tap(label, msg) if tap is not None else msg


def run_handshake(identity: DeviceIdentity, registry: CaRegistry, rng=None,
                  group: cc.DhGroup = cc.MODP_2048, allow_small_group: bool = False,
                  channel_tap=None) -> HandshakeResult:
    """Drive one full session.  ``channel_tap(label, msg) -> msg`` sees (and may
    replace) every message on the untrusted links; it never sees session state."""
    rng = rng or cc.system_rng()
    transcript = Transcript()
    device, msg1 = device_begin(identity, rng, group, allow_small_group)
    host = HostSession(registry.public_key, rng, allow_small_group)

    msg1 = _pass(channel_tap, "device->host", msg1)
    transcript.add("device->host", msg1)
    host.receive_msg1(msg1)
    to_ca = _pass(channel_tap, "host->ca", msg1)
    transcript.add("host->ca", to_ca)
    cert = ca_certify(registry, identity.device_id, to_ca)
    cert = _pass(channel_tap, "ca->host", cert)
    transcript.add("ca->host", cert)
    host.accept_certificate(cert)

    msg2 = _pass(channel_tap, "device->host", device.offer())
    transcript.add("device->host", msg2)
    msg3, host_key = host.respond(msg2)
    msg3 = _pass(channel_tap, "host->device", msg3)
    transcript.add("host->device", msg3)
    device_key = device.complete(msg3)
    return HandshakeResult(host_key, device_key, transcript, device, host)


def verify_transcript(entries: list[dict], ca_pub: bytes) -> bool:
    """Offline re-check of a JSON trace: certificate, s2 and Msg1/cert binding."""
    msgs = [msg_from_json(e) for e in entries]
    m1 = next(m for m in msgs if isinstance(m, Msg1))
    cert = next(m for m in msgs if isinstance(m, Certificate))
    m2 = next(m for m in msgs if isinstance(m, Msg2))
    return (
        certificate_valid(cert, ca_pub)
        and cert.ak_pub == m1.ak_pub
        and cc.verify(cert.ak_pub, m2.signed_bytes(), m2.s2)
    )
