"""MAC + monotonic-nonce protection for registers written over untrusted MMIO.

The enclave runtime keeps a shadow copy of the authenticated registers.  Each
commit produces an envelope: the full post-write snapshot, a fresh 64-bit
nonce and a tag over ``snapshot || nonce``.  The (untrusted) driver writes the
snapshot registers, then the four MAC words and two nonce words, and finally
``control``.  The device buffers everything and only checks/latches when a
``control`` write with the launch bit arrives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from teeaccel import crypto_core as cc

AUTH_REGISTERS = (
    "insn_addr",
    "insn_count",
    "uop_addr",
    "inp_addr",
    "wgt_addr",
    "out_addr",
    "meta_addr",
    "control",
)
MAC_SLOTS = ("mac_lo", "mac_hi", "mac2_lo", "mac2_hi")
NONCE_SLOTS = ("nonce_lo", "nonce_hi")

OFFSETS = {name: 4 * i for i, name in enumerate(AUTH_REGISTERS + MAC_SLOTS + NONCE_SLOTS)}
NAMES = {off: name for name, off in OFFSETS.items()}

# control register layout
CTRL_LAUNCH = 1 << 0
CTRL_MODE_SHIFT = 1
CTRL_MODE_MASK = 0b11 << CTRL_MODE_SHIFT
CTRL_PIECE_SHIFT = 8  # piece size / 16 in bits 8..19

MODE_CODES = {"off": 0, "ctr": 1, "full": 2}

MASK32 = 0xFFFFFFFF


class RegisterError(Exception):
    pass


class UnknownRegister(RegisterError):
    pass


class MacError(RegisterError):
    pass


class ReplayError(RegisterError):
    pass


def encode_control(mode: str, piece_size: int, launch: bool = True) -> int:
    return (CTRL_LAUNCH if launch else 0) | (MODE_CODES[mode] << CTRL_MODE_SHIFT) | ((piece_size // 16) << CTRL_PIECE_SHIFT)


def decode_control(value: int) -> tuple[str, int, bool]:
    code = (value & CTRL_MODE_MASK) >> CTRL_MODE_SHIFT
    mode = {v: k for k, v in MODE_CODES.items()}.get(code, "off")
    return mode, ((value >> CTRL_PIECE_SHIFT) & 0xFFF) * 16, bool(value & CTRL_LAUNCH)


def snapshot_bytes(regs: dict[str, int]) -> bytes:
    return b"".join((regs.get(name, 0) & MASK32).to_bytes(4, "big") for name in AUTH_REGISTERS)


def parse_snapshot(snapshot: bytes) -> dict[str, int]:
    return {name: int.from_bytes(snapshot[4 * i:4 * i + 4], "big") for i, name in enumerate(AUTH_REGISTERS)}


def register_key(key: cc.SymmetricKey) -> cc.SymmetricKey:
    return cc.subkey(key, b"registers")


def envelope_tag(key: cc.SymmetricKey, snapshot: bytes, nonce: int) -> bytes:
    nonce8 = nonce.to_bytes(8, "big")
    _, tag = cc.seal(register_key(key), cc.NonceCounter(b"\0" * 4 + nonce8), snapshot + nonce8, b"")
    return tag


@dataclass(frozen=True)
class RegisterEnvelope:
    snapshot: bytes
    nonce: int
    mac: bytes

    @property
    def values(self) -> dict[str, int]:
        return parse_snapshot(self.snapshot)

    def mmio_writes(self) -> list[tuple[int, int]]:
        """Driver write order: data registers, MAC words, nonce words, control."""
        regs = self.values
        writes = [(OFFSETS[name], regs[name]) for name in AUTH_REGISTERS if name != "control"]
        writes += [(OFFSETS[name], int.from_bytes(self.mac[4 * i:4 * i + 4], "big")) for i, name in enumerate(MAC_SLOTS)]
        writes += [(OFFSETS["nonce_lo"], self.nonce & MASK32), (OFFSETS["nonce_hi"], self.nonce >> 32)]
        writes.append((OFFSETS["control"], regs["control"]))
        return writes


@dataclass
class ShadowState:
    regs: dict[str, int] = field(default_factory=lambda: dict.fromkeys(AUTH_REGISTERS, 0))
    next_nonce: int = 1


def host_commit_registers(shadow: ShadowState, writes, key: cc.SymmetricKey) -> RegisterEnvelope:
    writes = list(writes)
    for name, value in writes:
        if name not in AUTH_REGISTERS:
            raise UnknownRegister(name)
        if not 0 <= value <= MASK32:
            raise ValueError(f"{name}={value} is not a 32-bit value")
    if shadow.next_nonce >= 2**64:
        raise RegisterError("register nonce space exhausted; re-attest")
    for name, value in writes:
        shadow.regs[name] = value
    snap = snapshot_bytes(shadow.regs)
    nonce = shadow.next_nonce
    shadow.next_nonce += 1
    return RegisterEnvelope(snap, nonce, envelope_tag(key, snap, nonce))


@dataclass(frozen=True)
class Accept:
    nonce: int


def device_apply_envelope(device_regs: dict[str, int], envelope: RegisterEnvelope, key: cc.SymmetricKey,
                          last_nonce: int) -> Accept:
    """Latch ``envelope`` into ``device_regs`` iff the tag verifies and the nonce is fresh.

    ``device_regs`` is left untouched on any error.
    """
    if len(envelope.snapshot) != 4 * len(AUTH_REGISTERS) or not 0 <= envelope.nonce < 2**64:
        raise MacError("malformed envelope")
    if not cc.tags_equal(envelope_tag(key, envelope.snapshot, envelope.nonce), bytes(envelope.mac)):
        raise MacError("register MAC mismatch")
    if envelope.nonce <= last_nonce:
        raise ReplayError(f"nonce {envelope.nonce} <= last accepted {last_nonce}")
    device_regs.update(parse_snapshot(envelope.snapshot))
    return Accept(envelope.nonce)


class DeviceRegisterPort:
    """Device side of the MMIO window.

    With ``protected=False`` (the unmodified accelerator) writes latch
    immediately and launch is unconditional.
    """

    def __init__(self, key: cc.SymmetricKey | None, protected: bool = True):
        self.key = key
        self.protected = protected
        self.regs: dict[str, int] = dict.fromkeys(AUTH_REGISTERS, 0)
        self.last_nonce = 0
        self._pending: dict[str, int] = {}
        self.accepted: list[int] = []
        self.rejections: list[RegisterError] = []

    def reset(self, key: cc.SymmetricKey | None) -> None:
        """Re-attestation: new key, nonce state starts over."""
        self.__init__(key, self.protected)

    def write(self, offset: int, value: int) -> bool:
        """Returns True when this write launched a kernel."""
        name = NAMES.get(offset)
        if name is None:
            return False
        value &= MASK32
        if not self.protected:
            if name in AUTH_REGISTERS:
                self.regs[name] = value
            return name == "control" and bool(value & CTRL_LAUNCH)
        self._pending[name] = value
        if name != "control" or not value & CTRL_LAUNCH:
            return False
        pending, self._pending = self._pending, {}
        staged = {n: pending.get(n, self.regs[n]) for n in AUTH_REGISTERS}
        mac = b"".join(pending.get(n, 0).to_bytes(4, "big") for n in MAC_SLOTS)
        nonce = pending.get("nonce_lo", 0) | (pending.get("nonce_hi", 0) << 32)
        envelope = RegisterEnvelope(snapshot_bytes(staged), nonce, mac)
        try:
            accept = device_apply_envelope(self.regs, envelope, self.key, self.last_nonce)
        except RegisterError as exc:
            self.rejections.append(exc)
            raise
        self.last_nonce = accept.nonce
        self.accepted.append(accept.nonce)
        return True


class MmioBus:
    """Untrusted path from the driver to the device.

    ``tap`` may rewrite the write list before delivery (reorder, drop,
    duplicate, modify); ``trace`` records what actually reached the device.
    """

    def __init__(self, port: DeviceRegisterPort, tap=None):
        self.port = port
        self.tap = tap
        self.trace: list[tuple[int, int]] = []

    def deliver(self, writes: list[tuple[int, int]]) -> int:
        """Deliver writes in order; returns the number of launches triggered."""
        if self.tap is not None:
            writes = self.tap(list(writes))
        launches = 0
        for offset, value in writes:
            self.trace.append((offset, value))
            if self.port.write(offset, value):
                launches += 1
        return launches

    def trace_json(self) -> list[dict]:
        return [{"offset": off, "value": val} for off, val in self.trace]
