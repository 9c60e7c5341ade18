"""Protected buffers in untrusted off-chip DRAM.

A buffer of ``len`` bytes is cut into ``m = ceil(len / s)`` pieces.  Each piece
is sealed independently with

    nonce = region_id || index || version          (3 x u32, big-endian)
    aad   = region_id || index || version || piece_len

and its metadata entry ``version (u32) || tag (16 B)`` lives in a separate
metadata buffer.  The authoritative version counters stay on the trusted side
(host enclave / device on-chip table), so restoring an old ciphertext+tag pair
fails at the expected version.  The DRAM copy of the version is checked
against the trusted one purely so every metadata bit is covered.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from teeaccel import crypto_core as cc

STAGING_BYTES = 2048
META_ENTRY_BYTES = 4 + cc.TAG_BYTES
DEFAULT_VERSION_TABLE_BYTES = 64 * 1024
VERSION_BYTES = 4
MAX_VERSION = 2**32 - 1


class Mode(str, enum.Enum):
    OFF = "off"
    CTR = "ctr"
    FULL = "full"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        aliases = {"ctronly": "ctr", "ctr_only": "ctr", "none": "off", "trusted": "full"}
        return cls(aliases.get(value.lower(), value.lower()))


class ProtectionError(Exception):
    pass


class OutOfDram(ProtectionError):
    pass


class IntegrityError(ProtectionError):
    def __init__(self, region_id: int, index: int, reason: str = "tag mismatch"):
        super().__init__(f"region {region_id:#x} piece {index}: {reason}")
        self.region_id = region_id
        self.index = index
        self.reason = reason


class VersionOverflow(ProtectionError):
    pass


class ConfigError(ProtectionError):
    pass


@dataclass(frozen=True)
class Transfer:
    """One crossing of the DRAM boundary, as seen by a bus tap."""

    actor: str  # "host" | "device"
    op: str  # "read" | "write"
    addr: int
    data: bytes


class UntrustedDram:
    """Flat byte array with a bump allocator.

    ``taps`` are called with every :class:`Transfer` made by the host or the
    device; the adversary may also poke ``raw`` directly at any time.
    """

    def __init__(self, size: int, trusted: bool = False):
        self.raw = bytearray(size)
        self.size = size
        self.trusted = trusted
        self._next = 0
        self.taps: list[Callable[[Transfer], None]] = []

    def alloc(self, nbytes: int, align: int = 64) -> int:
        addr = -(-self._next // align) * align
        if addr + nbytes > self.size:
            raise OutOfDram(f"need {nbytes} bytes at {addr:#x}, DRAM is {self.size} bytes")
        self._next = addr + nbytes
        return addr

    @property
    def used(self) -> int:
        return self._next

    def read(self, addr: int, n: int, actor: str = "device") -> bytes:
        if addr < 0 or addr + n > self.size:
            raise IndexError(f"DRAM read [{addr:#x}, +{n}) out of range")
        data = bytes(self.raw[addr:addr + n])
        for tap in self.taps:
            tap(Transfer(actor, "read", addr, data))
        return data

    def write(self, addr: int, data: bytes, actor: str = "host") -> None:
        if addr < 0 or addr + len(data) > self.size:
            raise IndexError(f"DRAM write [{addr:#x}, +{len(data)}) out of range")
        self.raw[addr:addr + len(data)] = data
        for tap in self.taps:
            tap(Transfer(actor, "write", addr, bytes(data)))


@dataclass(frozen=True)
class ProtectionConfig:
    key: cc.SymmetricKey = field(repr=False)
    piece_size: int = STAGING_BYTES
    mode: Mode = Mode.FULL
    version_table_bytes: int = DEFAULT_VERSION_TABLE_BYTES

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.piece_size % 16 or not 16 <= self.piece_size <= STAGING_BYTES:
            raise ConfigError(f"piece size {self.piece_size} must be a multiple of 16 in [16, {STAGING_BYTES}]")


@dataclass
class ProtectedRegion:
    region_id: int
    base_addr: int
    meta_addr: int | None
    m: int
    length: int
    piece_size: int
    mode: Mode
    writable: bool = False
    versions: list[int] = field(default_factory=list)

    def piece_bounds(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.m:
            raise IndexError(f"piece {i} outside [0, {self.m})")
        start = i * self.piece_size
        return start, min(self.length, start + self.piece_size)

    def piece_len(self, i: int) -> int:
        lo, hi = self.piece_bounds(i)
        return hi - lo

    def pieces_for(self, offset: int, nbytes: int) -> range:
        if nbytes <= 0:
            return range(0)
        return range(offset // self.piece_size, (offset + nbytes - 1) // self.piece_size + 1)

    @property
    def meta_bytes(self) -> int:
        return self.m * META_ENTRY_BYTES if self.mode is Mode.FULL else 0

    def layout(self) -> dict:
        return {
            "region_id": self.region_id,
            "base_addr": self.base_addr,
            "meta_addr": self.meta_addr,
            "m": self.m,
            "s": self.piece_size,
            "len": self.length,
            "mode": self.mode.value,
            "writable": self.writable,
        }

    def view(self) -> "ProtectedRegion":
        """Independent copy of the descriptor with its own version table."""
        return ProtectedRegion(self.region_id, self.base_addr, self.meta_addr, self.m, self.length,
                               self.piece_size, self.mode, self.writable, [0] * self.m)


class StagingBuffer:
    """The security interface's on-chip buffer; every protected transfer passes through it."""

    def __init__(self, capacity: int = STAGING_BYTES):
        self.buf = bytearray(capacity)
        self.capacity = capacity
        self.fills = 0

    def load(self, data: bytes) -> memoryview:
        if len(data) > self.capacity:
            raise ConfigError(f"{len(data)}-byte piece exceeds {self.capacity}-byte staging buffer")
        self.buf[:len(data)] = data
        self.fills += 1
        return memoryview(self.buf)[:len(data)]


def piece_nonce(region_id: int, i: int, version: int) -> cc.NonceCounter:
    return cc.NonceCounter(region_id.to_bytes(4, "big") + i.to_bytes(4, "big") + version.to_bytes(4, "big"))


def piece_aad(region_id: int, i: int, version: int, piece_len: int) -> bytes:
    return b"".join(x.to_bytes(4, "big") for x in (region_id, i, version, piece_len))


def _meta_entry_addr(region: ProtectedRegion, i: int) -> int:
    return region.meta_addr + i * META_ENTRY_BYTES


def _encrypt_piece(region: ProtectedRegion, key: cc.SymmetricKey, i: int, version: int,
                   plain: bytes) -> tuple[bytes, bytes | None]:
    if region.mode is Mode.OFF:
        return bytes(plain), None
    key = region_key(key)
    nc = piece_nonce(region.region_id, i, version)
    if region.mode is Mode.CTR:
        return cc.ctr_xor(key, nc, plain), None
    ct, tag = cc.seal(key, nc, piece_aad(region.region_id, i, version, len(plain)), plain)
    return ct, version.to_bytes(VERSION_BYTES, "big") + tag


def _decrypt_piece(region: ProtectedRegion, key: cc.SymmetricKey, i: int, version: int,
                   ct: bytes, meta: bytes | None) -> bytes:
    if region.mode is Mode.OFF:
        return bytes(ct)
    key = region_key(key)
    nc = piece_nonce(region.region_id, i, version)
    if region.mode is Mode.CTR:
        return cc.ctr_xor(key, nc, ct)
    stored_version = int.from_bytes(meta[:VERSION_BYTES], "big")
    if stored_version != version:
        raise IntegrityError(region.region_id, i, f"stale metadata version {stored_version} != {version}")
    try:
        return cc.open_(key, nc, piece_aad(region.region_id, i, version, len(ct)), ct, meta[VERSION_BYTES:])
    except cc.AuthError:
        raise IntegrityError(region.region_id, i) from None


def region_key(key: cc.SymmetricKey) -> cc.SymmetricKey:
    """Memory-protection subkey of the session key."""
    return cc.subkey(key, b"memory")


def seal_region(dram: UntrustedDram, config: ProtectionConfig, region_id: int, plaintext: bytes,
                writable: bool = False, meta_addr: int | None = None) -> ProtectedRegion:
    """Host side: encrypt ``plaintext`` piecewise into freshly allocated DRAM.

    ``meta_addr`` lets several regions share one pre-allocated metadata buffer.
    """
    if not plaintext:
        raise ValueError("cannot seal an empty region")
    if not 0 <= region_id < 2**32:
        raise ValueError("region id is 32-bit")
    m = math.ceil(len(plaintext) / config.piece_size)
    base = dram.alloc(len(plaintext))
    mode = Mode.OFF if dram.trusted else config.mode
    if mode is Mode.FULL and meta_addr is None:
        meta_addr = dram.alloc(m * META_ENTRY_BYTES)
    region = ProtectedRegion(region_id, base, meta_addr if mode is Mode.FULL else None, m,
                             len(plaintext), config.piece_size, mode, writable, [0] * m)
    key = config.key
    for i in range(m):
        lo, hi = region.piece_bounds(i)
        ct, meta = _encrypt_piece(region, key, i, 0, plaintext[lo:hi])
        dram.write(base + lo, ct, actor="host")
        if meta is not None:
            dram.write(_meta_entry_addr(region, i), meta, actor="host")
    return region


def _read_piece(dram: UntrustedDram, region: ProtectedRegion, i: int, actor: str) -> tuple[bytes, bytes | None]:
    lo, hi = region.piece_bounds(i)
    ct = dram.read(region.base_addr + lo, hi - lo, actor=actor)
    meta = dram.read(_meta_entry_addr(region, i), META_ENTRY_BYTES, actor=actor) if region.mode is Mode.FULL else None
    return ct, meta


def device_fetch_piece(dram: UntrustedDram, region: ProtectedRegion, i: int, key: cc.SymmetricKey,
                       staging: StagingBuffer | None = None) -> bytes:
    """Fetch, decrypt and verify piece ``i`` at the device's expected version.

    ``key`` is the session key; ``region.versions`` is the device's table.
    """
    staging = staging or StagingBuffer()
    ct, meta = _read_piece(dram, region, i, "device")
    window = staging.load(ct)
    return _decrypt_piece(region, key, i, region.versions[i], window, meta)


def device_write_piece(dram: UntrustedDram, region: ProtectedRegion, i: int, plaintext: bytes,
                       key: cc.SymmetricKey) -> None:
    if not region.writable:
        raise ConfigError(f"region {region.region_id:#x} is read-only")
    if len(plaintext) != region.piece_len(i):
        raise ValueError(f"piece {i} is {region.piece_len(i)} bytes, got {len(plaintext)}")
    if region.versions[i] >= MAX_VERSION:
        raise VersionOverflow(f"region {region.region_id:#x} piece {i} exhausted its version counter")
    region.versions[i] += 1
    ct, meta = _encrypt_piece(region, key, i, region.versions[i], plaintext)
    lo, _ = region.piece_bounds(i)
    dram.write(region.base_addr + lo, ct, actor="device")
    if meta is not None:
        dram.write(_meta_entry_addr(region, i), meta, actor="device")


def host_read_region(dram: UntrustedDram, region: ProtectedRegion, key: cc.SymmetricKey) -> bytes:
    """Host side: decrypt and verify every piece at the host's version table."""
    out = bytearray()
    for i in range(region.m):
        ct, meta = _read_piece(dram, region, i, "host")
        out += _decrypt_piece(region, key, i, region.versions[i], ct, meta)
    return bytes(out)


def check_version_budget(regions, budget_bytes: int = DEFAULT_VERSION_TABLE_BYTES) -> int:
    """On-chip bytes needed for the writable regions' version tables."""
    need = sum(r.m * VERSION_BYTES for r in regions if r.writable)
    if need > budget_bytes:
        raise ConfigError(f"version table needs {need} bytes, on-chip budget is {budget_bytes}")
    return need


# -- DRAM image dump / load -------------------------------------------------

def dump_image(dram: UntrustedDram, regions, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (raw DRAM) and ``<path>.json`` (region layouts)."""
    path = Path(path)
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.write_bytes(bytes(dram.raw[:dram.used]))
    sidecar = {
        "schema_version": 1,
        "dram_size": dram.size,
        "image": bin_path.name,
        "regions": [r.layout() for r in regions],
    }
    json_path.write_text(json.dumps(sidecar, indent=2))
    return bin_path, json_path


def load_image(json_path: str | Path) -> tuple[UntrustedDram, list[ProtectedRegion]]:
    json_path = Path(json_path)
    sidecar = json.loads(json_path.read_text())
    image = (json_path.parent / sidecar["image"]).read_bytes()
    dram = UntrustedDram(sidecar["dram_size"])
    dram.raw[:len(image)] = image
    dram._next = len(image)
    regions = [
        ProtectedRegion(r["region_id"], r["base_addr"], r["meta_addr"], r["m"], r["len"], r["s"],
                        Mode(r["mode"]), r["writable"], [0] * r["m"])
        for r in sidecar["regions"]
    ]
    return dram, regions
